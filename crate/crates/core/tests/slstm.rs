mod common;

use aslstm::batch::Layout;
use aslstm::slstm::{
    adaptive_stack, full_stack, global_gates, global_transition, neighbourhood, project_tokens,
    word_gates, word_transition, LayerState, SlstmParams, StackOptions, TransitionCounts,
};
use aslstm_tensor::{Tape, Tensor};
use common::reference::{self, Params, State};
use common::{rand_t, rng, slstm_tensors, slstm_vars};
use proptest::prelude::*;
use rand::Rng;

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn to_ref(s: &aslstm::slstm::SlstmState<f64>) -> State {
    State {
        h: rows(&s.h),
        c: rows(&s.c),
        g: s.g.data().to_vec(),
        cg: s.cg.data().to_vec(),
    }
}

fn max_diff(a: &State, b: &State) -> f64 {
    let flat = |s: &State| {
        let mut v: Vec<f64> = s.h.concat();
        v.extend(s.c.concat());
        v.extend(&s.g);
        v.extend(&s.cg);
        v
    };
    flat(a)
        .iter()
        .zip(flat(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

struct Case {
    lengths: Vec<usize>,
    params: Vec<Tensor<f64>>,
    x: Tensor<f64>,
    h0: Tensor<f64>,
    depths: Vec<usize>,
}

fn case(seed: u64, lengths: Vec<usize>, layers: usize) -> Case {
    let mut r = rng(seed);
    let (xd, h) = (4, 5);
    let n: usize = lengths.iter().sum();
    Case {
        params: slstm_tensors(xd, h, 0.6, &mut r),
        x: rand_t(&[n, xd], 1.0, &mut r),
        h0: rand_t(&[n, h], 0.5, &mut r),
        depths: (0..n).map(|_| r.gen_range(1..=layers)).collect(),
        lengths,
    }
}

/// Runs the batched stack and returns per-layer, per-sentence states.
fn batched(
    c: &Case,
    depths: Option<&[usize]>,
    layers: usize,
    opts: StackOptions,
) -> (Vec<Vec<State>>, TransitionCounts) {
    let layout = Layout::new(c.lengths.clone()).unwrap();
    let mut tape = Tape::new();
    let vars: Vec<_> = c.params.iter().map(|t| tape.constant(t.clone())).collect();
    let p = slstm_vars(&vars);
    let x = tape.constant(c.x.clone());
    let h0 = tape.constant(c.h0.clone());
    let xu = project_tokens(&mut tape, &p, x).unwrap();
    let mut counts = TransitionCounts::default();
    let states = match depths {
        Some(d) => {
            adaptive_stack(&mut tape, &p, xu, &layout, d, Some(h0), opts, &mut counts).unwrap()
        }
        None => full_stack(
            &mut tape,
            &p,
            xu,
            &layout,
            layers,
            Some(h0),
            opts,
            &mut counts,
        )
        .unwrap(),
    };
    let out = states
        .iter()
        .enumerate()
        .map(|(l, s)| {
            (0..layout.sentences())
                .map(|b| to_ref(&s.sentence(&tape, &layout, b, l)))
                .collect()
        })
        .collect();
    (out, counts)
}

fn reference_runs(c: &Case, depths: &[usize]) -> Vec<Vec<State>> {
    let layout = Layout::new(c.lengths.clone()).unwrap();
    let p = Params::from_slice(&c.params);
    (0..layout.sentences())
        .map(|b| {
            let span = layout.span(b);
            let x: Vec<Vec<f64>> = span.clone().map(|r| c.x.row(r).to_vec()).collect();
            let h0: Vec<Vec<f64>> = span.clone().map(|r| c.h0.row(r).to_vec()).collect();
            reference::run(&p, &x, &depths[span], Some(&h0))
        })
        .collect()
}

#[test]
fn adaptive_matches_plain_loop_reference() {
    for seed in 0..6 {
        let c = case(seed, vec![3, 1, 6, 2], 4);
        let refs = reference_runs(&c, &c.depths);
        for threshold in [0.0, 0.5, 1.01] {
            let opts = StackOptions {
                compaction_threshold: threshold,
                ..Default::default()
            };
            let (got, _) = batched(&c, Some(&c.depths), 4, opts);
            for (l, layer) in got.iter().enumerate() {
                for (b, s) in layer.iter().enumerate() {
                    let r = &refs[b][l.min(refs[b].len() - 1)];
                    let d = max_diff(s, r);
                    assert!(
                        d < 1e-12,
                        "seed {seed} threshold {threshold} layer {l} sentence {b}: {d}"
                    );
                }
            }
        }
    }
}

#[test]
fn full_stack_matches_plain_loop_reference() {
    let c = case(11, vec![5, 2, 7], 3);
    let all = vec![3; c.x.rows()];
    let refs = reference_runs(&c, &all);
    let (got, counts) = batched(&c, None, 3, StackOptions::default());
    assert_eq!(got.len(), 4);
    for (l, layer) in got.iter().enumerate() {
        for (b, s) in layer.iter().enumerate() {
            assert!(max_diff(s, &refs[b][l]) < 1e-12);
        }
    }
    assert_eq!(counts.word, 3 * 14);
    assert_eq!(counts.global, 3 * 3);
}

#[test]
fn uniform_depths_reproduce_full_stack_bitwise() {
    for seed in 0..5 {
        let c = case(100 + seed, vec![4, 9, 1], 6);
        let all = vec![6; c.x.rows()];
        let (a, _) = batched(&c, Some(&all), 6, StackOptions::default());
        let (f, _) = batched(&c, None, 6, StackOptions::default());
        assert_eq!(a, f);
    }
}

#[test]
fn positions_within_a_layer_are_order_independent() {
    for seed in 0..5 {
        let mut r = rng(700 + seed);
        let layout = Layout::new(vec![5, 2, 7]).unwrap();
        let (xd, h, n) = (3, 4, layout.tokens());
        let params = slstm_tensors(xd, h, 0.7, &mut r);
        let mut tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|t| tape.constant(t.clone())).collect();
        let p = slstm_vars(&vars);
        let state = LayerState {
            h: tape.constant(rand_t(&[n, h], 1.0, &mut r)),
            c: tape.constant(rand_t(&[n, h], 1.0, &mut r)),
            g: tape.constant(rand_t(&[3, h], 1.0, &mut r)),
            cg: tape.constant(rand_t(&[3, h], 1.0, &mut r)),
        };
        let xt: Tensor<f64> = rand_t(&[n, xd], 1.0, &mut r);
        let forward: Vec<usize> = (0..n).collect();
        let backward: Vec<usize> = (0..n).rev().collect();
        let mut run = |rows: &[usize]| {
            let picked: Vec<Vec<f64>> = rows.iter().map(|&i| xt.row(i).to_vec()).collect();
            let x = tape.constant(Tensor::from_rows(&picked).unwrap());
            let nb = neighbourhood(&mut tape, &state, &layout, rows, true).unwrap();
            let (hn, _) = word_transition(&mut tape, &p, x, &nb).unwrap();
            tape.value(hn).clone()
        };
        let a = run(&forward);
        let b = run(&backward);
        for i in 0..n {
            assert_eq!(a.row(i), b.row(n - 1 - i));
        }
    }
}

#[test]
fn halted_words_are_copied_bitwise_and_counted() {
    for seed in 0..8 {
        let c = case(200 + seed, vec![6, 3, 8], 5);
        for threshold in [0.0, 0.5, 1.01] {
            let opts = StackOptions {
                compaction_threshold: threshold,
                ..Default::default()
            };
            let (got, counts) = batched(&c, Some(&c.depths), 5, opts);
            let layout = Layout::new(c.lengths.clone()).unwrap();
            for b in 0..layout.sentences() {
                for (i, r) in layout.span(b).enumerate() {
                    let d = c.depths[r];
                    for later in &got[d + 1..] {
                        assert_eq!(later[b].h[i + 1], got[d][b].h[i + 1]);
                        assert_eq!(later[b].c[i + 1], got[d][b].c[i + 1]);
                    }
                }
                let dmax = c.depths[layout.span(b)].iter().copied().max().unwrap();
                for later in &got[dmax + 1..] {
                    assert_eq!(later[b].g, got[dmax][b].g);
                    assert_eq!(later[b].cg, got[dmax][b].cg);
                }
            }
            assert_eq!(counts.word, c.depths.iter().sum::<usize>() as u64);
        }
    }
}

#[test]
fn zero_parameters_give_uniform_gates() {
    let (xd, h, n) = (3, 4, 5);
    let mut r = rng(3);
    let zeros: Vec<Tensor<f64>> = slstm_tensors(xd, h, 1.0, &mut r)
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<_> = zeros.iter().map(|t| tape.constant(t.clone())).collect();
    let p = slstm_vars(&vars);
    let cs: Vec<Tensor<f64>> = (0..4).map(|_| rand_t(&[n, h], 1.0, &mut r)).collect();
    let hs: Vec<Tensor<f64>> = (0..3).map(|_| rand_t(&[n, h], 1.0, &mut r)).collect();
    let g = rand_t::<f64>(&[n, h], 1.0, &mut r);
    let nb = aslstm::slstm::Neighbourhood {
        h_left: tape.constant(hs[0].clone()),
        h_self: tape.constant(hs[1].clone()),
        h_right: tape.constant(hs[2].clone()),
        c_left: tape.constant(cs[0].clone()),
        c_self: tape.constant(cs[1].clone()),
        c_right: tape.constant(cs[2].clone()),
        g: tape.constant(g),
        cg: tape.constant(cs[3].clone()),
    };
    let x = tape.constant(rand_t(&[n, xd], 1.0, &mut r));
    let (hn, cn) = word_transition(&mut tape, &p, x, &nb).unwrap();
    for k in 0..n * h {
        let want_c = 0.2 * (cs[0].data()[k] + cs[1].data()[k] + cs[2].data()[k] + cs[3].data()[k]);
        assert!((tape.value(cn).data()[k] - want_c).abs() < 1e-14);
        assert!((tape.value(hn).data()[k] - 0.5 * want_c.tanh()).abs() < 1e-14);
    }

    // one-word sentence: word and global forget gates are both 1/2
    let layout = Layout::new(vec![1, 3]).unwrap();
    let mut state = LayerState::zeros(&mut tape, &layout, h);
    let c4 = rand_t::<f64>(&[4, h], 1.0, &mut r);
    let cg = rand_t::<f64>(&[2, h], 1.0, &mut r);
    state.c = tape.constant(c4.clone());
    state.cg = tape.constant(cg.clone());
    let gates = global_gates(&mut tape, &p, &state, &layout, &[0, 1]).unwrap();
    let words = tape.value(gates.words).clone();
    for (row, want) in [(0, 0.5), (1, 0.25), (2, 0.25), (3, 0.25)] {
        assert!(words.row(row).iter().all(|v| (v - want).abs() < 1e-15));
    }
    let (g, cgn) = global_transition(&mut tape, &p, &state, &layout, &[0, 1]).unwrap();
    for j in 0..h {
        let want0 = 0.5 * (cg.get(0, j) + c4.get(0, j));
        let want1 = 0.25 * (cg.get(1, j) + c4.get(1, j) + c4.get(2, j) + c4.get(3, j));
        assert!((tape.value(cgn).get(0, j) - want0).abs() < 1e-15);
        assert!((tape.value(cgn).get(1, j) - want1).abs() < 1e-15);
        assert!((tape.value(g).get(1, j) - 0.5 * want1.tanh()).abs() < 1e-15);
    }
}

#[test]
fn one_layer_is_a_single_transition_from_the_initial_state() {
    let c = case(7, vec![4], 1);
    let (got, counts) = batched(&c, None, 1, StackOptions::default());
    let p = Params::from_slice(&c.params);
    let x: Vec<Vec<f64>> = rows(&c.x);
    let start = State::initial(4, 5, Some(&rows(&c.h0)));
    for i in 1..=4 {
        let (h, cc) = reference::word(&p, &x[i - 1], &start, i);
        assert!(h
            .iter()
            .zip(&got[1][0].h[i])
            .all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(cc
            .iter()
            .zip(&got[1][0].c[i])
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }
    assert_eq!(counts.layers, 1);
}

#[test]
fn receptive_field_grows_one_word_per_layer_without_global_node() {
    let lengths = vec![9];
    let mut c = case(21, lengths, 4);
    c.h0 = Tensor::zeros(&[9, 5]);
    let opts = StackOptions {
        global_coupling: false,
        ..Default::default()
    };
    let (base, _) = batched(&c, None, 4, opts);
    let probe = 4;
    for j in 0..c.x.cols() {
        let v = c.x.get(probe, j);
        c.x.row_mut(probe)[j] = v + 0.5;
    }
    let (moved, _) = batched(&c, None, 4, opts);
    for l in 1..=4 {
        for i in 0..9usize {
            let changed = base[l][0].h[i + 1] != moved[l][0].h[i + 1];
            assert_eq!(changed, i.abs_diff(probe) < l, "layer {l} word {i}");
        }
    }
}

#[test]
fn sentences_do_not_interact_within_a_batch() {
    let c = case(31, vec![3, 6, 2], 3);
    let (together, _) = batched(&c, Some(&c.depths), 3, StackOptions::default());
    let layout = Layout::new(c.lengths.clone()).unwrap();
    for b in 0..3 {
        let span = layout.span(b);
        let alone = Case {
            lengths: vec![c.lengths[b]],
            params: c.params.clone(),
            x: Tensor::from_rows(&rows(&c.x)[span.clone()]).unwrap(),
            h0: Tensor::from_rows(&rows(&c.h0)[span.clone()]).unwrap(),
            depths: c.depths[span.clone()].to_vec(),
        };
        let (own, _) = batched(&alone, Some(&alone.depths), 3, StackOptions::default());
        let dmax = own.len() - 1;
        for (l, layer) in together.iter().enumerate() {
            assert!(max_diff(&layer[b], &own[l.min(dmax)][0]) < 1e-13);
        }
    }
}

#[test]
fn padding_rows_stay_zero() {
    let c = case(41, vec![2, 5], 3);
    let (got, _) = batched(&c, Some(&c.depths), 3, StackOptions::default());
    for layer in &got {
        for s in layer {
            for pad in [0, s.h.len() - 1] {
                assert!(s.h[pad].iter().chain(&s.c[pad]).all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn parameter_count_does_not_depend_on_depth() {
    let count = |layers: usize| {
        let m: aslstm::model::Model<f64> = common::tiny_model(common::tiny_config(layers), 0);
        m.store
            .iter()
            .filter(|p| p.name.starts_with("slstm."))
            .map(|p| p.value.len())
            .sum::<usize>()
    };
    assert_eq!(count(1), count(9));
    let mut store = aslstm::params::ParamStore::<f64>::new();
    SlstmParams::new(&mut store, 7, 5, &mut rng(0));
    assert_eq!(
        store.numel(),
        3 * 5 * 35 + 7 * 35 + 5 * 35 + 35 + 2 * (5 * 10) + 10 + 2 * 25 + 5
    );
}

#[test]
fn stacks_reject_bad_depths() {
    let c = case(51, vec![2, 2], 2);
    let layout = Layout::new(c.lengths.clone()).unwrap();
    let mut tape = Tape::new();
    let vars: Vec<_> = c.params.iter().map(|t| tape.constant(t.clone())).collect();
    let p = slstm_vars(&vars);
    let x = tape.constant(c.x.clone());
    let xu = project_tokens(&mut tape, &p, x).unwrap();
    let mut counts = TransitionCounts::default();
    let opts = StackOptions::default();
    assert!(adaptive_stack(
        &mut tape,
        &p,
        xu,
        &layout,
        &[1, 0, 1, 1],
        None,
        opts,
        &mut counts
    )
    .is_err());
    assert!(adaptive_stack(&mut tape, &p, xu, &layout, &[1, 1], None, opts, &mut counts).is_err());
    assert!(full_stack(&mut tape, &p, xu, &layout, 0, None, opts, &mut counts).is_err());
    let s = LayerState::zeros(&mut tape, &layout, 5);
    assert!(global_transition(&mut tape, &p, &s, &layout, &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gates_sum_to_one(seed in 0u64..10_000, lengths in prop::collection::vec(1usize..8, 1..4), scale in 0.1f64..4.0) {
        let mut r = rng(seed);
        let (xd, h) = (3, 4);
        let layout = Layout::new(lengths).unwrap();
        let n = layout.tokens();
        let params = slstm_tensors(xd, h, scale, &mut r);
        let mut tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|t| tape.constant(t.clone())).collect();
        let p = slstm_vars(&vars);
        let state = LayerState {
            h: tape.constant(rand_t(&[n, h], 1.0, &mut r)),
            c: tape.constant(rand_t(&[n, h], 3.0, &mut r)),
            g: tape.constant(rand_t(&[layout.sentences(), h], 1.0, &mut r)),
            cg: tape.constant(rand_t(&[layout.sentences(), h], 3.0, &mut r)),
        };
        let all: Vec<usize> = (0..n).collect();
        let nb = neighbourhood(&mut tape, &state, &layout, &all, true).unwrap();
        let x = tape.constant(rand_t(&[n, xd], 1.0, &mut r));
        let xu = project_tokens(&mut tape, &p, x).unwrap();
        let wg = word_gates(&mut tape, &p, xu, &nb).unwrap();
        let m = tape.value(wg.mixing);
        for row in 0..n {
            for j in 0..h {
                let s: f64 = (0..5).map(|k| m.get(row, k * h + j)).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
        let sents: Vec<usize> = (0..layout.sentences()).collect();
        let gg = global_gates(&mut tape, &p, &state, &layout, &sents).unwrap();
        let (w, g) = (tape.value(gg.words), tape.value(gg.global));
        for (k, seg) in gg.segments.iter().enumerate() {
            for j in 0..h {
                let s: f64 = seg.clone().map(|r| w.get(r, j)).sum::<f64>() + g.get(k, j);
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
