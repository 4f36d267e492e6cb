//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance run. Each returns the worst relative error over `instances`
//! random problems.

use aslstm::batch::Layout;
use aslstm::classify::{class_logits, pool_head, ClassifierVars};
use aslstm::depth::{depth_logits, init_h0, DepthVars};
use aslstm::embed::{char_cnn, refine_tokens, sinusoidal_table, CharVocab, EmbedVars};
use aslstm::seq::{bilstm, lstm_cell, LstmVars};
use aslstm::slstm::{global_transition, neighbourhood, word_transition, LayerState, Neighbourhood};
use aslstm_tensor::{grad_check, Activation, Tensor, TensorError};
use rand::Rng;

use super::{rand_t, rng, slstm_tensors, slstm_vars, weighted_sum};

pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn lift<T>(r: aslstm::Result<T>) -> aslstm_tensor::Result<T> {
    r.map_err(|e| match e {
        aslstm::Error::Tensor(t) => t,
        other => TensorError::Argument(other.to_string()),
    })
}

fn random_lengths(r: &mut impl Rng, max_sent: usize, max_len: usize) -> Vec<usize> {
    (0..r.gen_range(1..=max_sent))
        .map(|_| r.gen_range(1..=max_len))
        .collect()
}

fn worst(instances: u64, mut f: impl FnMut(u64) -> f64) -> f64 {
    (0..instances).map(&mut f).fold(0.0, f64::max)
}

pub fn linear(instances: u64) -> f64 {
    worst(instances, |seed| {
        let mut r = rng(1000 + seed);
        let (n, i, o) = (r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..6));
        let inputs = vec![
            rand_t(&[n, i], 1.0, &mut r),
            rand_t(&[i, o], 1.0, &mut r),
            rand_t(&[o], 1.0, &mut r),
        ];
        grad_check(
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted_sum(t, y, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap()
    })
}

pub fn activations(instances: u64) -> f64 {
    worst(instances, |seed| {
        let mut r = rng(1100 + seed);
        let kind = [Activation::Sigmoid, Activation::Tanh, Activation::Relu][seed as usize % 3];
        // keep relu inputs away from the kink
        let x: Tensor<f64> =
            rand_t::<f64>(&[3, 4], 2.0, &mut r).map(|v| if v.abs() < 0.01 { v + 0.05 } else { v });
        grad_check(
            |t, v| {
                let y = t.activation(v[0], kind);
                weighted_sum(t, y, seed)
            },
            &[x],
            EPS,
        )
        .unwrap()
    })
}

pub fn lstm_cell_check(instances: u64) -> f64 {
    worst(instances, |seed| {
        let mut r = rng(seed);
        let (n, xd, h) = (r.gen_range(1..4), 3, 4);
        let inputs = vec![
            rand_t(&[xd, 4 * h], 0.8, &mut r),
            rand_t(&[h, 4 * h], 0.8, &mut r),
            rand_t(&[4 * h], 0.8, &mut r),
            rand_t(&[n, xd], 1.0, &mut r),
            rand_t(&[n, h], 1.0, &mut r),
            rand_t(&[n, h], 1.0, &mut r),
        ];
        grad_check(
            |t, v| {
                let p = LstmVars {
                    wx: v[0],
                    wh: v[1],
                    b: v[2],
                };
                let (h, c) = lift(lstm_cell(t, &p, v[3], v[4], v[5]))?;
                let both = t.concat_cols(&[h, c])?;
                weighted_sum(t, both, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap()
    })
}

pub fn bilstm_check(instances: u64) -> f64 {
    worst(instances, |seed| {
        let mut r = rng(100 + seed);
        let layout = Layout::new(random_lengths(&mut r, 3, 4)).unwrap();
        let (xd, h) = (3, 2);
        let mut inputs = Vec::new();
        for _ in 0..2 {
            inputs.push(rand_t(&[xd, 4 * h], 0.8, &mut r));
            inputs.push(rand_t(&[h, 4 * h], 0.8, &mut r));
            inputs.push(rand_t(&[4 * h], 0.8, &mut r));
        }
        inputs.push(rand_t(&[layout.tokens(), xd], 1.0, &mut r));
        grad_check(
            |t, v| {
                let f = LstmVars {
                    wx: v[0],
                    wh: v[1],
                    b: v[2],
                };
                let b = LstmVars {
                    wx: v[3],
                    wh: v[4],
                    b: v[5],
                };
                let y = lift(bilstm(t, &f, &b, v[6], &layout))?;
                weighted_sum(t, y, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap()
    })
}

pub fn word_transition_check(instances: u64) -> f64 {
    worst(instances, |seed| {
        let mut r = rng(200 + seed);
        let (n, xd, h) = (r.gen_range(1..4), 3, 3);
        let mut inputs = slstm_tensors(xd, h, 0.7, &mut r);
        inputs.push(rand_t(&[n, xd], 1.0, &mut r));
        for _ in 0..8 {
            inputs.push(rand_t(&[n, h], 1.0, &mut r));
        }
        grad_check(
            |t, v| {
                let p = slstm_vars(&v[..10]);
                let nb = Neighbourhood {
                    h_left: v[11],
                    h_self: v[12],
                    h_right: v[13],
                    c_left: v[14],
                    c_self: v[15],
                    c_right: v[16],
                    g: v[17],
                    cg: v[18],
                };
                let (h, c) = lift(word_transition(t, &p, v[10], &nb))?;
                let both = t.concat_cols(&[h, c])?;
                weighted_sum(t, both, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap()
    })
}

pub fn global_transition_check(instances: u64) -> f64 {
    worst(instances, |seed| {
        let mut r = rng(300 + seed);
        let layout = Layout::new(random_lengths(&mut r, 3, 4)).unwrap();
        let h = 3;
        let mut inputs = slstm_tensors(2, h, 0.7, &mut r);
        let (n, s) = (layout.tokens(), layout.sentences());
        inputs.push(rand_t(&[n, h], 1.0, &mut r));
        inputs.push(rand_t(&[n, h], 1.0, &mut r));
        inputs.push(rand_t(&[s, h], 1.0, &mut r));
        inputs.push(rand_t(&[s, h], 1.0, &mut r));
        let sents: Vec<usize> = (0..s).filter(|_| r.gen_bool(0.7)).collect();
        let sents = if sents.is_empty() { vec![0] } else { sents };
        grad_check(
            |t, v| {
                let p = slstm_vars(&v[..10]);
                let state = LayerState {
                    h: v[10],
                    c: v[11],
                    g: v[12],
                    cg: v[13],
                };
                let (g, cg) = lift(global_transition(t, &p, &state, &layout, &sents))?;
                let both = t.concat_cols(&[g, cg])?;
                weighted_sum(t, both, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap()
    })
}

/// Two full layers, so gradients also pass through the neighbour gathers.
pub fn stacked_layers_check(instances: u64) -> f64 {
    worst(instances, |seed| {
        let mut r = rng(350 + seed);
        let layout = Layout::new(random_lengths(&mut r, 3, 4)).unwrap();
        let h = 3;
        let mut inputs = slstm_tensors(2, h, 0.7, &mut r);
        let (n, s) = (layout.tokens(), layout.sentences());
        inputs.push(rand_t(&[n, 2], 1.0, &mut r));
        inputs.push(rand_t(&[n, h], 1.0, &mut r));
        inputs.push(rand_t(&[n, h], 1.0, &mut r));
        inputs.push(rand_t(&[s, h], 1.0, &mut r));
        inputs.push(rand_t(&[s, h], 1.0, &mut r));
        grad_check(
            |t, v| {
                let p = slstm_vars(&v[..10]);
                let mut state = LayerState {
                    h: v[11],
                    c: v[12],
                    g: v[13],
                    cg: v[14],
                };
                let rows: Vec<usize> = (0..n).collect();
                let sents: Vec<usize> = (0..s).collect();
                for _ in 0..2 {
                    let nb = lift(neighbourhood(t, &state, &layout, &rows, true))?;
                    let (hn, cn) = lift(word_transition(t, &p, v[10], &nb))?;
                    let (g, cg) = lift(global_transition(t, &p, &state, &layout, &sents))?;
                    state = LayerState {
                        h: hn,
                        c: cn,
                        g,
                        cg,
                    };
                }
                let all = t.concat_rows(&[state.h, state.c])?;
                let a = weighted_sum(t, all, seed)?;
                let glob = t.concat_rows(&[state.g, state.cg])?;
                let b = weighted_sum(t, glob, seed + 1)?;
                t.add(a, b)
            },
            &inputs,
            EPS,
        )
        .unwrap()
    })
}

pub fn depth_classifier_check(instances: u64) -> f64 {
    worst(instances, |seed| {
        let mut r = rng(400 + seed);
        let (n, hd, dd, layers) = (r.gen_range(1..5), 4, 3, 5);
        let inputs = vec![
            rand_t(&[hd, dd], 1.0, &mut r),
            rand_t(&[dd], 0.5, &mut r),
            rand_t(&[dd, layers], 1.0, &mut r),
            rand_t(&[layers], 0.5, &mut r),
            rand_t(&[dd, hd], 1.0, &mut r),
            rand_t(&[n, hd], 1.0, &mut r),
        ];
        grad_check(
            |t, v| {
                let dv = DepthVars {
                    w1: v[0],
                    b1: v[1],
                    w2: v[2],
                    b2: v[3],
                    proj: v[4],
                };
                let (logits, inner) = lift(depth_logits(t, &dv, v[5]))?;
                let h0 = lift(init_h0(t, &dv, inner))?;
                let a = weighted_sum(t, logits, seed)?;
                let b = weighted_sum(t, h0, seed + 7)?;
                t.add(a, b)
            },
            &inputs,
            EPS,
        )
        .unwrap()
    })
}

pub fn depth_embedding_check(instances: u64) -> f64 {
    worst(instances, |seed| {
        let mut r = rng(450 + seed);
        let (n, dd, layers) = (r.gen_range(1..6), 3, 4);
        let sinusoid: Tensor<f64> = sinusoidal_table(layers, dd);
        let depths: Vec<usize> = (0..n).map(|_| r.gen_range(1..=layers)).collect();
        let inputs = vec![
            rand_t(&[n, 2], 1.0, &mut r),
            rand_t(&[dd, layers], 1.0, &mut r),
        ];
        grad_check(
            |t, v| {
                let y = lift(refine_tokens(t, v[0], v[1], &sinusoid, &depths))?;
                weighted_sum(t, y, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap()
    })
}

pub fn char_cnn_check(instances: u64) -> f64 {
    worst(instances, |seed| {
        let mut r = rng(500 + seed);
        let (cd, out) = (3, 4);
        let words: Vec<Vec<usize>> = (0..r.gen_range(1..4))
            .map(|_| (0..r.gen_range(1..6)).map(|_| r.gen_range(2..12)).collect())
            .collect();
        let inputs = vec![
            rand_t(&[CharVocab::SIZE, cd], 1.0, &mut r),
            rand_t(&[3 * cd, out], 1.0, &mut r),
            rand_t(&[out], 0.5, &mut r),
        ];
        grad_check(
            |t, v| {
                let words_table = t.constant(Tensor::zeros(&[2, 1]));
                let ev = EmbedVars {
                    words: words_table,
                    chars: v[0],
                    conv_w: v[1],
                    conv_b: v[2],
                };
                let y = lift(char_cnn(t, &ev, &words))?;
                weighted_sum(t, y, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap()
    })
}

pub fn head_and_loss_check(instances: u64) -> f64 {
    worst(instances, |seed| {
        let mut r = rng(600 + seed);
        let layout = Layout::new(random_lengths(&mut r, 4, 5)).unwrap();
        let (h, classes) = (3, 4);
        let gold: Vec<usize> = (0..layout.sentences())
            .map(|_| r.gen_range(0..classes))
            .collect();
        let smoothing = if seed % 2 == 0 { 0.0 } else { 0.1 };
        let inputs = vec![
            rand_t(&[layout.tokens(), h], 1.0, &mut r),
            rand_t(&[layout.sentences(), h], 1.0, &mut r),
            rand_t(&[3 * h, classes], 1.0, &mut r),
            rand_t(&[classes], 0.5, &mut r),
        ];
        grad_check(
            |t, v| {
                let pooled = lift(pool_head(t, v[0], v[1], &layout))?;
                let cv = ClassifierVars { w: v[2], b: v[3] };
                let logits = lift(class_logits(t, &cv, pooled))?;
                t.softmax_cross_entropy(logits, &gold, smoothing)
            },
            &inputs,
            EPS,
        )
        .unwrap()
    })
}

/// Whole model and loss on a three-word sentence with pinned depths.
pub fn whole_model_check(instances: u64) -> f64 {
    worst(instances, |seed| {
        let mut model = super::tiny_model::<f64>(super::tiny_config(3), seed);
        let batch = model.encode(&[vec!["a", "dog", "barked"]]).unwrap();
        let mut r = rng(seed);
        let depths: Vec<usize> = (0..3).map(|_| r.gen_range(1..=3)).collect();
        super::model_grad_check(&mut model, &batch, &[seed as usize % 3], &depths, 40, seed)
    })
}
