//! Sentence-State LSTM transitions.
//!
//! Every word node reads its left, own and right hidden states from the
//! previous layer plus the previous global state; the global node reads
//! the average of all word states. One parameter set serves every layer.
//!
//! Word-level pre-activations occupy seven column blocks of width
//! `hidden`, ordered input, left, right, forget, sentence, output,
//! candidate. The first five (after the sigmoid) are normalized jointly.

use std::ops::Range;

use aslstm_tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::Layout;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const WORD_GATES: usize = 7;
const NORMALIZED_GATES: usize = 5;

#[derive(Clone, Debug)]
pub struct SlstmParams {
    /// Window `[h_left; h_self; h_right]` to gates: `[3h, 7h]`.
    pub w: ParamId,
    /// Token to gates: `[token_dim, 7h]`.
    pub u: ParamId,
    /// Previous global state to gates: `[h, 7h]`.
    pub v: ParamId,
    pub b: ParamId,
    /// Global state to the global forget and output gates: `[h, 2h]`.
    pub gw: ParamId,
    /// Averaged word state to the global forget and output gates: `[h, 2h]`.
    pub gu: ParamId,
    pub gb: ParamId,
    /// Global state to the per-word forget gates of the global cell: `[h, h]`.
    pub fw: ParamId,
    /// Word state to the per-word forget gates of the global cell: `[h, h]`.
    pub fu: ParamId,
    pub fb: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SlstmVars {
    pub w: Var,
    pub u: Var,
    pub v: Var,
    pub b: Var,
    pub gw: Var,
    pub gu: Var,
    pub gb: Var,
    pub fw: Var,
    pub fu: Var,
    pub fb: Var,
}

impl SlstmParams {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        token_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let h = hidden;
        let g = WORD_GATES * h;
        Self {
            w: store.add("slstm.w", Tensor::xavier_uniform(3 * h, g, rng), true),
            u: store.add("slstm.u", Tensor::xavier_uniform(token_dim, g, rng), true),
            v: store.add("slstm.v", Tensor::xavier_uniform(h, g, rng), true),
            b: store.add("slstm.b", Tensor::zeros(&[g]), true),
            gw: store.add("slstm.gw", Tensor::xavier_uniform(h, 2 * h, rng), true),
            gu: store.add("slstm.gu", Tensor::xavier_uniform(h, 2 * h, rng), true),
            gb: store.add("slstm.gb", Tensor::zeros(&[2 * h]), true),
            fw: store.add("slstm.fw", Tensor::xavier_uniform(h, h, rng), true),
            fu: store.add("slstm.fu", Tensor::xavier_uniform(h, h, rng), true),
            fb: store.add("slstm.fb", Tensor::zeros(&[h]), true),
        }
    }

    pub fn vars<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> SlstmVars {
        SlstmVars {
            w: store.var(tape, self.w),
            u: store.var(tape, self.u),
            v: store.var(tape, self.v),
            b: store.var(tape, self.b),
            gw: store.var(tape, self.gw),
            gu: store.var(tape, self.gu),
            gb: store.var(tape, self.gb),
            fw: store.var(tape, self.fw),
            fu: store.var(tape, self.fu),
            fb: store.var(tape, self.fb),
        }
    }

    pub fn ids(&self) -> [ParamId; 10] {
        [
            self.w, self.u, self.v, self.b, self.gw, self.gu, self.gb, self.fw, self.fu, self.fb,
        ]
    }
}

/// Hidden and cell states of all word nodes (`[tokens, h]`) and global
/// nodes (`[sentences, h]`) at one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerState {
    pub h: Var,
    pub c: Var,
    pub g: Var,
    pub cg: Var,
}

/// Previous-layer inputs of a set of word nodes, one row per node.
#[derive(Clone, Copy, Debug)]
pub struct Neighbourhood {
    pub h_left: Var,
    pub h_self: Var,
    pub h_right: Var,
    pub c_left: Var,
    pub c_self: Var,
    pub c_right: Var,
    pub g: Var,
    pub cg: Var,
}

/// Materialized state of one sentence: word rows `0` and `n + 1` are the
/// zero padding nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SlstmState<F: Scalar> {
    pub h: Tensor<F>,
    pub c: Tensor<F>,
    pub g: Tensor<F>,
    pub cg: Tensor<F>,
    pub layer: usize,
}

impl LayerState {
    pub fn zeros<F: Scalar>(tape: &mut Tape<F>, layout: &Layout, hidden: usize) -> Self {
        let words = Tensor::zeros(&[layout.tokens(), hidden]);
        let sents = Tensor::zeros(&[layout.sentences(), hidden]);
        LayerState {
            h: tape.constant(words.clone()),
            c: tape.constant(words),
            g: tape.constant(sents.clone()),
            cg: tape.constant(sents),
        }
    }

    pub fn sentence<F: Scalar>(
        &self,
        tape: &Tape<F>,
        layout: &Layout,
        sentence: usize,
        layer: usize,
    ) -> SlstmState<F> {
        let pad = |v: Var| {
            let t = tape.value(v);
            let cols = t.cols();
            let mut out = Tensor::zeros(&[layout.lengths()[sentence] + 2, cols]);
            for (i, r) in layout.span(sentence).enumerate() {
                out.row_mut(i + 1).copy_from_slice(t.row(r));
            }
            out
        };
        let row = |v: Var| Tensor::vector(tape.value(v).row(sentence));
        SlstmState {
            h: pad(self.h),
            c: pad(self.c),
            g: row(self.g),
            cg: row(self.cg),
            layer,
        }
    }
}

/// Precomputes `x * U + b` for every token; tokens are constant across layers.
pub fn project_tokens<F: Scalar>(tape: &mut Tape<F>, p: &SlstmVars, x: Var) -> Result<Var> {
    Ok(tape.linear(x, p.u, p.b)?)
}

/// Word-level transition for a batch of nodes with raw token inputs `x`.
pub fn word_transition<F: Scalar>(
    tape: &mut Tape<F>,
    p: &SlstmVars,
    x: Var,
    n: &Neighbourhood,
) -> Result<(Var, Var)> {
    let xu = project_tokens(tape, p, x)?;
    word_transition_projected(tape, p, xu, n)
}

/// Gate activations of a word transition.
#[derive(Clone, Copy, Debug)]
pub struct WordGates {
    /// Normalized `[i, l, r, f, s]` blocks, `[rows, 5h]`; each coordinate
    /// sums to one across the five blocks.
    pub mixing: Var,
    pub o: Var,
    pub u: Var,
}

pub fn word_gates<F: Scalar>(
    tape: &mut Tape<F>,
    p: &SlstmVars,
    xu: Var,
    n: &Neighbourhood,
) -> Result<WordGates> {
    let h = tape.value(n.h_self).cols();
    let window = tape.concat_cols(&[n.h_left, n.h_self, n.h_right])?;
    let from_window = tape.matmul(window, p.w)?;
    let from_global = tape.matmul(n.g, p.v)?;
    let pre = tape.add(from_window, from_global)?;
    let pre = tape.add(pre, xu)?;

    let sig_pre = tape.slice_cols(pre, 0, 6 * h)?;
    let sig = tape.sigmoid(sig_pre);
    let mixing = tape.slice_cols(sig, 0, NORMALIZED_GATES * h)?;
    let mixing = tape.block_softmax(mixing, NORMALIZED_GATES)?;
    let o = tape.slice_cols(sig, NORMALIZED_GATES * h, h)?;
    let u_pre = tape.slice_cols(pre, 6 * h, h)?;
    let u = tape.tanh(u_pre);
    Ok(WordGates { mixing, o, u })
}

/// Word-level transition given already projected tokens `x * U + b`.
pub fn word_transition_projected<F: Scalar>(
    tape: &mut Tape<F>,
    p: &SlstmVars,
    xu: Var,
    n: &Neighbourhood,
) -> Result<(Var, Var)> {
    let h = tape.value(n.h_self).cols();
    if tape.value(p.w).rows() != 3 * h || tape.value(xu).cols() != WORD_GATES * h {
        return Err(Error::Tensor(aslstm_tensor::TensorError::Dimension {
            op: "word_transition",
            lhs: tape.value(n.h_self).shape().to_vec(),
            rhs: tape.value(p.w).shape().to_vec(),
        }));
    }
    let WordGates { mixing, o, u } = word_gates(tape, p, xu, n)?;

    let gate = |tape: &mut Tape<F>, k: usize| tape.slice_cols(mixing, k * h, h);
    let (gi, gl, gr, gf, gs) = (
        gate(tape, 0)?,
        gate(tape, 1)?,
        gate(tape, 2)?,
        gate(tape, 3)?,
        gate(tape, 4)?,
    );
    let terms = [
        tape.mul(gl, n.c_left)?,
        tape.mul(gf, n.c_self)?,
        tape.mul(gr, n.c_right)?,
        tape.mul(gs, n.cg)?,
        tape.mul(gi, u)?,
    ];
    let mut c = terms[0];
    for t in &terms[1..] {
        c = tape.add(c, *t)?;
    }
    let tc = tape.tanh(c);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c))
}

/// Gathers the previous-layer neighbourhood of the given token rows.
pub fn neighbourhood<F: Scalar>(
    tape: &mut Tape<F>,
    state: &LayerState,
    layout: &Layout,
    rows: &[usize],
    global_coupling: bool,
) -> Result<Neighbourhood> {
    let left = layout.left();
    let right = layout.right();
    let sent = layout.sentence_of();
    let l: Vec<Option<usize>> = rows.iter().map(|&r| left[r]).collect();
    let s: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
    let rt: Vec<Option<usize>> = rows.iter().map(|&r| right[r]).collect();
    let gs: Vec<Option<usize>> = rows
        .iter()
        .map(|&r| global_coupling.then_some(sent[r]))
        .collect();
    Ok(Neighbourhood {
        h_left: tape.gather_rows(state.h, l.clone())?,
        h_self: tape.gather_rows(state.h, s.clone())?,
        h_right: tape.gather_rows(state.h, rt.clone())?,
        c_left: tape.gather_rows(state.c, l)?,
        c_self: tape.gather_rows(state.c, s)?,
        c_right: tape.gather_rows(state.c, rt)?,
        g: tape.gather_rows(state.g, gs.clone())?,
        cg: tape.gather_rows(state.cg, gs)?,
    })
}

/// Gate activations of a sentence-level transition.
#[derive(Clone, Debug)]
pub struct GlobalGates {
    /// Normalized word forget gates, one row per word of the listed
    /// sentences in order.
    pub words: Var,
    /// Normalized global forget gate, one row per sentence.
    pub global: Var,
    pub o: Var,
    /// Word spans inside `words`.
    pub segments: Vec<Range<usize>>,
    cells: Var,
    global_cells: Var,
}

/// Each sentence's forget gates over {its words, the global node} are
/// normalized jointly; words of other sentences never enter the softmax.
pub fn global_gates<F: Scalar>(
    tape: &mut Tape<F>,
    p: &SlstmVars,
    state: &LayerState,
    layout: &Layout,
    sentences: &[usize],
) -> Result<GlobalGates> {
    if sentences.is_empty() {
        return Err(Error::Argument(
            "global transition over no sentences".into(),
        ));
    }
    let h = tape.value(state.g).cols();
    let mut tok_rows = Vec::new();
    let mut segs = Vec::with_capacity(sentences.len());
    let mut local_sent = Vec::new();
    for (k, &b) in sentences.iter().enumerate() {
        let start = tok_rows.len();
        tok_rows.extend(layout.span(b));
        local_sent.extend(std::iter::repeat_n(Some(k), layout.lengths()[b]));
        segs.push(start..tok_rows.len());
    }
    let n_tok = tok_rows.len();
    let tok_idx: Vec<Option<usize>> = tok_rows.iter().map(|&r| Some(r)).collect();
    let sent_idx: Vec<Option<usize>> = sentences.iter().map(|&b| Some(b)).collect();

    let hs = tape.gather_rows(state.h, tok_idx.clone())?;
    let cs = tape.gather_rows(state.c, tok_idx)?;
    let gs = tape.gather_rows(state.g, sent_idx.clone())?;
    let cgs = tape.gather_rows(state.cg, sent_idx)?;
    let hbar = tape.segment_mean(hs, segs.clone())?;

    let a = tape.matmul(gs, p.gw)?;
    let bb = tape.matmul(hbar, p.gu)?;
    let pre = tape.add(a, bb)?;
    let pre = tape.add_bias(pre, p.gb)?;
    let go = tape.sigmoid(pre);
    let fg_hat = tape.slice_cols(go, 0, h)?;
    let o = tape.slice_cols(go, h, h)?;

    let g_tok = tape.gather_rows(gs, local_sent)?;
    let a = tape.matmul(g_tok, p.fw)?;
    let bb = tape.matmul(hs, p.fu)?;
    let pre = tape.add(a, bb)?;
    let pre = tape.add_bias(pre, p.fb)?;
    let fi_hat = tape.sigmoid(pre);

    // joint rows: tokens of sentence k, then its global row
    let joint = tape.concat_rows(&[fi_hat, fg_hat])?;
    let mut order = Vec::with_capacity(n_tok + sentences.len());
    let mut joint_segs = Vec::with_capacity(sentences.len());
    let mut tok_pos = Vec::with_capacity(n_tok);
    let mut glob_pos = Vec::with_capacity(sentences.len());
    for (k, seg) in segs.iter().enumerate() {
        let start = order.len();
        for r in seg.clone() {
            tok_pos.push(Some(order.len()));
            order.push(Some(r));
        }
        glob_pos.push(Some(order.len()));
        order.push(Some(n_tok + k));
        joint_segs.push(start..order.len());
    }
    let ordered = tape.gather_rows(joint, order)?;
    let normed = tape.segment_softmax(ordered, joint_segs)?;
    Ok(GlobalGates {
        words: tape.gather_rows(normed, tok_pos)?,
        global: tape.gather_rows(normed, glob_pos)?,
        o,
        segments: segs,
        cells: cs,
        global_cells: cgs,
    })
}

/// Sentence-level transition for the listed sentences. Returns their new
/// global hidden and cell rows, in `sentences` order.
pub fn global_transition<F: Scalar>(
    tape: &mut Tape<F>,
    p: &SlstmVars,
    state: &LayerState,
    layout: &Layout,
    sentences: &[usize],
) -> Result<(Var, Var)> {
    let gates = global_gates(tape, p, state, layout, sentences)?;
    let keep = tape.mul(gates.global, gates.global_cells)?;
    let from_words = tape.mul(gates.words, gates.cells)?;
    let from_words = tape.segment_sum(from_words, gates.segments)?;
    let cg = tape.add(keep, from_words)?;
    let tcg = tape.tanh(cg);
    let g = tape.mul(gates.o, tcg)?;
    Ok((g, cg))
}

/// Work performed by a stack, for hardware-independent cost accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    /// Word transitions whose result was kept (sum of executed depths).
    pub word: u64,
    /// Word rows pushed through the gate matrices, including masked ones.
    pub word_rows_computed: u64,
    /// Global-node transitions (sum of per-sentence maximum depths).
    pub global: u64,
    /// Layers executed for the batch.
    pub layers: u64,
}

impl TransitionCounts {
    pub fn add(&mut self, other: &TransitionCounts) {
        self.word += other.word;
        self.word_rows_computed += other.word_rows_computed;
        self.global += other.global;
        self.layers += other.layers;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StackOptions {
    /// When false, word nodes read zero global state (test hook for
    /// receptive-field checks).
    pub global_coupling: bool,
    /// Active-word fraction below which halted words are dropped from the
    /// gate computation rather than computed and discarded.
    pub compaction_threshold: f64,
}

impl Default for StackOptions {
    fn default() -> Self {
        Self {
            global_coupling: true,
            compaction_threshold: 0.5,
        }
    }
}

fn initial_state<F: Scalar>(
    tape: &mut Tape<F>,
    layout: &Layout,
    hidden: usize,
    h0: Option<Var>,
) -> Result<LayerState> {
    let mut s = LayerState::zeros(tape, layout, hidden);
    if let Some(h0) = h0 {
        let v = tape.value(h0);
        if v.rows() != layout.tokens() || v.cols() != hidden {
            return Err(Error::Argument(format!(
                "initial states {:?} for {} tokens of width {hidden}",
                v.shape(),
                layout.tokens()
            )));
        }
        s.h = h0;
    }
    Ok(s)
}

/// Conventional S-LSTM: `layers` synchronized steps at every position.
/// Returns the state after each layer, index 0 being the initial state
/// (zeros, or `h0` for the word hidden states).
#[allow(clippy::too_many_arguments)]
pub fn full_stack<F: Scalar>(
    tape: &mut Tape<F>,
    p: &SlstmVars,
    xu: Var,
    layout: &Layout,
    layers: usize,
    h0: Option<Var>,
    opts: StackOptions,
    counts: &mut TransitionCounts,
) -> Result<Vec<LayerState>> {
    if layers == 0 {
        return Err(Error::Argument("a stack needs at least one layer".into()));
    }
    let hidden = tape.value(p.v).rows();
    let mut states = vec![initial_state(tape, layout, hidden, h0)?];
    let all_rows: Vec<usize> = (0..layout.tokens()).collect();
    let all_sents: Vec<usize> = (0..layout.sentences()).collect();
    for _ in 0..layers {
        let prev = *states.last().unwrap();
        let nb = neighbourhood(tape, &prev, layout, &all_rows, opts.global_coupling)?;
        let (h, c) = word_transition_projected(tape, p, xu, &nb)?;
        let (g, cg) = global_transition(tape, p, &prev, layout, &all_sents)?;
        counts.word += all_rows.len() as u64;
        counts.word_rows_computed += all_rows.len() as u64;
        counts.global += all_sents.len() as u64;
        counts.layers += 1;
        states.push(LayerState { h, c, g, cg });
    }
    Ok(states)
}

/// Depth-adaptive S-LSTM. Token row `r` executes word transitions at
/// layers `1..=depths[r]` and then copies its state unchanged; sentence
/// `b`'s global node runs `d_max[b]` transitions. The loop runs to the
/// largest depth in the batch; index 0 of the result is the initial state.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_stack<F: Scalar>(
    tape: &mut Tape<F>,
    p: &SlstmVars,
    xu: Var,
    layout: &Layout,
    depths: &[usize],
    h0: Option<Var>,
    opts: StackOptions,
    counts: &mut TransitionCounts,
) -> Result<Vec<LayerState>> {
    if depths.len() != layout.tokens() {
        return Err(Error::Argument(format!(
            "{} depths for {} tokens",
            depths.len(),
            layout.tokens()
        )));
    }
    if depths.contains(&0) {
        return Err(Error::Argument(
            "every word executes at least one layer".into(),
        ));
    }
    let d_max: Vec<usize> = layout
        .segments()
        .into_iter()
        .map(|s| depths[s].iter().copied().max().unwrap_or(0))
        .collect();
    let top = d_max.iter().copied().max().unwrap_or(0);
    let hidden = tape.value(p.v).rows();
    let n = layout.tokens();
    let mut states = vec![initial_state(tape, layout, hidden, h0)?];
    let all_rows: Vec<usize> = (0..n).collect();
    for l in 1..=top {
        let prev = *states.last().unwrap();
        let active: Vec<usize> = (0..n).filter(|&r| depths[r] >= l).collect();
        let sents: Vec<usize> = (0..layout.sentences()).filter(|&b| d_max[b] >= l).collect();

        let (h, c) = if active.len() == n {
            let nb = neighbourhood(tape, &prev, layout, &all_rows, opts.global_coupling)?;
            counts.word_rows_computed += n as u64;
            word_transition_projected(tape, p, xu, &nb)?
        } else if (active.len() as f64) < opts.compaction_threshold * n as f64 {
            let nb = neighbourhood(tape, &prev, layout, &active, opts.global_coupling)?;
            let xa = tape.gather_rows(xu, active.iter().map(|&r| Some(r)).collect())?;
            counts.word_rows_computed += active.len() as u64;
            let (ha, ca) = word_transition_projected(tape, p, xa, &nb)?;
            (
                tape.scatter_rows(prev.h, active.clone(), ha)?,
                tape.scatter_rows(prev.c, active.clone(), ca)?,
            )
        } else {
            let nb = neighbourhood(tape, &prev, layout, &all_rows, opts.global_coupling)?;
            counts.word_rows_computed += n as u64;
            let (hall, call) = word_transition_projected(tape, p, xu, &nb)?;
            let pick: Vec<Option<usize>> = active.iter().map(|&r| Some(r)).collect();
            let ha = tape.gather_rows(hall, pick.clone())?;
            let ca = tape.gather_rows(call, pick)?;
            (
                tape.scatter_rows(prev.h, active.clone(), ha)?,
                tape.scatter_rows(prev.c, active.clone(), ca)?,
            )
        };
        counts.word += active.len() as u64;

        let (g, cg) = if sents.len() == layout.sentences() {
            global_transition(tape, p, &prev, layout, &sents)?
        } else {
            let (gs, cgs) = global_transition(tape, p, &prev, layout, &sents)?;
            (
                tape.scatter_rows(prev.g, sents.clone(), gs)?,
                tape.scatter_rows(prev.cg, sents.clone(), cgs)?,
            )
        };
        counts.global += sents.len() as u64;
        counts.layers += 1;
        states.push(LayerState { h, c, g, cg });
    }
    Ok(states)
}
