//! Word-order information: a one-layer Bi-LSTM, or position embeddings
//! for the ablation variants.

use aslstm_tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::batch::Layout;
use crate::config::SequentialModule;
use crate::embed::sinusoidal;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// One LSTM direction. Gate blocks of the `4 * hidden` columns are
/// ordered input, forget, output, candidate.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

impl LstmParams {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            wx: store.add(
                format!("{prefix}.wx"),
                Tensor::xavier_uniform(input, 4 * hidden, rng),
                true,
            ),
            wh: store.add(
                format!("{prefix}.wh"),
                Tensor::xavier_uniform(hidden, 4 * hidden, rng),
                true,
            ),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[4 * hidden]), true),
        }
    }

    pub fn vars<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> LstmVars {
        LstmVars {
            wx: store.var(tape, self.wx),
            wh: store.var(tape, self.wh),
            b: store.var(tape, self.b),
        }
    }
}

/// One LSTM step for a batch of rows: `c = f*c_prev + i*u`, `h = o*tanh(c)`.
pub fn lstm_cell<F: Scalar>(
    tape: &mut Tape<F>,
    p: &LstmVars,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let xw = tape.linear(x, p.wx, p.b)?;
    lstm_step(tape, p, xw, h_prev, c_prev)
}

// `xw` already holds `x * wx + b`
fn lstm_step<F: Scalar>(
    tape: &mut Tape<F>,
    p: &LstmVars,
    xw: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let hidden = tape.value(h_prev).cols();
    let hw = tape.matmul(h_prev, p.wh)?;
    let pre = tape.add(xw, hw)?;
    let gates_pre = tape.slice_cols(pre, 0, 3 * hidden)?;
    let gates = tape.sigmoid(gates_pre);
    let cand_pre = tape.slice_cols(pre, 3 * hidden, hidden)?;
    let cand = tape.tanh(cand_pre);
    let i = tape.slice_cols(gates, 0, hidden)?;
    let f = tape.slice_cols(gates, hidden, hidden)?;
    let o = tape.slice_cols(gates, 2 * hidden, hidden)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Runs one direction over every sentence of the batch, returning the
/// hidden state of each token row.
fn lstm_direction<F: Scalar>(
    tape: &mut Tape<F>,
    p: &LstmVars,
    x: Var,
    layout: &Layout,
    reverse: bool,
) -> Result<Var> {
    let hidden = tape.value(p.wh).rows();
    let xw = tape.linear(x, p.wx, p.b)?;
    let b = layout.sentences();
    let mut h_state = tape.constant(Tensor::zeros(&[b, hidden]));
    let mut c_state = tape.constant(Tensor::zeros(&[b, hidden]));
    let mut outputs = Vec::new();
    let mut order = Vec::with_capacity(layout.tokens());
    for t in 0..layout.max_len() {
        let active: Vec<usize> = (0..b).filter(|&s| layout.lengths()[s] > t).collect();
        let rows: Vec<usize> = active
            .iter()
            .map(|&s| {
                let n = layout.lengths()[s];
                layout.row(s, if reverse { n - 1 - t } else { t })
            })
            .collect();
        let xg = tape.gather_rows(xw, rows.iter().map(|&r| Some(r)).collect())?;
        let hp = tape.gather_rows(h_state, active.iter().map(|&s| Some(s)).collect())?;
        let cp = tape.gather_rows(c_state, active.iter().map(|&s| Some(s)).collect())?;
        let (h, c) = lstm_step(tape, p, xg, hp, cp)?;
        h_state = tape.scatter_rows(h_state, active.clone(), h)?;
        c_state = tape.scatter_rows(c_state, active, c)?;
        outputs.push(h);
        order.extend(rows);
    }
    let stacked = tape.concat_rows(&outputs)?;
    let mut inverse = vec![None; layout.tokens()];
    for (k, r) in order.into_iter().enumerate() {
        inverse[r] = Some(k);
    }
    Ok(tape.gather_rows(stacked, inverse)?)
}

/// `[forward state; backward state]` per token, each direction reading
/// only the true tokens of its sentence.
pub fn bilstm<F: Scalar>(
    tape: &mut Tape<F>,
    fwd: &LstmVars,
    bwd: &LstmVars,
    x: Var,
    layout: &Layout,
) -> Result<Var> {
    let f = lstm_direction(tape, fwd, x, layout, false)?;
    let b = lstm_direction(tape, bwd, x, layout, true)?;
    Ok(tape.concat_cols(&[f, b])?)
}

/// Position vectors for the given in-sentence positions. The learned
/// variant indexes `table`; the sinusoidal variant is fixed.
pub fn position_embedding<F: Scalar>(
    tape: &mut Tape<F>,
    variant: SequentialModule,
    table: Option<Var>,
    positions: &[usize],
    dim: usize,
) -> Result<Var> {
    match (variant, table) {
        (SequentialModule::Sinusoidal, _) => {
            let mut data = Vec::with_capacity(positions.len() * dim);
            for &i in positions {
                data.extend(sinusoidal(i, dim).into_iter().map(F::from_f64_lossy));
            }
            Ok(tape.constant(Tensor::new(vec![positions.len(), dim], data)?))
        }
        (SequentialModule::Learned, Some(table)) => {
            let rows = tape.value(table).rows();
            if let Some(&i) = positions.iter().find(|&&i| i >= rows) {
                return Err(Error::Argument(format!(
                    "position {i} beyond learned table of {rows}"
                )));
            }
            Ok(tape.gather_rows(table, positions.iter().map(|&i| Some(i)).collect())?)
        }
        (v, _) => Err(Error::Argument(format!(
            "no position embedding for variant {v}"
        ))),
    }
}

/// Parameters of whichever sequential module the config selects.
#[derive(Clone, Debug)]
pub struct SeqParams {
    pub variant: SequentialModule,
    pub fwd: Option<LstmParams>,
    pub bwd: Option<LstmParams>,
    pub positions: Option<ParamId>,
    /// Maps (token + position) vectors to the classifier width when the
    /// Bi-LSTM is off.
    pub proj: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Copy, Debug)]
pub struct SeqVars {
    pub fwd: Option<LstmVars>,
    pub bwd: Option<LstmVars>,
    pub positions: Option<Var>,
    pub proj: Option<(Var, Var)>,
}

impl SeqParams {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        variant: SequentialModule,
        token_dim: usize,
        hidden: usize,
        max_positions: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = SeqParams {
            variant,
            fwd: None,
            bwd: None,
            positions: None,
            proj: None,
        };
        match variant {
            SequentialModule::BiLstm => {
                p.fwd = Some(LstmParams::new(
                    store,
                    "seq.fwd",
                    token_dim,
                    hidden / 2,
                    rng,
                ));
                p.bwd = Some(LstmParams::new(
                    store,
                    "seq.bwd",
                    token_dim,
                    hidden / 2,
                    rng,
                ));
            }
            other => {
                if other == SequentialModule::Learned {
                    p.positions = Some(store.add(
                        "seq.positions",
                        Tensor::xavier_uniform(max_positions, token_dim, rng),
                        true,
                    ));
                }
                p.proj = Some((
                    store.add(
                        "seq.proj_w",
                        Tensor::xavier_uniform(token_dim, hidden, rng),
                        true,
                    ),
                    store.add("seq.proj_b", Tensor::zeros(&[hidden]), true),
                ));
            }
        }
        p
    }

    pub fn vars<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> SeqVars {
        SeqVars {
            fwd: self.fwd.as_ref().map(|p| p.vars(tape, store)),
            bwd: self.bwd.as_ref().map(|p| p.vars(tape, store)),
            positions: self.positions.map(|id| store.var(tape, id)),
            proj: self
                .proj
                .map(|(w, b)| (store.var(tape, w), store.var(tape, b))),
        }
    }
}

/// Returns `(tokens for the S-LSTM, features for the depth classifier)`.
pub fn sequential<F: Scalar>(
    tape: &mut Tape<F>,
    variant: SequentialModule,
    v: &SeqVars,
    tokens: Var,
    layout: &Layout,
) -> Result<(Var, Var)> {
    if let (Some(f), Some(b)) = (&v.fwd, &v.bwd) {
        let h = bilstm(tape, f, b, tokens, layout)?;
        return Ok((tokens, h));
    }
    let with_pos = match variant {
        SequentialModule::Sinusoidal | SequentialModule::Learned => {
            let dim = tape.value(tokens).cols();
            let positions: Vec<usize> = layout.lengths().iter().flat_map(|&n| 0..n).collect();
            let pe = position_embedding(tape, variant, v.positions, &positions, dim)?;
            tape.add(tokens, pe)?
        }
        _ => tokens,
    };
    let (w, b) = v
        .proj
        .ok_or_else(|| Error::Argument("sequential projection missing".into()))?;
    let h = tape.linear(with_pos, w, b)?;
    Ok((with_pos, h))
}

/// Lays per-token rows out as `[sentences, max_len, cols]` with zero rows
/// at padding positions.
pub fn to_padded<F: Scalar>(rows: &Tensor<F>, layout: &Layout) -> Tensor<F> {
    let cols = rows.cols();
    let max_len = layout.max_len();
    let mut out = Tensor::zeros(&[layout.sentences(), max_len, cols]);
    for s in 0..layout.sentences() {
        for (i, r) in layout.span(s).enumerate() {
            let o = (s * max_len + i) * cols;
            out.data_mut()[o..o + cols].copy_from_slice(rows.row(r));
        }
    }
    out
}
