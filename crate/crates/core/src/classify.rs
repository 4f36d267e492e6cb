//! Pooling head, prediction and loss.

use aslstm_tensor::{smoothed_target, softmax_in_place, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::batch::Layout;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    /// `[3 * hidden, classes]`
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub w: Var,
    pub b: Var,
}

impl ClassifierParams {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(
                "cls.w",
                Tensor::xavier_uniform(3 * hidden, classes, rng),
                true,
            ),
            b: store.add("cls.b", Tensor::zeros(&[classes]), true),
        }
    }

    pub fn vars<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> ClassifierVars {
        ClassifierVars {
            w: store.var(tape, self.w),
            b: store.var(tape, self.b),
        }
    }
}

/// `relu([max over words; mean over words; g])`, one row per sentence.
/// `h` holds word states `[tokens, hidden]`, `g` global states `[sentences, hidden]`.
pub fn pool_head<F: Scalar>(tape: &mut Tape<F>, h: Var, g: Var, layout: &Layout) -> Result<Var> {
    if tape.value(h).rows() != layout.tokens() || tape.value(g).rows() != layout.sentences() {
        return Err(Error::Argument(
            "pooling input does not match the batch layout".into(),
        ));
    }
    let max = tape.segment_max(h, layout.segments())?;
    let mean = tape.segment_mean(h, layout.segments())?;
    let v = tape.concat_cols(&[max, mean, g])?;
    Ok(tape.relu(v))
}

pub fn class_logits<F: Scalar>(tape: &mut Tape<F>, p: &ClassifierVars, v: Var) -> Result<Var> {
    Ok(tape.linear(v, p.w, p.b)?)
}

/// Softmax distribution and its argmax (smallest index on ties).
pub fn predict(logits: &[f64]) -> (Vec<f64>, usize) {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let mut best = 0;
    for (k, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = k;
        }
    }
    (p, best)
}

/// Argmax of every row of a logit matrix.
pub fn predict_rows<F: Scalar>(logits: &Tensor<F>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row: Vec<f64> = logits.row(r).iter().map(|x| x.as_f64()).collect();
            predict(&row).1
        })
        .collect()
}

/// Cross-entropy of one example from its logits, against a target that puts
/// `1 - eps` on `gold` plus `eps / classes` on every class. Log
/// probabilities are floored at `ln 1e-12`.
pub fn cross_entropy(logits: &[f64], gold: usize, eps: f64) -> Result<f64> {
    if gold >= logits.len() {
        return Err(Error::Argument(format!(
            "label {gold} outside {} classes",
            logits.len()
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Argument(format!("smoothing {eps} outside [0, 1)")));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    let mut t = vec![0.0; logits.len()];
    smoothed_target(&mut t, gold, eps);
    let floor = 1e-12_f64.ln();
    Ok(logits
        .iter()
        .zip(&t)
        .map(|(&l, &tc)| -tc * (l - lse).max(floor))
        .sum())
}
