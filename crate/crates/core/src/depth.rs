//! Per-word depth prediction and the depth-conditioned initial state.
//!
//! A two-layer classifier maps each word's sequential feature to `L`
//! logits. Its output matrix `w2: [depth_dim, L]` doubles as the trainable
//! depth embedding table (column `d - 1` embeds depth `d`), so the
//! classifier learns through the refined tokens and through `h0`; the
//! discrete selection itself passes no gradient.

use aslstm_tensor::{softmax_in_place, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::Layout;
use crate::config::Selection;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct DepthParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Inner vector to initial word hidden state: `[depth_dim, hidden]`.
    pub proj: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct DepthVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub proj: Var,
}

impl DepthParams {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        input: usize,
        depth_dim: usize,
        layers: usize,
        hidden: usize,
        out_scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: store.add(
                "depth.w1",
                Tensor::xavier_uniform(input, depth_dim, rng),
                true,
            ),
            b1: store.add("depth.b1", Tensor::zeros(&[depth_dim]), true),
            w2: store.add(
                "depth.w2",
                Tensor::uniform(&[depth_dim, layers], -out_scale, out_scale, rng),
                true,
            ),
            b2: store.add("depth.b2", Tensor::zeros(&[layers]), true),
            proj: store.add(
                "depth.proj",
                Tensor::xavier_uniform(depth_dim, hidden, rng),
                true,
            ),
        }
    }

    pub fn vars<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> DepthVars {
        DepthVars {
            w1: store.var(tape, self.w1),
            b1: store.var(tape, self.b1),
            w2: store.var(tape, self.w2),
            b2: store.var(tape, self.b2),
            proj: store.var(tape, self.proj),
        }
    }
}

/// `(logits, inner)` with `inner = relu(h w1 + b1)` and `logits = inner w2 + b2`.
pub fn depth_logits<F: Scalar>(tape: &mut Tape<F>, v: &DepthVars, h: Var) -> Result<(Var, Var)> {
    let pre = tape.linear(h, v.w1, v.b1)?;
    let inner = tape.relu(pre);
    let logits = tape.linear(inner, v.w2, v.b2)?;
    Ok((logits, inner))
}

pub fn depth_probs<F: Scalar>(tape: &mut Tape<F>, logits: Var) -> Var {
    tape.softmax_rows(logits)
}

/// Initial word hidden states `inner * proj`; no bias.
pub fn init_h0<F: Scalar>(tape: &mut Tape<F>, v: &DepthVars, inner: Var) -> Result<Var> {
    Ok(tape.matmul(inner, v.proj)?)
}

/// 1-based argmax; ties go to the smallest depth.
pub fn select_hard(p: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = j;
        }
    }
    best + 1
}

/// `floor(sum_j j * p_j)` over depths `1..=L`, clamped into `[1, L]`.
pub fn select_soft(p: &[f64]) -> usize {
    let e: f64 = p.iter().enumerate().map(|(j, &x)| (j + 1) as f64 * x).sum();
    // guard against 2.9999999 from rounding on a point mass
    let d = (e + 1e-9).floor() as usize;
    d.clamp(1, p.len())
}

fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Softmax of the Gumbel-perturbed, temperature-scaled logits.
pub fn gumbel_perturbed_probs<R: Rng + ?Sized>(
    logits: &[f64],
    tau: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut z: Vec<f64> = logits
        .iter()
        .map(|&l| (l + gumbel_noise(rng)) / tau)
        .collect();
    softmax_in_place(&mut z);
    Ok(z)
}

/// Gumbel-Max sample, 1-based.
pub fn select_gumbel<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R) -> Result<usize> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let z: Vec<f64> = logits
        .iter()
        .map(|&l| (l + gumbel_noise(rng)) / tau)
        .collect();
    Ok(select_hard(&z))
}

/// Executed depths of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthAssignment {
    /// One depth in `1..=L` per token row.
    pub depths: Vec<usize>,
    /// Per-sentence maximum depth.
    pub d_max: Vec<usize>,
    /// Depth distribution of every token row (empty when depths were forced).
    pub probs: Vec<Vec<f64>>,
}

impl DepthAssignment {
    pub fn from_depths(depths: Vec<usize>, layout: &Layout, layers: usize) -> Result<Self> {
        if depths.len() != layout.tokens() {
            return Err(Error::Argument(format!(
                "{} depths for {} tokens",
                depths.len(),
                layout.tokens()
            )));
        }
        if let Some(&d) = depths.iter().find(|&&d| d == 0 || d > layers) {
            return Err(Error::Argument(format!("depth {d} outside 1..={layers}")));
        }
        let d_max = layout
            .segments()
            .into_iter()
            .map(|s| depths[s].iter().copied().max().unwrap_or(0))
            .collect();
        Ok(Self {
            depths,
            d_max,
            probs: Vec::new(),
        })
    }

    pub fn uniform(layout: &Layout, depth: usize, layers: usize) -> Result<Self> {
        Self::from_depths(vec![depth; layout.tokens()], layout, layers)
    }

    /// Depths as `[sentences, max_len]` with 0 at padding positions.
    pub fn padded(&self, layout: &Layout) -> Vec<Vec<usize>> {
        (0..layout.sentences())
            .map(|b| {
                let mut row = vec![0; layout.max_len()];
                for (i, r) in layout.span(b).enumerate() {
                    row[i] = self.depths[r];
                }
                row
            })
            .collect()
    }

    pub fn word_transitions(&self) -> u64 {
        self.depths.iter().map(|&d| d as u64).sum()
    }

    pub fn global_transitions(&self) -> u64 {
        self.d_max.iter().map(|&d| d as u64).sum()
    }

    pub fn mean_depth(&self) -> f64 {
        self.word_transitions() as f64 / self.depths.len().max(1) as f64
    }
}

/// Selects a depth for every token row from its logits.
pub fn compute_assignment<F: Scalar, R: Rng + ?Sized>(
    logits: &Tensor<F>,
    layout: &Layout,
    strategy: Selection,
    tau: f64,
    rng: &mut R,
) -> Result<DepthAssignment> {
    if logits.rows() != layout.tokens() {
        return Err(Error::Argument(format!(
            "{} logit rows for {} tokens",
            logits.rows(),
            layout.tokens()
        )));
    }
    let layers = logits.cols();
    let mut depths = Vec::with_capacity(layout.tokens());
    let mut probs = Vec::with_capacity(layout.tokens());
    for r in 0..logits.rows() {
        let l: Vec<f64> = logits.row(r).iter().map(|x| x.as_f64()).collect();
        let mut p = l.clone();
        softmax_in_place(&mut p);
        depths.push(match strategy {
            Selection::Hard => select_hard(&p),
            Selection::Soft => select_soft(&p),
            Selection::Gumbel => select_gumbel(&l, tau, rng)?,
        });
        probs.push(p);
    }
    let mut a = DepthAssignment::from_depths(depths, layout, layers)?;
    a.probs = probs;
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hard_selection() {
        assert_eq!(select_hard(&[0.1, 0.7, 0.2]), 2);
        assert_eq!(select_hard(&[1.0 / 9.0; 9]), 1);
        let mut one_hot = vec![0.0; 9];
        one_hot[8] = 1.0;
        assert_eq!(select_hard(&one_hot), 9);
    }

    #[test]
    fn soft_selection() {
        assert_eq!(select_soft(&[0.0, 0.0, 1.0, 0.0]), 3);
        assert_eq!(select_soft(&[1.0 / 9.0; 9]), 5);
        assert_eq!(select_soft(&[0.5, 0.5]), 1);
        assert_eq!(select_soft(&[1.0, 0.0, 0.0]), 1);
    }

    #[test]
    fn gumbel_rejects_bad_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            select_gumbel(&[0.0, 1.0], 0.0, &mut rng),
            Err(Error::Argument(_))
        ));
        assert!(select_gumbel(&[0.0, 1.0], -1.0, &mut rng).is_err());
    }

    #[test]
    fn gumbel_prefers_dominant_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = vec![0.0; 9];
        l[4] = 50.0;
        let hits = (0..10_000)
            .filter(|_| select_gumbel(&l, 0.001, &mut rng).unwrap() == 5)
            .count();
        assert!(hits as f64 / 10_000.0 > 0.999);
    }

    #[test]
    fn assignment_padding_and_max() {
        let layout = Layout::new(vec![2, 3]).unwrap();
        let a = DepthAssignment::from_depths(vec![1, 3, 2, 2, 1], &layout, 4).unwrap();
        assert_eq!(a.d_max, vec![3, 2]);
        assert_eq!(a.padded(&layout), vec![vec![1, 3, 0], vec![2, 2, 1]]);
        assert_eq!(a.word_transitions(), 9);
        assert!(DepthAssignment::from_depths(vec![0, 1, 1, 1, 1], &layout, 4).is_err());
        assert!(DepthAssignment::from_depths(vec![5, 1, 1, 1, 1], &layout, 4).is_err());
    }

    #[test]
    fn seeded_gumbel_assignment_reproduces() {
        let layout = Layout::new(vec![4, 2]).unwrap();
        let mut r0 = ChaCha8Rng::seed_from_u64(5);
        let logits: Tensor<f64> = Tensor::uniform(&[6, 9], -1.0, 1.0, &mut r0);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            compute_assignment(&logits, &layout, Selection::Gumbel, 0.001, &mut rng).unwrap()
        };
        assert_eq!(run(9), run(9));
    }
}
