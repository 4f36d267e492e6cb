#![allow(dead_code)]

pub mod checks;
pub mod reference;

use aslstm::batch::Batch;
use aslstm::config::{ModelConfig, Selection};
use aslstm::embed::Vocab;
use aslstm::model::{DepthOverride, ForwardOptions, Model};
use aslstm::slstm::{SlstmVars, StackOptions};
use aslstm_tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t<F: Scalar>(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    Tensor::uniform(shape, -scale, scale, rng)
}

/// Tiny model dimensions for finite-difference work.
pub fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig {
        layers,
        hidden: 6,
        word_dim: 5,
        char_dim: 3,
        char_out: 4,
        depth_dim: 4,
        embed_dropout: 0.0,
        hidden_dropout: 0.0,
        selection: Selection::Hard,
        depth_init_scale: 0.5,
        ..Default::default()
    }
}

pub const CORPUS: [&str; 4] = [
    "the cat sat on the mat",
    "a dog barked",
    "what is the capital of France ?",
    "Who wrote it",
];

pub fn corpus() -> Vec<Vec<String>> {
    CORPUS.iter().map(|s| aslstm::data::tokenize(s)).collect()
}

pub fn tiny_model<F: Scalar>(cfg: ModelConfig, seed: u64) -> Model<F> {
    let vocab = Vocab::build(&corpus(), 1).unwrap();
    let labels = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    Model::new(cfg, vocab, labels, &mut rng(seed)).unwrap()
}

/// Places the S-LSTM parameters given as leaves `[w, u, v, b, gw, gu, gb, fw, fu, fb]`.
pub fn slstm_vars(v: &[Var]) -> SlstmVars {
    SlstmVars {
        w: v[0],
        u: v[1],
        v: v[2],
        b: v[3],
        gw: v[4],
        gu: v[5],
        gb: v[6],
        fw: v[7],
        fu: v[8],
        fb: v[9],
    }
}

/// Random S-LSTM parameter tensors in the order of [`slstm_vars`].
pub fn slstm_tensors(xd: usize, h: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![
        rand_t(&[3 * h, 7 * h], scale, rng),
        rand_t(&[xd, 7 * h], scale, rng),
        rand_t(&[h, 7 * h], scale, rng),
        rand_t(&[7 * h], scale, rng),
        rand_t(&[h, 2 * h], scale, rng),
        rand_t(&[h, 2 * h], scale, rng),
        rand_t(&[2 * h], scale, rng),
        rand_t(&[h, h], scale, rng),
        rand_t(&[h, h], scale, rng),
        rand_t(&[h], scale, rng),
    ]
}

/// `sum(y * w)` with fixed random weights, so every output coordinate
/// carries a distinct gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> aslstm_tensor::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w: Tensor<f64> = Tensor::uniform(&shape, -1.0, 1.0, &mut rng(seed));
    let p = tape.mul_const(y, std::sync::Arc::new(w))?;
    Ok(tape.sum(p))
}

/// Loss of the whole model on `batch` with depths pinned and dropout off.
pub fn model_loss(model: &Model<f64>, batch: &Batch, gold: &[usize], depths: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        training: false,
        depths: Some(DepthOverride::PerToken(depths.to_vec())),
        stack: StackOptions::default(),
    };
    let fwd = model.forward(&mut tape, batch, &opts, &mut rng(0)).unwrap();
    let loss = model.loss(&mut tape, &fwd, gold).unwrap();
    tape.value(loss).data()[0]
}

/// Largest relative error between backpropagated and central-difference
/// gradients over `samples` random coordinates of every trainable parameter
/// (all coordinates when a tensor is smaller).
pub fn model_grad_check(
    model: &mut Model<f64>,
    batch: &Batch,
    gold: &[usize],
    depths: &[usize],
    samples: usize,
    seed: u64,
) -> f64 {
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        training: false,
        depths: Some(DepthOverride::PerToken(depths.to_vec())),
        stack: StackOptions::default(),
    };
    let fwd = model.forward(&mut tape, batch, &opts, &mut rng(0)).unwrap();
    let loss = model.loss(&mut tape, &fwd, gold).unwrap();
    tape.backward(loss).unwrap();
    model.store.zero_grads();
    model.store.accumulate_grads(&tape);
    let grads: Vec<Option<Tensor<f64>>> = model.store.iter().map(|p| p.grad.clone()).collect();
    let ids: Vec<(String, usize, bool)> = model
        .store
        .iter()
        .map(|p| (p.name.clone(), p.value.len(), p.trainable))
        .collect();
    let mut r = rng(seed);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (k, (name, len, trainable)) in ids.into_iter().enumerate() {
        if !trainable {
            continue;
        }
        let id = model.store.id(&name).unwrap();
        let coords: Vec<usize> = if len <= samples {
            (0..len).collect()
        } else {
            (0..samples).map(|_| r.gen_range(0..len)).collect()
        };
        for j in coords {
            let orig = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = orig + eps;
            let up = model_loss(model, batch, gold, depths);
            model.store.get_mut(id).data_mut()[j] = orig - eps;
            let down = model_loss(model, batch, gold, depths);
            model.store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grads[k].as_ref().map_or(0.0, |g| g.data()[j]);
            let denom = a
                .abs()
                .max(numeric.abs())
                .max(aslstm_tensor::RELATIVE_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
