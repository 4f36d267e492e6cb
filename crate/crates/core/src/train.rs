//! Optimization: Adam with global-norm clipping and exponential
//! learning-rate decay, epoch loop, early stopping and cross-validation.

use std::time::Instant;

use aslstm_tensor::{Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::predict_rows;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{dev_split, kfold, Dataset};
use crate::embed::Vocab;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::params::ParamStore;
use crate::slstm::TransitionCounts;

/// Tokenized sentences with label ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Examples {
    pub sentences: Vec<Vec<String>>,
    pub labels: Vec<usize>,
}

impl Examples {
    pub fn from_dataset(ds: &Dataset, labels: &[String]) -> Result<Self> {
        Ok(Self {
            sentences: ds.token_lists(),
            labels: ds.label_ids(labels)?,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            sentences: idx.iter().map(|&i| self.sentences[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grads<F: Scalar>(grads: &mut [&mut Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.norm_sq().as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// Clips the accumulated gradients of a parameter store.
pub fn clip_global_norm<F: Scalar>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let mut grads: Vec<&mut Tensor<F>> = store.iter_mut().filter_map(|p| p.grad.as_mut()).collect();
    clip_grads(&mut grads, max_norm)
}

pub fn grad_norm<F: Scalar>(store: &ParamStore<F>) -> f64 {
    store
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .map(|g| g.norm_sq().as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Bias-corrected Adam. The learning rate at step `t` is
/// `lr * decay^(t / steps_per_epoch)`.
#[derive(Clone, Debug)]
pub struct Adam<F: Scalar> {
    m: Vec<Option<Tensor<F>>>,
    v: Vec<Option<Tensor<F>>>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub steps_per_epoch: usize,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: &TrainConfig, params: usize, steps_per_epoch: usize) -> Self {
        Self {
            m: vec![None; params],
            v: vec![None; params],
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            decay: cfg.lr_decay,
            steps_per_epoch: steps_per_epoch.max(1),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning rate used by the next update.
    pub fn learning_rate(&self) -> f64 {
        self.lr
            * self
                .decay
                .powf(self.step as f64 / self.steps_per_epoch as f64)
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore<F>) {
        let lr = self.learning_rate();
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (k, p) in store.iter_mut().enumerate() {
            let Some(g) = p.grad.as_ref() else { continue };
            if !p.trainable {
                continue;
            }
            let m = self.m[k].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[k].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let value = std::sync::Arc::make_mut(&mut p.value);
            for (((x, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi.as_f64();
                let mn = b1 * mi.as_f64() + (1.0 - b1) * gi;
                let vn = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
                *mi = F::from_f64_lossy(mn);
                *vi = F::from_f64_lossy(vn);
                let upd = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *x = F::from_f64_lossy(x.as_f64() - upd);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub mean_depth: f64,
    pub dev_accuracy: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub mean_depth: f64,
    pub predictions: Vec<usize>,
    pub word_transitions: u64,
    pub word_rows_computed: u64,
    pub global_transitions: u64,
    pub tokens: u64,
}

fn param_norms<F: Scalar>(store: &ParamStore<F>) -> String {
    store
        .iter()
        .map(|p| format!("{}={:.3e}", p.name, p.value.norm_sq().as_f64().sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One pass over `data` in a seeded shuffled order with dropout active.
/// A non-finite loss aborts with the batch index and parameter norms.
pub fn train_epoch<F: Scalar, R: Rng + ?Sized>(
    model: &mut Model<F>,
    data: &Examples,
    cfg: &TrainConfig,
    opt: &mut Adam<F>,
    rng: &mut R,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let opts = ForwardOptions::train(model.config.compaction_threshold);
    let (mut loss_sum, mut correct, mut tokens, mut depth_sum) = (0.0, 0usize, 0u64, 0u64);
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let sents: Vec<&Vec<String>> = chunk.iter().map(|&i| &data.sentences[i]).collect();
        let gold: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let batch = model.encode(&sents)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, &opts, rng)?;
        let loss = model.loss(&mut tape, &fwd, &gold)?;
        let lv = tape.value(loss).data()[0].as_f64();
        if !lv.is_finite() {
            return Err(Error::Numerical {
                batch: bi,
                message: format!("loss {lv}; parameter norms: {}", param_norms(&model.store)),
            });
        }
        let preds = predict_rows(tape.value(fwd.logits));
        tape.backward(loss)?;
        model.store.zero_grads();
        model.store.accumulate_grads(&tape);
        drop(tape);
        clip_global_norm(&mut model.store, cfg.clip_norm);
        opt.update(&mut model.store);

        loss_sum += lv * chunk.len() as f64;
        correct += preds.iter().zip(&gold).filter(|(p, g)| p == g).count();
        tokens += fwd.assignment.depths.len() as u64;
        depth_sum += fwd.assignment.word_transitions();
    }
    Ok(EpochMetrics {
        epoch: 0,
        loss: loss_sum / data.len() as f64,
        train_accuracy: correct as f64 / data.len() as f64,
        mean_depth: depth_sum as f64 / tokens.max(1) as f64,
        dev_accuracy: None,
        learning_rate: opt.learning_rate(),
    })
}

/// Evaluation in fixed order. Batch `k` draws any Gumbel noise from a
/// generator seeded with `seed + k`.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    data: &Examples,
    batch_size: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Data("no evaluation examples".into()));
    }
    let mut m = EvalMetrics::default();
    let mut counts = TransitionCounts::default();
    for (k, chunk) in data.sentences.chunks(batch_size.max(1)).enumerate() {
        let batch = model.encode(chunk)?;
        let p = model.predict(&batch, seed.wrapping_add(k as u64))?;
        m.predictions.extend(p.labels);
        counts.add(&p.counts);
        m.tokens += p.assignment.depths.len() as u64;
    }
    let correct = m
        .predictions
        .iter()
        .zip(&data.labels)
        .filter(|(p, g)| p == g)
        .count();
    m.accuracy = correct as f64 / data.len() as f64;
    m.word_transitions = counts.word;
    m.word_rows_computed = counts.word_rows_computed;
    m.global_transitions = counts.global;
    m.mean_depth = counts.word as f64 / m.tokens.max(1) as f64;
    Ok(m)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_dev_accuracy: Option<f64>,
    pub stopped_early: bool,
}

/// Trains for up to `cfg.epochs` epochs. With a dev set, the parameters of
/// the best dev epoch are restored at the end and training stops after
/// `cfg.patience` epochs without improvement.
pub fn fit<F: Scalar>(
    model: &mut Model<F>,
    train: &Examples,
    dev: Option<&Examples>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<FitReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = train.len().div_ceil(cfg.batch_size);
    let mut opt = Adam::new(cfg, model.store.len(), steps);
    let mut report = FitReport::default();
    let mut best: Option<(f64, Vec<Tensor<F>>)> = None;
    let mut since_best = 0;
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let mut m = train_epoch(model, train, cfg, &mut opt, &mut rng)?;
        m.epoch = epoch;
        if let Some(dev) = dev.filter(|d| !d.is_empty() && epoch % cfg.eval_every == 0) {
            let acc = evaluate(model, dev, cfg.batch_size, cfg.seed)?.accuracy;
            m.dev_accuracy = Some(acc);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.store.snapshot()));
                report.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
            }
        } else if dev.is_none() {
            report.best_epoch = epoch;
        }
        on_epoch(&m);
        let done_acc = cfg
            .target_train_accuracy
            .is_some_and(|t| m.train_accuracy >= t);
        let done_loss = cfg.target_train_loss.is_some_and(|t| m.loss < t);
        report.epochs.push(m);
        if done_acc || done_loss {
            report.stopped_early = true;
            break;
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            report.stopped_early = true;
            break;
        }
        if cfg
            .time_budget_secs
            .is_some_and(|b| start.elapsed().as_secs_f64() >= b)
        {
            report.stopped_early = true;
            break;
        }
    }
    if let Some((acc, snap)) = best {
        model.store.restore(snap);
        report.best_dev_accuracy = Some(acc);
    }
    Ok(report)
}

/// Vocabulary over the training sentences and a freshly initialized model.
pub fn build_model<F: Scalar>(
    cfg: &ModelConfig,
    train: &Examples,
    labels: Vec<String>,
    min_freq: usize,
    seed: u64,
) -> Result<Model<F>> {
    let vocab = Vocab::build(&train.sentences, min_freq)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Model::new(cfg.clone(), vocab, labels, &mut rng)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<f64>,
    pub mean: f64,
}

/// `k`-fold cross-validation. Each fold trains a fresh model on the other
/// folds, with a dev split carved from them for early stopping.
pub fn cross_validate<F: Scalar>(
    ds: &Dataset,
    k: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<CvReport> {
    let folds = kfold(ds.len(), k, cfg.seed)?;
    let all = Examples::from_dataset(ds, &ds.labels)?;
    let mut report = CvReport::default();
    for (f, test_idx) in folds.iter().enumerate() {
        let rest: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect();
        let (tr, dv) = dev_split(
            rest.len(),
            cfg.dev_fraction,
            cfg.seed.wrapping_add(f as u64),
        );
        let train = all.subset(&tr.iter().map(|&i| rest[i]).collect::<Vec<_>>());
        let dev = all.subset(&dv.iter().map(|&i| rest[i]).collect::<Vec<_>>());
        let test = all.subset(test_idx);
        let mut model = build_model::<F>(
            model_cfg,
            &train,
            ds.labels.clone(),
            1,
            cfg.seed.wrapping_add(f as u64),
        )?;
        fit(
            &mut model,
            &train,
            (!dev.is_empty()).then_some(&dev),
            cfg,
            |_| {},
        )?;
        report
            .folds
            .push(evaluate(&model, &test, cfg.batch_size, cfg.seed)?.accuracy);
    }
    report.mean = report.folds.iter().sum::<f64>() / report.folds.len() as f64;
    Ok(report)
}
