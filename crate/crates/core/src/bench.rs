//! Speed measurement, depth histograms and the ablation suite.

use std::time::Instant;

use aslstm_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{run_experiment, RunConfig, RunReport};
use crate::model::{DepthOverride, Model};
use crate::slstm::TransitionCounts;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub samples_per_sec: f64,
    pub stddev: f64,
    pub repeats: usize,
    pub batch_size: usize,
    pub samples: usize,
    /// Work of one pass over the sentences.
    pub counts: TransitionCounts,
    pub tokens: u64,
    pub mean_depth: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Timed evaluation passes over `sentences` after `warmup` untimed passes.
pub fn benchmark_speed<F: Scalar, S: AsRef<str>, W: AsRef<[S]>>(
    model: &Model<F>,
    sentences: &[W],
    batch_size: usize,
    warmup: usize,
    repeats: usize,
    depths: Option<DepthOverride>,
) -> Result<SpeedReport> {
    if sentences.is_empty() || batch_size == 0 || repeats == 0 {
        return Err(Error::Argument(
            "benchmark needs sentences, a batch size and repeats".into(),
        ));
    }
    let batches = sentences
        .chunks(batch_size)
        .map(|c| model.encode(c))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = TransitionCounts::default();
    let mut tokens = 0;
    let pass = |counts: &mut TransitionCounts, tokens: &mut u64| -> Result<()> {
        for (k, b) in batches.iter().enumerate() {
            let p = model.predict_with(b, k as u64, depths.clone())?;
            counts.add(&p.counts);
            *tokens += b.layout.tokens() as u64;
        }
        Ok(())
    };
    for _ in 0..warmup {
        pass(&mut TransitionCounts::default(), &mut 0)?;
    }
    let mut rates = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let t = Instant::now();
        if r == 0 {
            pass(&mut counts, &mut tokens)?;
        } else {
            pass(&mut TransitionCounts::default(), &mut 0)?;
        }
        rates.push(sentences.len() as f64 / t.elapsed().as_secs_f64().max(1e-9));
    }
    let (mean, std) = mean_std(&rates);
    Ok(SpeedReport {
        samples_per_sec: mean,
        stddev: std,
        repeats,
        batch_size,
        samples: sentences.len(),
        counts,
        tokens,
        mean_depth: counts.word as f64 / tokens.max(1) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthRecord {
    pub token: String,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthHistogram {
    /// Per sentence, one record per word.
    pub sentences: Vec<Vec<DepthRecord>>,
    /// `counts[d - 1]` words executed depth `d`.
    pub counts: Vec<u64>,
}

impl DepthHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// One JSON object per word.
    pub fn json_lines(&self) -> String {
        let mut out = String::new();
        for r in self.sentences.iter().flatten() {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn bar_chart(&self, width: usize) -> String {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let total = self.total().max(1);
        let mut out = String::new();
        for (i, &c) in self.counts.iter().enumerate() {
            let bar = (c as f64 / max as f64 * width as f64).round() as usize;
            out.push_str(&format!(
                "depth {:>2} | {:<width$} {:>7} ({:>5.1}%)\n",
                i + 1,
                "#".repeat(bar),
                c,
                100.0 * c as f64 / total as f64,
            ));
        }
        out
    }
}

/// Executed depth of every word of `sentences` under the model's selection
/// strategy, in evaluation mode.
pub fn depth_histogram<F: Scalar, S: AsRef<str>, W: AsRef<[S]>>(
    model: &Model<F>,
    sentences: &[W],
    batch_size: usize,
    seed: u64,
) -> Result<DepthHistogram> {
    let mut hist = DepthHistogram {
        sentences: Vec::with_capacity(sentences.len()),
        counts: vec![0; model.config.layers],
    };
    for (k, chunk) in sentences.chunks(batch_size.max(1)).enumerate() {
        let batch = model.encode(chunk)?;
        let p = model.predict(&batch, seed.wrapping_add(k as u64))?;
        for (b, s) in chunk.iter().enumerate() {
            let recs = s
                .as_ref()
                .iter()
                .zip(batch.layout.span(b))
                .map(|(tok, r)| {
                    let depth = p.assignment.depths[r];
                    hist.counts[depth - 1] += 1;
                    DepthRecord {
                        token: tok.as_ref().to_string(),
                        depth,
                    }
                })
                .collect();
            hist.sentences.push(recs);
        }
    }
    Ok(hist)
}

/// A named set of config overrides applied on top of a base config.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<String>,
}

impl Variant {
    pub fn new(name: &str, overrides: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// The full model and its six ablations.
pub fn standard_variants() -> Vec<Variant> {
    vec![
        Variant::new("full model", &[]),
        Variant::new("w/o adaptive depth", &["adaptive=false"]),
        Variant::new("w/o Bi-LSTM", &["sequential=none"]),
        Variant::new("w/ sinusoidal positions", &["sequential=sinusoidal"]),
        Variant::new("w/ learned positions", &["sequential=learned"]),
        Variant::new("w/ hard selection", &["selection=hard"]),
        Variant::new("w/ soft selection", &["selection=soft"]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracies: Vec<f64>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    pub mean_depth: f64,
    /// Test-set word transitions per sentence, averaged over runs.
    pub word_transitions_per_sample: f64,
    pub reports: Vec<RunReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let w = self
            .rows
            .iter()
            .map(|r| r.variant.len())
            .max()
            .unwrap_or(7)
            .max(7);
        let mut out = format!(
            "{:<w$}  {:>16}  {:>18}  {:>10}  {:>12}\n",
            "variant", "accuracy", "samples/sec", "depth", "words/sample"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<w$}  {:>7.2} ± {:<6.2}  {:>8.1} ± {:<7.1}  {:>10.3}  {:>12.2}\n",
                r.variant,
                100.0 * r.accuracy_mean,
                100.0 * r.accuracy_std,
                r.speed_mean,
                r.speed_std,
                r.mean_depth,
                r.word_transitions_per_sample,
            ));
        }
        out
    }
}

/// Runs every variant once per seed and aggregates the test metrics.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Argument("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.apply_overrides(&v.overrides)?;
            cfg.train.seed = seed;
            cfg.data.report_path = None;
            cfg.data.checkpoint_path = None;
            reports.push(run_experiment(&cfg, |_| {})?);
        }
        let accs: Vec<f64> = reports
            .iter()
            .map(|r| r.test_accuracy.unwrap_or(f64::NAN))
            .collect();
        let speeds: Vec<f64> = reports
            .iter()
            .map(|r| r.samples_per_sec.unwrap_or(f64::NAN))
            .collect();
        let (am, asd) = mean_std(&accs);
        let (sm, ssd) = mean_std(&speeds);
        let depth = reports.iter().filter_map(|r| r.mean_depth).sum::<f64>() / reports.len() as f64;
        let per_sample = reports
            .iter()
            .filter_map(|r| Some(r.word_transitions? as f64 / r.test_samples? as f64))
            .sum::<f64>()
            / reports.len() as f64;
        rows.push(AblationRow {
            variant: v.name.clone(),
            accuracies: accs,
            accuracy_mean: am,
            accuracy_std: asd,
            speed_mean: sm,
            speed_std: ssd,
            mean_depth: depth,
            word_transitions_per_sample: per_sample,
            reports,
        });
    }
    Ok(AblationTable { rows })
}
