//! Experiment configuration files and the train/evaluate runner.
//!
//! A config file is UTF-8 text with one `key = value` per line; `#` starts
//! a comment. Keys are the field names of [`ModelConfig`], [`TrainConfig`]
//! and [`DataConfig`], plus `precision`. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aslstm_tensor::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::checkpoint;
use crate::config::{ModelConfig, Precision, TrainConfig};
use crate::data::{dev_split, ingest, memorization_task, trigger_task, Dataset, Format};
use crate::embed::load_pretrained;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::{build_model, cross_validate, evaluate, fit, CvReport, EpochMetrics, Examples};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// `tsv`, `csv`, `jsonl` or `trec`; inferred from the extension when unset.
    pub format: Option<String>,
    /// Built-in task instead of files: `trigger` or `memorize`.
    pub synthetic: Option<String>,
    pub synthetic_size: usize,
    /// Held-out share used as test set when no test file is given.
    pub test_fraction: f64,
    /// Run k-fold cross-validation (`cv_folds`) instead of a single split.
    pub cross_validate: bool,
    pub min_freq: usize,
    pub pretrained_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            dev_path: None,
            test_path: None,
            format: None,
            synthetic: None,
            synthetic_size: 1000,
            test_fraction: 0.1,
            cross_validate: false,
            min_freq: 1,
            pretrained_path: None,
            report_path: None,
            checkpoint_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn to_map<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config records serialize to objects"),
    }
}

// Interprets `raw` with the JSON type of the field's current value.
fn typed(current: &Value, raw: &str) -> Option<Value> {
    let raw = raw.trim();
    let number = || {
        raw.parse::<u64>()
            .map(Value::from)
            .or_else(|_| raw.parse::<i64>().map(Value::from))
            .ok()
            .or_else(|| {
                raw.parse::<f64>()
                    .ok()
                    .and_then(|f| serde_json::Number::from_f64(f).map(Value::Number))
            })
    };
    match current {
        Value::Number(_) => number(),
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Null => Some(if raw == "none" || raw.is_empty() {
            Value::Null
        } else if let Some(n) = number() {
            n
        } else {
            Value::String(raw.to_string())
        }),
        _ => None,
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if key == "precision" {
            self.precision = value.trim().parse()?;
            return Ok(());
        }
        let bad = |why: &str| Error::Config(format!("{key} = {value}: {why}"));
        macro_rules! try_section {
            ($field:expr, $ty:ty) => {{
                let mut map = to_map(&$field);
                if let Some(cur) = map.get(key) {
                    // `none` clears optional fields even when they hold a value
                    let optional = to_map(&<$ty>::default()).get(key) == Some(&Value::Null);
                    let v = if optional && value.trim() == "none" {
                        Value::Null
                    } else {
                        typed(cur, value).ok_or_else(|| bad("wrong value type"))?
                    };
                    map.insert(key.to_string(), v);
                    $field = serde_json::from_value::<$ty>(Value::Object(map))
                        .map_err(|e| bad(&e.to_string()))?;
                    return Ok(());
                }
            }};
        }
        try_section!(self.model, ModelConfig);
        try_section!(self.train, TrainConfig);
        try_section!(self.data, DataConfig);
        Err(Error::Config(format!("unknown key `{key}`")))
    }

    /// Parses config text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`", i + 1))
            })?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Applies `key=value` overrides such as command-line `--set` flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    // relative data paths are taken relative to the config file
    fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [
            &mut d.train_path,
            &mut d.dev_path,
            &mut d.test_path,
            &mut d.pretrained_path,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Flat `key = value` rendering that [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = format!("precision = {}\n", self.precision);
        for map in [to_map(&self.model), to_map(&self.train), to_map(&self.data)] {
            for (k, v) in map {
                let v = match v {
                    Value::Null => "none".to_string(),
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        match (&d.synthetic, &d.train_path) {
            (None, None) => {
                return Err(Error::Config(
                    "no dataset: set train_path or synthetic".into(),
                ))
            }
            (Some(s), _) if s != "trigger" && s != "memorize" => {
                return Err(Error::Config(format!("unknown synthetic task `{s}`")))
            }
            _ => {}
        }
        if let Some(f) = &d.format {
            f.parse::<Format>()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction {} outside [0, 1)",
                d.test_fraction
            )));
        }
        Ok(())
    }
}

/// Train, optional dev and test sets after applying the config's split rules.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Option<Dataset>,
    pub test: Option<Dataset>,
}

fn read(path: &Path, format: &Option<String>) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Data(format!("{}: no such file", path.display())));
    }
    let f = match format {
        Some(f) => f.parse()?,
        None => Format::from_path(path)?,
    };
    ingest(path, f)
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let seed = cfg.train.seed;
    let (train, test) = match (&d.synthetic, &d.train_path) {
        (Some(kind), _) => {
            let n = d.synthetic_size;
            let all = if kind == "trigger" {
                trigger_task(n, seed)
            } else {
                memorization_task(n, 4, seed)
            };
            (all, None)
        }
        (None, Some(p)) => (
            read(p, &d.format)?,
            d.test_path
                .as_ref()
                .map(|t| read(t, &d.format))
                .transpose()?,
        ),
        (None, None) => return Err(Error::Config("no dataset configured".into())),
    };
    let dev = d
        .dev_path
        .as_ref()
        .map(|p| read(p, &d.format))
        .transpose()?;
    if d.cross_validate {
        return Ok(Splits { train, dev, test });
    }
    let (train, test) = match test {
        Some(t) => (train, Some(t)),
        None if d.test_fraction > 0.0 => {
            let (tr, te) = dev_split(train.len(), d.test_fraction, seed.wrapping_add(17));
            (train.subset(&tr), Some(train.subset(&te)))
        }
        None => (train, None),
    };
    Ok(Splits { train, dev, test })
}

/// Everything needed to reproduce and judge one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub epochs: Vec<EpochMetrics>,
    pub best_dev_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub cv: Option<CvReport>,
    /// Evaluation throughput on the test set.
    pub samples_per_sec: Option<f64>,
    pub mean_depth: Option<f64>,
    pub word_transitions: Option<u64>,
    pub global_transitions: Option<u64>,
    pub test_tokens: Option<u64>,
    pub test_samples: Option<usize>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let mut s = String::new();
        s.push_str(&format!("{:<22}{}\n", "seed", self.config.train.seed));
        s.push_str(&format!("{:<22}{}\n", "epochs run", self.epochs.len()));
        s.push_str(&format!(
            "{:<22}{}\n",
            "best dev accuracy",
            fmt(self.best_dev_accuracy, 4)
        ));
        s.push_str(&format!(
            "{:<22}{}\n",
            "test accuracy",
            fmt(self.test_accuracy, 4)
        ));
        if let Some(cv) = &self.cv {
            s.push_str(&format!(
                "{:<22}{:.4} over {} folds\n",
                "cv accuracy",
                cv.mean,
                cv.folds.len()
            ));
        }
        s.push_str(&format!(
            "{:<22}{}\n",
            "mean executed depth",
            fmt(self.mean_depth, 3)
        ));
        s.push_str(&format!(
            "{:<22}{}\n",
            "samples/sec (eval)",
            fmt(self.samples_per_sec, 1)
        ));
        s.push_str(&format!(
            "{:<22}{:.1}\n",
            "wall clock (s)", self.wall_clock_secs
        ));
        s
    }
}

/// Trains per `cfg`, evaluates on the test split, and writes the report
/// and checkpoint when paths are configured.
pub fn run_experiment(cfg: &RunConfig, log: impl FnMut(&EpochMetrics)) -> Result<RunReport> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, log).map(|(r, _)| r),
        Precision::F64 => run_typed::<f64>(cfg, log).map(|(r, _)| r),
    }
}

/// As [`run_experiment`], also returning the trained model.
pub fn run_typed<F: Scalar>(
    cfg: &RunConfig,
    log: impl FnMut(&EpochMetrics),
) -> Result<(RunReport, Option<Model<F>>)> {
    cfg.validate()?;
    let start = Instant::now();
    let splits = load_splits(cfg)?;
    let labels = splits.train.labels.clone();
    let mut report = RunReport {
        config: cfg.clone(),
        epochs: Vec::new(),
        best_dev_accuracy: None,
        test_accuracy: None,
        cv: None,
        samples_per_sec: None,
        mean_depth: None,
        word_transitions: None,
        global_transitions: None,
        test_tokens: None,
        test_samples: None,
        wall_clock_secs: 0.0,
    };
    if cfg.data.cross_validate {
        report.cv = Some(cross_validate::<F>(
            &splits.train,
            cfg.train.cv_folds,
            &cfg.model,
            &cfg.train,
        )?);
        report.wall_clock_secs = start.elapsed().as_secs_f64();
        write_report(cfg, &report)?;
        return Ok((report, None));
    }

    let all = Examples::from_dataset(&splits.train, &labels)?;
    let (train, dev) = match &splits.dev {
        Some(d) => (all, Some(Examples::from_dataset(d, &labels)?)),
        None if cfg.train.dev_fraction > 0.0 && all.len() > 1 => {
            let (tr, dv) = dev_split(all.len(), cfg.train.dev_fraction, cfg.train.seed);
            (all.subset(&tr), Some(all.subset(&dv)))
        }
        None => (all, None),
    };
    let mut model = build_model::<F>(
        &cfg.model,
        &train,
        labels.clone(),
        cfg.data.min_freq,
        cfg.train.seed,
    )?;
    if let Some(p) = &cfg.data.pretrained_path {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let table = load_pretrained(p, &model.vocab, cfg.model.word_dim, &mut rng)?;
        model.set_word_table(table)?;
    }
    let fit_report = fit(&mut model, &train, dev.as_ref(), &cfg.train, log)?;
    report.epochs = fit_report.epochs;
    report.best_dev_accuracy = fit_report.best_dev_accuracy;

    if let Some(test) = &splits.test {
        let test = Examples::from_dataset(test, &labels)?;
        let t0 = Instant::now();
        let m = evaluate(&model, &test, cfg.train.batch_size, cfg.train.seed)?;
        let secs = t0.elapsed().as_secs_f64();
        report.test_accuracy = Some(m.accuracy);
        report.samples_per_sec = Some(test.len() as f64 / secs.max(1e-9));
        report.mean_depth = Some(m.mean_depth);
        report.word_transitions = Some(m.word_transitions);
        report.global_transitions = Some(m.global_transitions);
        report.test_tokens = Some(m.tokens);
        report.test_samples = Some(test.len());
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(p) = &cfg.data.checkpoint_path {
        checkpoint::save(&model, p)?;
    }
    write_report(cfg, &report)?;
    Ok((report, Some(model)))
}

fn write_report(cfg: &RunConfig, report: &RunReport) -> Result<()> {
    if let Some(p) = &cfg.data.report_path {
        let json = serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(p, json + "\n").map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_from_every_section() {
        let cfg = RunConfig::parse(
            "# comment\nlayers = 3\nhidden=64 # trailing\nselection = hard\nseed = 7\n\
             learning_rate = 0.01\nsynthetic = trigger\ntarget_train_accuracy = 0.99\nprecision = f64\n",
            "t",
        )
        .unwrap();
        assert_eq!((cfg.model.layers, cfg.model.hidden), (3, 64));
        assert_eq!(cfg.model.selection, crate::config::Selection::Hard);
        assert_eq!((cfg.train.seed, cfg.train.learning_rate), (7, 0.01));
        assert_eq!(cfg.train.target_train_accuracy, Some(0.99));
        assert_eq!(cfg.data.synthetic.as_deref(), Some("trigger"));
        assert_eq!(cfg.precision, Precision::F64);
    }

    #[test]
    fn unknown_key_is_fatal_with_line() {
        let e = RunConfig::parse("layers = 3\nlayres = 4\n", "cfg").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("cfg:2") && m.contains("layres")));
        assert_eq!(e.exit_code(), 1);
        assert!(RunConfig::parse("layers = three\n", "cfg").is_err());
        assert!(RunConfig::parse("just text\n", "cfg").is_err());
    }

    #[test]
    fn text_rendering_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["tau=0.5", "train_path=/x/y.tsv", "patience=2"])
            .unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text(), "r").unwrap(), cfg);
    }

    #[test]
    fn missing_dataset_is_config_error() {
        let cfg = RunConfig::default();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(matches!(
            run_experiment(&cfg, |_| {}),
            Err(Error::Config(_))
        ));
    }
}
