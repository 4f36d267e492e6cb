//! Hyperparameter records.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a word's executed depth is chosen from its depth distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Hard,
    Soft,
    Gumbel,
}

/// Source of word-order information. Exactly one is active per model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequentialModule {
    BiLstm,
    Sinusoidal,
    Learned,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

macro_rules! str_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

str_enum!(Selection { "hard" => Selection::Hard, "soft" => Selection::Soft, "gumbel" => Selection::Gumbel });
str_enum!(SequentialModule {
    "bilstm" => SequentialModule::BiLstm,
    "sinusoidal" => SequentialModule::Sinusoidal,
    "learned" => SequentialModule::Learned,
    "none" => SequentialModule::None,
});
str_enum!(Precision { "f32" => Precision::F32, "f64" => Precision::F64 });

/// Every model hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Maximum number of recurrent layers `L`.
    pub layers: usize,
    /// Word/global state size of the S-LSTM; the Bi-LSTM uses half per direction.
    pub hidden: usize,
    pub word_dim: usize,
    /// Character embedding size fed to the character CNN.
    pub char_dim: usize,
    /// Output size of the character CNN.
    pub char_out: usize,
    /// Inner size of the depth classifier, which is also the depth embedding size.
    pub depth_dim: usize,
    pub tau: f64,
    pub embed_dropout: f64,
    pub hidden_dropout: f64,
    pub selection: Selection,
    pub sequential: SequentialModule,
    /// When false every word runs all `layers` (the full-depth model).
    pub adaptive: bool,
    /// Size of the learned position table.
    pub max_positions: usize,
    /// Set when a pretrained word table was loaded; the table is then frozen.
    pub pretrained_words: bool,
    /// Stop gradients from the depth classifier into the sequential module.
    pub detach_depth_input: bool,
    pub label_smoothing: f64,
    /// Active-word fraction below which halted words are compacted out of
    /// the layer computation instead of masked.
    pub compaction_threshold: f64,
    /// Half-width of the uniform init of the depth classifier output layer
    /// (shared with the trainable depth embedding).
    pub depth_init_scale: f64,
    /// Parameter initialization scheme; only Glorot uniform is implemented.
    pub init: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 9,
            hidden: 400,
            word_dim: 300,
            char_dim: 16,
            char_out: 50,
            depth_dim: 50,
            tau: 0.001,
            embed_dropout: 0.3,
            hidden_dropout: 0.2,
            selection: Selection::Gumbel,
            sequential: SequentialModule::BiLstm,
            adaptive: true,
            max_positions: 512,
            pretrained_words: false,
            detach_depth_input: false,
            label_smoothing: 0.0,
            compaction_threshold: 0.5,
            depth_init_scale: 0.01,
            init: "xavier_uniform".into(),
        }
    }
}

impl ModelConfig {
    /// Size of a token after word and character embeddings.
    pub fn token_dim(&self) -> usize {
        self.word_dim + self.char_out
    }

    /// Size of a token after the depth embedding is appended.
    pub fn refined_dim(&self) -> usize {
        self.token_dim() + self.depth_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return fail(format!(
                "hidden {} must be a positive even number",
                self.hidden
            ));
        }
        if self.word_dim == 0 || self.char_dim == 0 || self.char_out == 0 || self.depth_dim == 0 {
            return fail("embedding sizes must be positive".into());
        }
        if self.tau <= 0.0 {
            return fail(format!("tau {} must be positive", self.tau));
        }
        for (name, r) in [
            ("embed_dropout", self.embed_dropout),
            ("hidden_dropout", self.hidden_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return fail(format!("{name} {r} outside [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        if self.init != "xavier_uniform" {
            return fail(format!("unsupported init `{}`", self.init));
        }
        Ok(())
    }
}

/// Optimization and data-handling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per epoch, applied continuously per step.
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs without dev improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    /// Share of training data held out as dev set when none is given.
    pub dev_fraction: f64,
    /// Evaluate on dev every this many epochs.
    pub eval_every: usize,
    pub cv_folds: usize,
    /// Stop once training accuracy reaches this value (1.0 never triggers early).
    pub target_train_accuracy: Option<f64>,
    /// Stop once the mean training loss of an epoch falls below this value.
    pub target_train_loss: Option<f64>,
    /// Wall-clock limit in seconds; checked after each epoch.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 100,
            seed: 1,
            learning_rate: 0.001,
            lr_decay: 0.97,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 5,
            dev_fraction: 0.1,
            eval_every: 1,
            cv_folds: 10,
            target_train_accuracy: None,
            target_train_loss: None,
            time_budget_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config(
                "learning_rate and clip_norm must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config(format!(
                "dev_fraction {} outside [0, 1)",
                self.dev_fraction
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self
            .time_budget_secs
            .is_some_and(|b| b.is_nan() || b <= 0.0)
        {
            return Err(Error::Config("time_budget_secs must be positive".into()));
        }
        Ok(())
    }
}
