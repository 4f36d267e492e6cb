//! The complete classifier: embeddings, sequential module, depth
//! classifier, S-LSTM stack and pooling head.

use aslstm_tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::Batch;
use crate::classify::{class_logits, pool_head, predict_rows, ClassifierParams};
use crate::config::ModelConfig;
use crate::depth::{compute_assignment, depth_logits, init_h0, DepthAssignment, DepthParams};
use crate::embed::{assemble_tokens, refine_tokens, sinusoidal_table, EmbedParams, Vocab};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::seq::{sequential, SeqParams};
use crate::slstm::{
    adaptive_stack, full_stack, project_tokens, LayerState, SlstmParams, StackOptions,
    TransitionCounts,
};

/// Forces executed depths instead of predicting them.
#[derive(Clone, Debug, PartialEq)]
pub enum DepthOverride {
    Uniform(usize),
    PerToken(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub training: bool,
    pub depths: Option<DepthOverride>,
    pub stack: StackOptions,
}

impl ForwardOptions {
    pub fn train(compaction_threshold: f64) -> Self {
        Self {
            training: true,
            depths: None,
            stack: StackOptions {
                global_coupling: true,
                compaction_threshold,
            },
        }
    }

    pub fn eval(compaction_threshold: f64) -> Self {
        Self {
            training: false,
            ..Self::train(compaction_threshold)
        }
    }
}

pub struct Forward {
    /// `[sentences, classes]`
    pub logits: Var,
    pub assignment: DepthAssignment,
    pub counts: TransitionCounts,
    /// State after each executed layer; index 0 is the initial state.
    pub states: Vec<LayerState>,
    /// Depth classifier logits `[tokens, L]` (absent for the full-depth model).
    pub depth_logits: Option<Var>,
}

/// Output of an evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<F: Scalar> {
    pub labels: Vec<usize>,
    pub logits: Tensor<F>,
    pub assignment: DepthAssignment,
    pub counts: TransitionCounts,
}

pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub labels: Vec<String>,
    pub store: ParamStore<F>,
    pub embed: EmbedParams,
    pub seq: SeqParams,
    pub depth: DepthParams,
    pub slstm: SlstmParams,
    pub cls: ClassifierParams,
    sinusoid: Tensor<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        vocab: Vocab,
        labels: Vec<String>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if labels.len() < 2 {
            return Err(Error::Data(format!(
                "need at least two labels, found {}",
                labels.len()
            )));
        }
        let c = &config;
        let mut store = ParamStore::new();
        let embed = EmbedParams::new(
            &mut store,
            vocab.len(),
            c.word_dim,
            c.char_dim,
            c.char_out,
            rng,
        );
        let seq = SeqParams::new(
            &mut store,
            c.sequential,
            c.token_dim(),
            c.hidden,
            c.max_positions,
            rng,
        );
        let depth = DepthParams::new(
            &mut store,
            c.hidden,
            c.depth_dim,
            c.layers,
            c.hidden,
            c.depth_init_scale,
            rng,
        );
        let slstm = SlstmParams::new(&mut store, c.refined_dim(), c.hidden, rng);
        let cls = ClassifierParams::new(&mut store, c.hidden, labels.len(), rng);
        let sinusoid = sinusoidal_table(c.layers, c.depth_dim);
        Ok(Self {
            config,
            vocab,
            labels,
            store,
            embed,
            seq,
            depth,
            slstm,
            cls,
            sinusoid,
        })
    }

    pub fn encode<S: AsRef<str>, W: AsRef<[S]>>(&self, sentences: &[W]) -> Result<Batch> {
        Batch::encode(&self.vocab, sentences)
    }

    /// Installs a pretrained word table and freezes it.
    pub fn set_word_table(&mut self, table: Tensor<F>) -> Result<()> {
        let cur = self.store.get(self.embed.words);
        if cur.shape() != table.shape() {
            return Err(Error::Argument(format!(
                "word table {:?} does not match {:?}",
                table.shape(),
                cur.shape()
            )));
        }
        *self.store.get_mut(self.embed.words) = table;
        self.store.set_trainable(self.embed.words, false);
        self.config.pretrained_words = true;
        Ok(())
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<F>,
        batch: &Batch,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<Forward> {
        let c = &self.config;
        let layout = &batch.layout;
        let ev = self.embed.vars(tape, &self.store);
        let sv = self.seq.vars(tape, &self.store);
        let dv = self.depth.vars(tape, &self.store);
        let lv = self.slstm.vars(tape, &self.store);
        let cv = self.cls.vars(tape, &self.store);

        let tokens = assemble_tokens(tape, &ev, &batch.word_ids, &batch.char_ids)?;
        let tokens = tape.dropout(tokens, c.embed_dropout, rng, opts.training)?;
        let (x, feats) = sequential(tape, c.sequential, &sv, tokens, layout)?;
        let feats = tape.dropout(feats, c.hidden_dropout, rng, opts.training)?;

        let mut counts = TransitionCounts::default();
        let (assignment, states, logits_var) = if c.adaptive {
            let input = if c.detach_depth_input {
                let v = tape.value(feats).clone();
                tape.constant(v)
            } else {
                feats
            };
            let (logits, inner) = depth_logits(tape, &dv, input)?;
            let assignment = match &opts.depths {
                None => compute_assignment(tape.value(logits), layout, c.selection, c.tau, rng)?,
                Some(DepthOverride::Uniform(d)) => DepthAssignment::uniform(layout, *d, c.layers)?,
                Some(DepthOverride::PerToken(d)) => {
                    DepthAssignment::from_depths(d.clone(), layout, c.layers)?
                }
            };
            let refined = refine_tokens(tape, x, dv.w2, &self.sinusoid, &assignment.depths)?;
            let xu = project_tokens(tape, &lv, refined)?;
            let h0 = init_h0(tape, &dv, inner)?;
            let states = adaptive_stack(
                tape,
                &lv,
                xu,
                layout,
                &assignment.depths,
                Some(h0),
                opts.stack,
                &mut counts,
            )?;
            (assignment, states, Some(logits))
        } else {
            let depth = match &opts.depths {
                None => c.layers,
                Some(DepthOverride::Uniform(d)) => *d,
                Some(DepthOverride::PerToken(_)) => {
                    return Err(Error::Argument(
                        "per-token depths need the adaptive model".into(),
                    ))
                }
            };
            let assignment = DepthAssignment::uniform(layout, depth, c.layers)?;
            let refined = refine_tokens(tape, x, dv.w2, &self.sinusoid, &assignment.depths)?;
            let xu = project_tokens(tape, &lv, refined)?;
            let states = full_stack(tape, &lv, xu, layout, depth, None, opts.stack, &mut counts)?;
            (assignment, states, None)
        };

        let last = *states
            .last()
            .expect("stack returns at least the initial state");
        let v = pool_head(tape, last.h, last.g, layout)?;
        let v = tape.dropout(v, c.hidden_dropout, rng, opts.training)?;
        let logits = class_logits(tape, &cv, v)?;
        Ok(Forward {
            logits,
            assignment,
            counts,
            states,
            depth_logits: logits_var,
        })
    }

    pub fn loss(&self, tape: &mut Tape<F>, fwd: &Forward, gold: &[usize]) -> Result<Var> {
        Ok(tape.softmax_cross_entropy(fwd.logits, gold, self.config.label_smoothing)?)
    }

    /// Evaluation pass. Gumbel noise, if any, comes from a generator seeded
    /// with `seed`, so repeated calls agree bitwise.
    pub fn predict(&self, batch: &Batch, seed: u64) -> Result<Prediction<F>> {
        self.predict_with(batch, seed, None)
    }

    pub fn predict_with(
        &self,
        batch: &Batch,
        seed: u64,
        depths: Option<DepthOverride>,
    ) -> Result<Prediction<F>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opts = ForwardOptions::eval(self.config.compaction_threshold);
        opts.depths = depths;
        let fwd = self.forward(&mut tape, batch, &opts, &mut rng)?;
        let logits = tape.value(fwd.logits).clone();
        Ok(Prediction {
            labels: predict_rows(&logits),
            logits,
            assignment: fwd.assignment,
            counts: fwd.counts,
        })
    }
}
