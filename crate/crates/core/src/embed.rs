//! Token representations: vocabulary, pretrained word vectors, the
//! character CNN and the depth embedding.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use aslstm_tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Word vocabulary. Ids 0 and 1 are reserved for padding and unknown words.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

impl Vocab {
    /// Ids are assigned by descending frequency, ties broken lexicographically.
    /// Tokens seen fewer than `min_freq` times are left out and map to UNK.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize) -> Result<Self> {
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::Argument(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in corpus {
            for t in s {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(kept.into_iter().map(|(t, _)| t))
            .map(String::from)
            .collect();
        Ok(Self::from_tokens(tokens, min_freq))
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            min_freq,
        }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    tokens: Vec<String>,
    min_freq: usize,
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VocabRecord {
            tokens: self.tokens.clone(),
            min_freq: self.min_freq,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = VocabRecord::deserialize(d)?;
        Ok(Vocab::from_tokens(r.tokens, r.min_freq))
    }
}

/// Character ids: printable ASCII plus padding and unknown. Case is kept.
pub struct CharVocab;

impl CharVocab {
    pub const SIZE: usize = 2 + 95;

    pub fn id(c: char) -> usize {
        match c {
            ' '..='~' => c as usize - ' ' as usize + 2,
            _ => UNK,
        }
    }

    pub fn encode(word: &str) -> Vec<usize> {
        word.chars().map(Self::id).collect()
    }
}

/// Transformer-style sinusoidal code: coordinate `2j` is
/// `sin(pos / 10000^(2j/dim))`, coordinate `2j+1` the matching cosine.
pub fn sinusoidal(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| {
            let j2 = (k - k % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(j2 / dim as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Fixed (non-trainable) depth code for depth `d`, `0 <= d <= max_depth`.
pub fn sinusoidal_depth(d: usize, dim: usize, max_depth: usize) -> Result<Vec<f64>> {
    if d > max_depth {
        return Err(Error::Argument(format!(
            "depth {d} outside 0..={max_depth}"
        )));
    }
    Ok(sinusoidal(d, dim))
}

/// `(max_depth + 1) x dim` table of [`sinusoidal_depth`] rows.
pub fn sinusoidal_table<F: Scalar>(max_depth: usize, dim: usize) -> Tensor<F> {
    let rows: Vec<Vec<F>> = (0..=max_depth)
        .map(|d| {
            sinusoidal(d, dim)
                .into_iter()
                .map(F::from_f64_lossy)
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows).expect("rows share a width")
}

/// Reads word vectors in the whitespace-separated text format (a token
/// followed by `dim` decimals per line). Rows of vocabulary words missing
/// from the file are drawn uniformly from (-0.05, 0.05).
pub fn load_pretrained<F: Scalar, R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    rng: &mut R,
) -> Result<Tensor<F>> {
    if dim == 0 {
        return Err(Error::Argument(
            "pretrained dimension must be positive".into(),
        ));
    }
    let mut table: Tensor<F> = Tensor::uniform(&[vocab.len(), dim], -0.05, 0.05, rng);
    let mut filled = vec![false; vocab.len()];
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default();
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(parse_err(format!(
                "expected {dim} values for `{token}`, found {}",
                values.len()
            )));
        }
        let id = match vocab.index.get(token) {
            Some(&id) if !filled[id] => id,
            _ => continue,
        };
        let row = table.row_mut(id);
        for (slot, v) in row.iter_mut().zip(values) {
            let x: f64 = v
                .parse()
                .map_err(|_| parse_err(format!("`{v}` is not a number")))?;
            *slot = F::from_f64_lossy(x);
        }
        filled[id] = true;
    }
    Ok(table)
}

/// Parameters of the token embedder.
#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub words: ParamId,
    pub chars: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EmbedVars {
    pub words: Var,
    pub chars: Var,
    pub conv_w: Var,
    pub conv_b: Var,
}

impl EmbedParams {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        vocab_size: usize,
        word_dim: usize,
        char_dim: usize,
        char_out: usize,
        rng: &mut R,
    ) -> Self {
        let words = store.add(
            "embed.words",
            Tensor::xavier_uniform(vocab_size, word_dim, rng),
            true,
        );
        let chars = store.add(
            "embed.chars",
            Tensor::xavier_uniform(CharVocab::SIZE, char_dim, rng),
            true,
        );
        let conv_w = store.add(
            "embed.conv_w",
            Tensor::xavier_uniform(3 * char_dim, char_out, rng),
            true,
        );
        let conv_b = store.add("embed.conv_b", Tensor::zeros(&[char_out]), true);
        Self {
            words,
            chars,
            conv_w,
            conv_b,
        }
    }

    pub fn vars<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> EmbedVars {
        EmbedVars {
            words: store.var(tape, self.words),
            chars: store.var(tape, self.chars),
            conv_w: store.var(tape, self.conv_w),
            conv_b: store.var(tape, self.conv_b),
        }
    }
}

/// One-layer width-3 character CNN with ReLU and max-over-time pooling,
/// one output row per word.
///
/// Each character gets the window (previous, itself, next); positions
/// outside the word read as zero vectors. Trailing padding ids are
/// ignored, so padding a character sequence never changes its output.
pub fn char_cnn<F: Scalar>(tape: &mut Tape<F>, v: &EmbedVars, words: &[Vec<usize>]) -> Result<Var> {
    let mut left = Vec::new();
    let mut mid = Vec::new();
    let mut right = Vec::new();
    let mut segments = Vec::with_capacity(words.len());
    let id = |c: usize| (c != PAD).then_some(c);
    for (w, chars) in words.iter().enumerate() {
        let len = chars.iter().rposition(|&c| c != PAD).map_or(0, |p| p + 1);
        if len == 0 {
            return Err(Error::Argument(format!("word {w} has no characters")));
        }
        let chars = &chars[..len];
        let start = mid.len();
        for k in 0..len {
            left.push(if k > 0 { id(chars[k - 1]) } else { None });
            mid.push(id(chars[k]));
            right.push(if k + 1 < len { id(chars[k + 1]) } else { None });
        }
        segments.push(start..mid.len());
    }
    let l = tape.gather_rows(v.chars, left)?;
    let m = tape.gather_rows(v.chars, mid)?;
    let r = tape.gather_rows(v.chars, right)?;
    let windows = tape.concat_cols(&[l, m, r])?;
    let conv = tape.linear(windows, v.conv_w, v.conv_b)?;
    let act = tape.relu(conv);
    Ok(tape.segment_max(act, segments)?)
}

/// `[word vector; character CNN vector]` per token. Word ids outside the
/// table read the UNK row.
pub fn assemble_tokens<F: Scalar>(
    tape: &mut Tape<F>,
    v: &EmbedVars,
    word_ids: &[usize],
    char_ids: &[Vec<usize>],
) -> Result<Var> {
    let rows = tape.value(v.words).rows();
    let ids: Vec<Option<usize>> = word_ids
        .iter()
        .map(|&i| Some(if i < rows { i } else { UNK }))
        .collect();
    let words = tape.gather_rows(v.words, ids)?;
    let chars = char_cnn(tape, v, char_ids)?;
    Ok(tape.concat_cols(&[words, chars])?)
}

/// Appends the depth embedding of each token's executed depth: the
/// trainable row (a column of the depth classifier's output matrix
/// `depth_out: [depth_dim, L]`) plus the fixed sinusoidal row.
pub fn refine_tokens<F: Scalar>(
    tape: &mut Tape<F>,
    tokens: Var,
    depth_out: Var,
    sinusoid: &Tensor<F>,
    depths: &[usize],
) -> Result<Var> {
    let layers = tape.value(depth_out).cols();
    if let Some(&d) = depths.iter().find(|&&d| d == 0 || d > layers) {
        return Err(Error::Argument(format!("depth {d} outside 1..={layers}")));
    }
    let table = tape.transpose(depth_out);
    let learned = tape.gather_rows(table, depths.iter().map(|&d| Some(d - 1)).collect())?;
    let mut fixed = Vec::with_capacity(depths.len() * sinusoid.cols());
    for &d in depths {
        fixed.extend_from_slice(sinusoid.row(d));
    }
    let fixed = tape.constant(Tensor::new(vec![depths.len(), sinusoid.cols()], fixed)?);
    let depth_emb = tape.add(learned, fixed)?;
    Ok(tape.concat_cols(&[tokens, depth_emb])?)
}
