//! Flattened batch layout.
//!
//! Sentences of a batch are stored back to back: token `i` of sentence
//! `b` lives in row `offsets[b] + i` of every per-token matrix. The
//! boundary padding words of the S-LSTM are never materialized; gathers
//! read them as zero rows.

use std::ops::Range;

use crate::embed::{CharVocab, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    lengths: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        if let Some(b) = lengths.iter().position(|&n| n == 0) {
            return Err(Error::Argument(format!("sentence {b} has no tokens")));
        }
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut total = 0;
        for &n in &lengths {
            offsets.push(total);
            total += n;
        }
        Ok(Self {
            lengths,
            offsets,
            total,
        })
    }

    pub fn sentences(&self) -> usize {
        self.lengths.len()
    }

    pub fn tokens(&self) -> usize {
        self.total
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    pub fn row(&self, sentence: usize, position: usize) -> usize {
        debug_assert!(position < self.lengths[sentence]);
        self.offsets[sentence] + position
    }

    pub fn span(&self, sentence: usize) -> Range<usize> {
        self.offsets[sentence]..self.offsets[sentence] + self.lengths[sentence]
    }

    pub fn segments(&self) -> Vec<Range<usize>> {
        (0..self.sentences()).map(|b| self.span(b)).collect()
    }

    pub fn sentence_of(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total);
        for (b, &n) in self.lengths.iter().enumerate() {
            out.extend(std::iter::repeat_n(b, n));
        }
        out
    }

    /// Row of the left neighbour of every token; `None` at sentence start.
    pub fn left(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.total);
        for b in 0..self.sentences() {
            for r in self.span(b) {
                out.push((r > self.offsets[b]).then(|| r - 1));
            }
        }
        out
    }

    /// Row of the right neighbour of every token; `None` at sentence end.
    pub fn right(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.total);
        for b in 0..self.sentences() {
            let end = self.span(b).end;
            for r in self.span(b) {
                out.push((r + 1 < end).then(|| r + 1));
            }
        }
        out
    }
}

/// Vocabulary and character ids for a batch of tokenized sentences.
#[derive(Clone, Debug)]
pub struct Batch {
    pub layout: Layout,
    pub word_ids: Vec<usize>,
    pub char_ids: Vec<Vec<usize>>,
}

impl Batch {
    pub fn encode<S: AsRef<str>, W: AsRef<[S]>>(vocab: &Vocab, sentences: &[W]) -> Result<Self> {
        let layout = Layout::new(sentences.iter().map(|s| s.as_ref().len()).collect())?;
        let mut word_ids = Vec::with_capacity(layout.tokens());
        let mut char_ids = Vec::with_capacity(layout.tokens());
        for s in sentences {
            for tok in s.as_ref() {
                let tok = tok.as_ref();
                word_ids.push(vocab.id(tok));
                char_ids.push(CharVocab::encode(tok));
            }
        }
        Ok(Self {
            layout,
            word_ids,
            char_ids,
        })
    }

    pub fn from_ids(
        lengths: Vec<usize>,
        word_ids: Vec<usize>,
        char_ids: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let layout = Layout::new(lengths)?;
        if word_ids.len() != layout.tokens() || char_ids.len() != layout.tokens() {
            return Err(Error::Argument(
                "id lists do not match sentence lengths".into(),
            ));
        }
        Ok(Self {
            layout,
            word_ids,
            char_ids,
        })
    }
}
