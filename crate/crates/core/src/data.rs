//! Dataset ingestion, splits and synthetic tasks.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Splits on whitespace and makes every punctuation character its own
/// token. Case is preserved.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_ascii() && is_unicode_punct(ch)) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn is_unicode_punct(ch: char) -> bool {
    matches!(ch, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{00A1}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}')
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Tsv,
    Csv,
    Jsonl,
    /// `LABEL:fine text` lines, as distributed with the TREC question set.
    /// Only the coarse label before the colon is kept.
    Trec,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            "trec" => Ok(Format::Trec),
            other => Err(Error::Argument(format!("unknown dataset format {other:?}"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Tsv => "tsv",
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
            Format::Trec => "trec",
        })
    }
}

impl Format {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => Ok(Format::Tsv),
            Some("csv") => Ok(Format::Csv),
            Some("jsonl") | Some("json") => Ok(Format::Jsonl),
            Some("label") => Ok(Format::Trec),
            _ => Err(Error::Argument(format!(
                "cannot infer dataset format of {}",
                path.display()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub label: String,
    pub text: String,
    pub tokens: Vec<String>,
}

impl DatasetRecord {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            label: label.into(),
            tokens: tokenize(&text),
            text,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    /// Sorted label set.
    pub labels: Vec<String>,
}

impl Dataset {
    pub fn from_records(records: Vec<DatasetRecord>) -> Self {
        let labels: BTreeSet<&str> = records.iter().map(|r| r.label.as_str()).collect();
        let labels = labels.into_iter().map(str::to_owned).collect();
        Self { records, labels }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Label ids under a (possibly larger) label list, e.g. the training
    /// labels when this is a test set.
    pub fn label_ids(&self, labels: &[String]) -> Result<Vec<usize>> {
        self.records
            .iter()
            .map(|r| {
                labels
                    .iter()
                    .position(|l| *l == r.label)
                    .ok_or_else(|| Error::Data(format!("label {:?} not seen in training", r.label)))
            })
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn token_lists(&self) -> Vec<Vec<String>> {
        self.records.iter().map(|r| r.tokens.clone()).collect()
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn checked(path: &Path, line: usize, label: &str, text: &str) -> Result<DatasetRecord> {
    let label = label.trim();
    if label.is_empty() {
        return Err(parse_err(path, line, "empty label"));
    }
    let rec = DatasetRecord::new(label, text.trim());
    if rec.tokens.is_empty() {
        return Err(parse_err(path, line, "text has no tokens"));
    }
    Ok(rec)
}

/// Reads a labelled text file. Blank lines are skipped in line-oriented
/// formats.
pub fn ingest(path: &Path, format: Format) -> Result<Dataset> {
    let records = match format {
        Format::Csv => ingest_csv(path)?,
        _ => {
            let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
            // TREC files are Latin-1 in places
            let content = match String::from_utf8(raw) {
                Ok(s) => s,
                Err(e) if format == Format::Trec => {
                    e.into_bytes().iter().map(|&b| b as char).collect()
                }
                Err(e) => return Err(parse_err(path, 0, format!("not UTF-8: {e}"))),
            };
            let mut out = Vec::new();
            for (i, line) in content.lines().enumerate() {
                let n = i + 1;
                if line.trim().is_empty() {
                    continue;
                }
                out.push(match format {
                    Format::Tsv => {
                        let (label, text) = line
                            .split_once('\t')
                            .ok_or_else(|| parse_err(path, n, "expected label<TAB>text"))?;
                        checked(path, n, label, text)?
                    }
                    Format::Trec => {
                        let (label, rest) = line
                            .split_once(':')
                            .ok_or_else(|| parse_err(path, n, "expected LABEL:fine text"))?;
                        let text = rest
                            .split_once(char::is_whitespace)
                            .map(|(_, t)| t)
                            .ok_or_else(|| parse_err(path, n, "missing question text"))?;
                        checked(path, n, label, text)?
                    }
                    Format::Jsonl => json_record(path, n, line)?,
                    Format::Csv => unreachable!(),
                });
            }
            out
        }
    };
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    Ok(Dataset::from_records(records))
}

fn json_record(path: &Path, n: usize, line: &str) -> Result<DatasetRecord> {
    let v: serde_json::Value =
        serde_json::from_str(line).map_err(|e| parse_err(path, n, e.to_string()))?;
    let label = match v.get("label") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Number(x)) => x.to_string(),
        Some(_) => return Err(parse_err(path, n, "\"label\" must be a string or number")),
        None => return Err(parse_err(path, n, "missing \"label\"")),
    };
    let text = v
        .get("text")
        .and_then(|t| t.as_str())
        .ok_or_else(|| parse_err(path, n, "missing string \"text\""))?;
    checked(path, n, &label, text)
}

fn ingest_csv(path: &Path) -> Result<Vec<DatasetRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected 2 fields, found {}", rec.len()),
            ));
        }
        out.push(checked(path, line, &rec[0], &rec[1])?);
    }
    Ok(out)
}

/// Seeded split into (train, dev) index lists; the dev part holds
/// `round(fraction * n)` examples, at least one when `n > 1`.
pub fn dev_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dev_n = (fraction * n as f64).round() as usize;
    if n > 1 {
        dev_n = dev_n.clamp(1, n - 1);
    } else {
        dev_n = 0;
    }
    let dev = idx.split_off(n - dev_n);
    (idx, dev)
}

/// Seeded partition into `k` folds whose sizes differ by at most one.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Argument(format!(
            "cross-validation needs k >= 2, got {k}"
        )));
    }
    if n < k {
        return Err(Error::Argument(format!(
            "{n} examples cannot fill {k} folds"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (i, x) in idx.into_iter().enumerate() {
        folds[i % k].push(x);
    }
    Ok(folds)
}

pub const TRIGGER: &str = "zyzzyva";

/// Binary task: label `yes` iff the sentence contains [`TRIGGER`].
/// Filler words come from a small closed vocabulary; half the examples
/// carry the trigger at a random position.
pub fn trigger_task(n: usize, seed: u64) -> Dataset {
    const FILLER: [&str; 40] = [
        "the", "a", "film", "was", "good", "bad", "plot", "actor", "scene", "long", "short",
        "very", "not", "and", "but", "music", "story", "ending", "it", "is", "quite", "boring",
        "fun", "dark", "light", "slow", "fast", "cast", "role", "script", "we", "they", "saw",
        "liked", "hated", "this", "that", "one", "two", "three",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.gen_range(4..=12);
        let mut words: Vec<&str> = (0..len)
            .map(|_| FILLER[rng.gen_range(0..FILLER.len())])
            .collect();
        let positive = i % 2 == 0;
        if positive {
            let at = rng.gen_range(0..len);
            words[at] = TRIGGER;
        }
        records.push(DatasetRecord::new(
            if positive { "yes" } else { "no" },
            words.join(" "),
        ));
    }
    records.shuffle(&mut rng);
    Dataset::from_records(records)
}

/// Random sentences with random labels: only memorization can fit them.
pub fn memorization_task(n: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            let len = rng.gen_range(3..=8);
            let words: Vec<String> = (0..len)
                .map(|_| format!("w{}", rng.gen_range(0..200)))
                .collect();
            DatasetRecord::new(format!("c{}", rng.gen_range(0..classes)), words.join(" "))
        })
        .collect();
    Dataset::from_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(content: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn tokenize_splits_punctuation_and_keeps_case() {
        assert_eq!(
            tokenize("Great film, isn't it?"),
            ["Great", "film", ",", "isn", "'", "t", "it", "?"]
        );
        assert_eq!(tokenize("  a\tb\n"), ["a", "b"]);
        assert!(tokenize(" ... ").iter().all(|t| t == "."));
    }

    #[test]
    fn tsv_record() {
        let f = file("pos\tgreat film\n\nneg\tdull\n", ".tsv");
        let d = ingest(f.path(), Format::Tsv).unwrap();
        assert_eq!(d.records[0].label, "pos");
        assert_eq!(d.records[0].tokens, ["great", "film"]);
        assert_eq!(d.labels, ["neg", "pos"]);
        assert_eq!(d, ingest(f.path(), Format::Tsv).unwrap());
    }

    #[test]
    fn tsv_without_tab_names_line() {
        let f = file("pos\tok\nbroken line\n", ".tsv");
        match ingest(f.path(), Format::Tsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_with_quoted_commas() {
        let f = file("pos,\"good, really\"\nneg,bad\n", ".csv");
        let d = ingest(f.path(), Format::Csv).unwrap();
        assert_eq!(d.records[0].tokens, ["good", ",", "really"]);
        let bad = file("pos,a\nneg,b,c\n", ".csv");
        assert!(matches!(
            ingest(bad.path(), Format::Csv),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn jsonl_missing_text_names_line() {
        let f = file(
            "{\"label\":\"a\",\"text\":\"x y\"}\n{\"label\":\"b\"}\n",
            ".jsonl",
        );
        match ingest(f.path(), Format::Jsonl) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("text"));
            }
            other => panic!("{other:?}"),
        }
        let ok = file("{\"label\":3,\"text\":\"x\"}\n", ".jsonl");
        assert_eq!(ingest(ok.path(), Format::Jsonl).unwrap().labels, ["3"]);
    }

    #[test]
    fn trec_keeps_coarse_label() {
        let f = file(
            "DESC:manner How did serfdom develop ?\nNUM:date When was it ?\n",
            ".label",
        );
        let d = ingest(f.path(), Format::Trec).unwrap();
        assert_eq!(d.labels, ["DESC", "NUM"]);
        assert_eq!(d.records[0].tokens[0], "How");
    }

    #[test]
    fn unknown_format_is_argument_error() {
        assert!(matches!("xml".parse::<Format>(), Err(Error::Argument(_))));
    }

    #[test]
    fn folds_partition() {
        let folds = kfold(23, 5, 7).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 4 || f.len() == 5));
        assert!(kfold(3, 5, 1).is_err());
        assert!(kfold(10, 1, 1).is_err());
    }

    #[test]
    fn dev_split_is_seeded() {
        let (t, d) = dev_split(100, 0.1, 3);
        assert_eq!((t.len(), d.len()), (90, 10));
        assert_eq!(dev_split(100, 0.1, 3), (t, d));
    }

    #[test]
    fn trigger_task_labels_follow_trigger() {
        let d = trigger_task(200, 1);
        for r in &d.records {
            assert_eq!(r.label == "yes", r.tokens.iter().any(|t| t == TRIGGER));
        }
        assert_eq!(d.records.iter().filter(|r| r.label == "yes").count(), 100);
    }
}
