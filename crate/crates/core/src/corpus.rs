//! Parallel corpora: loading, vocabulary, encoding and a synthetic task.
//!
//! One [`ParallelPair`] is one protected record for the privacy accounting.
//! That is a per-sentence-pair guarantee, not a per-person one: several pairs
//! may describe the same individual.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, Stream};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

const MAX_REPORTED_LINES: usize = 10;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus is empty")]
    Empty,
    #[error("malformed lines: {}", format_lines(.0))]
    Malformed(Vec<(usize, String)>),
    #[error("source and target must be non-empty after trimming")]
    EmptySide,
    #[error("max_seq_len {0} cannot hold BOS and EOS")]
    SequenceTooShort(usize),
    #[error("unknown corpus format {0:?} (expected jsonl or tsv)")]
    UnknownFormat(String),
}

fn format_lines(lines: &[(usize, String)]) -> String {
    lines
        .iter()
        .map(|(n, why)| format!("line {n}: {why}"))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: String,
    pub target: String,
}

impl ParallelPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Result<Self, CorpusError> {
        let (source, target) = (source.into(), target.into());
        if source.trim().is_empty() || target.trim().is_empty() {
            return Err(CorpusError::EmptySide);
        }
        Ok(Self { source, target })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub pairs: Vec<ParallelPair>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Tsv,
}

impl FromStr for Format {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "tsv" => Ok(Format::Tsv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Jsonl => "jsonl",
            Format::Tsv => "tsv",
        })
    }
}

pub fn load_parallel(path: impl AsRef<Path>, format: Format, name: SplitName) -> Result<DatasetSplit, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_parallel(&text, format, name)
}

/// Parses corpus text. Blank lines are skipped; pairs keep file order and
/// duplicates are preserved.
pub fn parse_parallel(text: &str, format: Format, name: SplitName) -> Result<DatasetSplit, CorpusError> {
    #[derive(Deserialize)]
    struct Record {
        source: String,
        target: String,
    }

    let mut pairs = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            Format::Jsonl => serde_json::from_str::<Record>(line)
                .map_err(|e| e.to_string())
                .map(|r| (r.source, r.target)),
            Format::Tsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() == 2 {
                    Ok((cols[0].to_string(), cols[1].to_string()))
                } else {
                    Err(format!("expected 2 tab-separated columns, found {}", cols.len()))
                }
            }
        };
        match parsed.and_then(|(s, t)| ParallelPair::new(s, t).map_err(|e| e.to_string())) {
            Ok(p) => pairs.push(p),
            Err(why) => {
                if bad.len() < MAX_REPORTED_LINES {
                    bad.push((lineno, why));
                }
            }
        }
    }
    if !bad.is_empty() {
        return Err(CorpusError::Malformed(bad));
    }
    if pairs.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(DatasetSplit { name, pairs })
}

pub fn write_parallel(split: &DatasetSplit, format: Format) -> String {
    let mut out = String::new();
    for p in &split.pairs {
        match format {
            Format::Jsonl => {
                out.push_str(&serde_json::to_string(p).expect("pair serializes"));
            }
            Format::Tsv => {
                out.push_str(&p.source);
                out.push('\t');
                out.push_str(&p.target);
            }
        }
        out.push('\n');
    }
    out
}

pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Token to id mapping shared by source and target. Ids 0..4 are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps the `max_size - 4` most frequent whitespace tokens over both
    /// sides of the split; ties go to the lexicographically smaller token.
    pub fn build(split: &DatasetSplit, max_size: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for p in &split.pairs {
            for tok in tokenize(&p.source).chain(tokenize(&p.target)) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(RESERVED.len());
        let words = ranked.into_iter().take(keep).map(|(t, _)| t.to_string());
        Self::from_tokens(words)
    }

    /// Vocabulary with the reserved entries followed by `words` in order.
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Like `from_tokens`, but rejects duplicates, reserved names and tokens
    /// that whitespace tokenization could not produce.
    pub fn try_from_tokens(words: Vec<String>) -> Result<Self, String> {
        let vocab = Self::from_tokens(words);
        if let Some(w) = vocab.words().iter().find(|w| w.is_empty() || w.contains(char::is_whitespace)) {
            return Err(format!("token {w:?} is empty or contains whitespace"));
        }
        if vocab.index.len() != vocab.tokens.len() {
            return Err("duplicate or reserved token in vocabulary".into());
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text).map(|t| self.id(t)).collect()
    }

    /// Joins token ids with single spaces, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `BOS tokens EOS`, truncated to `max_seq_len` with EOS kept last.
pub fn encode_sentence(text: &str, vocab: &Vocab, max_seq_len: usize) -> Result<Vec<usize>, CorpusError> {
    if max_seq_len < 2 {
        return Err(CorpusError::SequenceTooShort(max_seq_len));
    }
    let mut ids = Vec::with_capacity(max_seq_len);
    ids.push(BOS);
    ids.extend(tokenize(text).take(max_seq_len - 2).map(|t| vocab.id(t)));
    ids.push(EOS);
    Ok(ids)
}

pub fn encode_pair(pair: &ParallelPair, vocab: &Vocab, max_seq_len: usize) -> Result<(Vec<usize>, Vec<usize>), CorpusError> {
    Ok((
        encode_sentence(&pair.source, vocab, max_seq_len)?,
        encode_sentence(&pair.target, vocab, max_seq_len)?,
    ))
}

/// Encoded source and target, each `BOS ... EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn encode_split(split: &DatasetSplit, vocab: &Vocab, max_seq_len: usize) -> Result<Vec<Encoded>, CorpusError> {
    split
        .pairs
        .iter()
        .map(|p| encode_pair(p, vocab, max_seq_len).map(|(source, target)| Encoded { source, target }))
        .collect()
}

/// Names of the synthetic task's tokens: `t0`, `t1`, ...
pub fn synth_token(i: usize) -> String {
    format!("t{i}")
}

/// Random token sequences paired with their reversal.
pub fn synth_reversal(n_pairs: usize, vocab_tokens: usize, len_range: (usize, usize), seed: u64) -> DatasetSplit {
    assert!(n_pairs > 0 && vocab_tokens > 0, "need at least one pair and one token");
    let (lo, hi) = len_range;
    assert!(1 <= lo && lo <= hi, "invalid length range {lo}..={hi}");
    let mut rng = stream(seed, Stream::Synth);
    let pairs = (0..n_pairs)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            let toks: Vec<String> = (0..len).map(|_| synth_token(rng.random_range(0..vocab_tokens))).collect();
            let source = toks.join(" ");
            let target = toks.iter().rev().cloned().collect::<Vec<_>>().join(" ");
            ParallelPair { source, target }
        })
        .collect();
    DatasetSplit {
        name: SplitName::Train,
        pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(lines: &[(&str, &str)]) -> DatasetSplit {
        DatasetSplit {
            name: SplitName::Train,
            pairs: lines.iter().map(|(s, t)| ParallelPair::new(*s, *t).unwrap()).collect(),
        }
    }

    #[test]
    fn tsv_load_preserves_order() {
        let s = parse_parallel("a\tA\nb\tB\nc\tC\n", Format::Tsv, SplitName::Train).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.pairs[1], ParallelPair::new("b", "B").unwrap());
    }

    #[test]
    fn single_column_line_is_reported() {
        let err = parse_parallel("a\tA\nbroken\nc\tC\n", Format::Tsv, SplitName::Train).unwrap_err();
        match err {
            CorpusError::Malformed(lines) => {
                assert_eq!(lines.len(), 1);
                assert_eq!(lines[0].0, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn at_most_ten_bad_lines_are_listed() {
        let text = "x\n".repeat(25);
        match parse_parallel(&text, Format::Tsv, SplitName::Train).unwrap_err() {
            CorpusError::Malformed(lines) => assert_eq!(lines.len(), 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_json_key_is_reported() {
        let text = "{\"source\":\"a\",\"target\":\"b\"}\n{\"source\":\"a\"}\n";
        assert!(matches!(
            parse_parallel(text, Format::Jsonl, SplitName::Test),
            Err(CorpusError::Malformed(ref l)) if l[0].0 == 2
        ));
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse_parallel("", Format::Tsv, SplitName::Train), Err(CorpusError::Empty)));
    }

    #[test]
    fn jsonl_and_tsv_agree() {
        let s = split(&[("das haus", "the house"), ("ein hund", "a dog"), ("das haus", "the house")]);
        let a = parse_parallel(&write_parallel(&s, Format::Jsonl), Format::Jsonl, SplitName::Train).unwrap();
        let b = parse_parallel(&write_parallel(&s, Format::Tsv), Format::Tsv, SplitName::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, s);
    }

    #[test]
    fn vocab_frequency_then_lexicographic() {
        let v = Vocab::build(&split(&[("a a", "b")]), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        let tie = Vocab::build(&split(&[("z y", "x")]), 10);
        assert_eq!(tie.words(), &["x", "y", "z"]);
    }

    #[test]
    fn vocab_is_deterministic() {
        let s = synth_reversal(50, 20, (2, 6), 5);
        assert_eq!(Vocab::build(&s, 30), Vocab::build(&s, 30));
    }

    #[test]
    fn reserved_only_vocab_maps_to_unk() {
        let v = Vocab::build(&split(&[("a b", "c")]), 4);
        assert_eq!(v.len(), 4);
        assert_eq!(v.encode_text("a b c"), vec![UNK; 3]);
    }

    #[test]
    fn encoding_examples() {
        let v = Vocab::build(&split(&[("a a", "b")]), 6);
        let p = ParallelPair::new("a b", "a b").unwrap();
        assert_eq!(encode_pair(&p, &v, 8).unwrap().0, vec![1, 4, 5, 2]);
        assert_eq!(encode_sentence("a zz", &v, 8).unwrap(), vec![1, 4, UNK, 2]);
        assert_eq!(encode_sentence("a b a b a", &v, 3).unwrap(), vec![1, 4, 2]);
        assert!(matches!(encode_sentence("a", &v, 1), Err(CorpusError::SequenceTooShort(1))));
    }

    #[test]
    fn reversal_examples() {
        let s = synth_reversal(200, 10, (1, 5), 3);
        for p in &s.pairs {
            let mut toks: Vec<&str> = p.source.split(' ').collect();
            toks.reverse();
            assert_eq!(p.target, toks.join(" "));
            if toks.len() == 1 {
                assert_eq!(p.source, p.target);
            }
        }
        assert_eq!(s, synth_reversal(200, 10, (1, 5), 3));
        assert_ne!(s, synth_reversal(200, 10, (1, 5), 4));
    }
}
