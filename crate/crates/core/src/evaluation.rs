//! Greedy decoding of a test split and corpus-level BLEU.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{encode_sentence, tokenize, CorpusError, DatasetSplit, Vocab};
use crate::exec;
use crate::model::{greedy_decode, ModelError, ModelParams};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("BLEU needs at least one candidate")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    /// Clipped n-gram matches per order, pooled over the corpus.
    pub matches: [usize; MAX_ORDER],
    /// Candidate n-gram counts per order, pooled over the corpus.
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over whitespace tokens with one reference per candidate and
/// no smoothing.
pub fn corpus_bleu<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<BleuReport, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, refr) in candidates.iter().zip(references) {
        let c: Vec<&str> = tokenize(cand.as_ref()).collect();
        let r: Vec<&str> = tokenize(refr.as_ref()).collect();
        c_len += c.len();
        r_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(&r, n);
            for (gram, count) in ngram_counts(&c, n) {
                matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    let precisions: [f64; MAX_ORDER] =
        std::array::from_fn(|i| if totals[i] == 0 { 0.0 } else { matches[i] as f64 / totals[i] as f64 });
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        (100.0 * brevity_penalty * mean_log.exp()).min(100.0)
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_length: c_len,
        reference_length: r_len,
    })
}

/// Greedy translations (token ids, without BOS/EOS) of every source in the
/// split. Sentences are decoded independently and possibly in parallel.
pub fn greedy_decode_corpus(params: &ModelParams, split: &DatasetSplit, vocab: &Vocab, max_len: usize) -> Result<Vec<Vec<usize>>, EvalError> {
    let max_seq_len = params.config().max_seq_len;
    let sources = split
        .pairs
        .iter()
        .map(|p| encode_sentence(&p.source, vocab, max_seq_len))
        .collect::<Result<Vec<_>, _>>()?;
    exec::map(&sources, |src| greedy_decode(params, src, max_len).map_err(EvalError::from))
        .into_iter()
        .collect()
}

/// One decoded test sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub source: String,
    pub reference: String,
    pub hypothesis: String,
}

/// Decodes the split and scores it against its targets.
pub fn evaluate(params: &ModelParams, split: &DatasetSplit, vocab: &Vocab) -> Result<(Vec<Translation>, BleuReport), EvalError> {
    let max_len = params.config().max_seq_len - 2;
    let outputs = greedy_decode_corpus(params, split, vocab, max_len)?;
    let translations: Vec<Translation> = split
        .pairs
        .iter()
        .zip(&outputs)
        .map(|(p, ids)| Translation {
            source: p.source.clone(),
            reference: p.target.clone(),
            hypothesis: vocab.decode(ids),
        })
        .collect();
    let hyps: Vec<&str> = translations.iter().map(|t| t.hypothesis.as_str()).collect();
    let refs: Vec<&str> = translations.iter().map(|t| t.reference.as_str()).collect();
    let report = corpus_bleu(&hyps, &refs)?;
    Ok((translations, report))
}
