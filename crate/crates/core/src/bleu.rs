//! Corpus BLEU-4 with up to four references per sentence.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::{Add, AddAssign};

use num_traits::Float;
use thiserror::Error;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BleuError {
    #[error("at least one reference is required")]
    NoReferences,
    #[error("empty corpus: no candidate tokens")]
    EmptyCorpus,
}

/// Sufficient statistics; additive across sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped n-gram matches, `matches[n - 1]` for order `n`.
    pub matches: [u64; MAX_ORDER],
    /// Candidate n-gram counts.
    pub totals: [u64; MAX_ORDER],
    pub cand_len: u64,
    pub ref_len: u64,
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }
}

impl Add for BleuStats {
    type Output = Self;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub bp: f64,
    pub cand_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], u64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram statistics of one candidate. Each n-gram's count is
/// clipped by its maximum count in any single reference; the effective
/// reference length is the one closest to the candidate, ties to shorter.
pub fn sentence_stats<T: Ord, R: AsRef<[T]>>(candidate: &[T], references: &[R]) -> Result<BleuStats, BleuError> {
    if references.is_empty() {
        return Err(BleuError::NoReferences);
    }
    let c = candidate.len();
    let mut stats = BleuStats {
        cand_len: c as u64,
        ..BleuStats::default()
    };
    stats.ref_len = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .expect("non-empty") as u64;
    for n in 1..=MAX_ORDER {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: BTreeMap<&[T], u64> = BTreeMap::new();
        for r in references {
            for (g, k) in ngram_counts(r.as_ref(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        stats.totals[n - 1] = c.saturating_sub(n - 1) as u64;
        stats.matches[n - 1] = cand
            .iter()
            .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
    }
    Ok(stats)
}

/// `100 · BP · exp(mean log p_n)` with `BP = min(1, exp(1 - r / c))`.
/// Any zero precision gives 0; there is no smoothing.
pub fn corpus_bleu(stats: &BleuStats) -> Result<BleuScore, BleuError> {
    if stats.totals[0] == 0 {
        return Err(BleuError::EmptyCorpus);
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if stats.totals[n] > 0 {
            precisions[n] = stats.matches[n] as f64 / stats.totals[n] as f64;
        }
    }
    let c = stats.cand_len as f64;
    let r = stats.ref_len as f64;
    let bp = if c >= r { 1.0 } else { Float::exp(1.0 - r / c) };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|&p| Float::ln(p)).sum::<f64>() / MAX_ORDER as f64;
        100.0 * bp * Float::exp(mean_log)
    };
    Ok(BleuScore {
        bleu,
        precisions,
        bp,
        cand_len: stats.cand_len,
        ref_len: stats.ref_len,
    })
}

/// Sums sentence statistics over `(candidate, references)` pairs and scores them.
pub fn corpus_score<T: Ord, C: AsRef<[T]>, R: AsRef<[T]>>(pairs: &[(C, Vec<R>)]) -> Result<BleuScore, BleuError> {
    if pairs.is_empty() {
        return Err(BleuError::EmptyCorpus);
    }
    let mut total = BleuStats::default();
    for (cand, refs) in pairs {
        total += sentence_stats(cand.as_ref(), refs)?;
    }
    corpus_bleu(&total)
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize_eval(text: &str) -> Vec<String> {
    crate::text::words(text)
}
