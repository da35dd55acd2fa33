use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use num_traits::Float;

use super::{AlloSt, EncodedMemory, ParameterSet};
use crate::bpe::{BOS_ID, EOS_ID};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Result of autoregressive decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Target ids without `<s>` and `</s>`.
    pub ids: Vec<usize>,
    /// Sum of token log-probabilities, `</s>` included when emitted.
    pub log_prob: f64,
    /// True when `max_len` was reached before `</s>`.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
}

impl Hypothesis {
    /// Log-probability per generated token (`<s>` excluded).
    fn normalized(&self) -> f64 {
        self.log_prob / (self.tokens.len() - 1).max(1) as f64
    }
}

fn log_softmax<F: Scalar>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| Float::exp(v.as_f64() - max)).sum();
    let log_z = max + Float::ln(z);
    row.iter().map(|v| v.as_f64() - log_z).collect()
}

/// Indices of the `k` largest entries, ties to the lower index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl AlloSt {
    /// Emits one token at a time, feeding each back in, until `</s>` or
    /// `max_len` tokens.
    ///
    /// `beam == 1` is greedy argmax. Wider beams keep the `beam` best
    /// partial hypotheses by summed log-probability and rank finished ones
    /// by log-probability divided by length.
    pub fn generate<F: Scalar>(
        &self,
        params: &ParameterSet<F>,
        memory: &EncodedMemory<F>,
        max_len: usize,
        beam: usize,
    ) -> Result<Generation> {
        if beam == 0 || max_len == 0 {
            return Err(TensorError::Config("beam and max_len must be at least 1".into()));
        }
        let mut alive = vec![Hypothesis {
            tokens: vec![BOS_ID],
            log_prob: 0.0,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();

        for _ in 0..max_len {
            let mut candidates = Vec::with_capacity(alive.len() * beam);
            for hyp in &alive {
                let logits = self.decode_logits(params, &hyp.tokens, memory)?;
                let last = logits.row(hyp.tokens.len() - 1);
                let lp = log_softmax(last);
                for tok in top_k(&lp, beam) {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    candidates.push(Hypothesis {
                        tokens,
                        log_prob: hyp.log_prob + lp[tok],
                    });
                }
            }
            // Stable sort keeps expansion order on exact ties.
            candidates.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap_or(Ordering::Equal));
            alive.clear();
            for c in candidates {
                if alive.len() == beam {
                    break;
                }
                if *c.tokens.last().unwrap() == EOS_ID {
                    finished.push(c);
                } else {
                    alive.push(c);
                }
            }
            if alive.is_empty() || finished.len() >= beam {
                break;
            }
        }

        let best_of = |hyps: &[Hypothesis]| -> Option<Hypothesis> {
            hyps.iter()
                .max_by(|a, b| a.normalized().partial_cmp(&b.normalized()).unwrap_or(Ordering::Equal))
                .cloned()
        };
        let (best, truncated) = match best_of(&finished) {
            Some(h) => (h, false),
            None => (best_of(&alive).expect("at least one hypothesis"), true),
        };
        let mut ids = best.tokens[1..].to_vec();
        if ids.last() == Some(&EOS_ID) {
            ids.pop();
        }
        Ok(Generation {
            ids,
            log_prob: best.log_prob,
            truncated,
        })
    }

    /// Greedy decoding written out directly, without the beam bookkeeping.
    pub fn greedy<F: Scalar>(
        &self,
        params: &ParameterSet<F>,
        memory: &EncodedMemory<F>,
        max_len: usize,
    ) -> Result<Generation> {
        let mut tokens = vec![BOS_ID];
        let mut log_prob = 0.0;
        for _ in 0..max_len {
            let logits = self.decode_logits(params, &tokens, memory)?;
            let lp = log_softmax(logits.row(tokens.len() - 1));
            let next = super::argmax(&lp);
            log_prob += lp[next];
            if next == EOS_ID {
                return Ok(Generation {
                    ids: tokens[1..].to_vec(),
                    log_prob,
                    truncated: false,
                });
            }
            tokens.push(next);
        }
        Ok(Generation {
            ids: tokens[1..].to_vec(),
            log_prob,
            truncated: true,
        })
    }
}
