//! Decoding a set of examples and scoring the hypotheses.

use allost_core::bleu::{corpus_score, tokenize_eval, BleuScore};
use allost_core::model::{AlloSt, ParameterSet, Source};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{Example, Tokenizers};
use crate::error::{Error, Result};

/// Hypothesis text per example, decoded with `beam` and at most `max_len`
/// target tokens.
pub fn translate(
    model: &AlloSt,
    params: &ParameterSet<f32>,
    examples: &[Example],
    tok: &Tokenizers,
    beam: usize,
    max_len: usize,
) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let phones = tok.encode_phones(ex, 0.0, &mut rng)?;
        let phones = model.config().fusion_mode.uses_phones().then_some(phones.as_slice());
        let memory = model.encode_memory(params, &Source::new(&ex.feats, phones))?;
        let g = model.generate(params, &memory, max_len, beam)?;
        out.push(tok.target.decode_text(&g.ids)?);
    }
    Ok(out)
}

/// Corpus BLEU of `hypotheses` against up to four references per line.
pub fn score<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[S], references: &[Vec<R>]) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::data(format!(
            "{} hypotheses for {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = hypotheses
        .iter()
        .zip(references)
        .map(|(h, rs)| {
            (
                tokenize_eval(h.as_ref()),
                rs.iter().map(|r| tokenize_eval(r.as_ref())).collect(),
            )
        })
        .collect();
    Ok(corpus_score(&pairs)?)
}

/// BLEU of `hypotheses` against the examples' references.
pub fn score_examples(hypotheses: &[String], examples: &[Example]) -> Result<BleuScore> {
    let refs: Vec<Vec<&str>> = examples
        .iter()
        .map(|e| e.references.iter().map(String::as_str).collect())
        .collect();
    score(hypotheses, &refs)
}
