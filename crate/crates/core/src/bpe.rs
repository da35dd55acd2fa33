//! Byte pair encoding over symbol sequences, with BPE-dropout.
//!
//! The same machinery segments phone strings (one utterance per segment,
//! space-separated labels as base symbols) and target text (one word per
//! segment, characters as base symbols with [`END_OF_WORD`] appended to the
//! last one). Merges never cross segment boundaries.
//!
//! Id layout: `0..4` are the reserved `<pad> <s> </s> <unk>` ids, then one
//! id per alphabet symbol, then one id per distinct merge output.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;
use core::ops::Range;

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::text;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: usize = 4;
pub const RESERVED_SYMBOLS: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const END_OF_WORD: &str = "</w>";
/// Joins the base symbols of a merged unit in its display string.
pub const JOINER: char = '+';

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BpeError {
    #[error("bpe training: empty corpus")]
    EmptyCorpus,
    #[error("bpe training: vocabulary size {vocab_size} is smaller than the {floor} reserved and alphabet ids")]
    VocabTooSmall { vocab_size: usize, floor: usize },
    #[error("alphabet: invalid symbol {0:?}")]
    InvalidSymbol(String),
    #[error("alphabet: duplicate symbol {0:?}")]
    DuplicateSymbol(String),
    #[error("merge table: unknown operand {0:?}")]
    UnknownOperand(String),
    #[error("decode: unknown id {0}")]
    UnknownId(usize),
    #[error("dropout {0} outside [0, 1]")]
    Dropout(f64),
    #[error("corpus statistics: empty corpus")]
    EmptyStats,
}

pub type Result<T> = core::result::Result<T, BpeError>;

/// Ordered, unique base units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<String>,
}

impl Alphabet {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &symbols {
            if s.is_empty()
                || s.chars().any(|c| c.is_whitespace() || c == JOINER)
                || RESERVED_SYMBOLS.contains(&s.as_str())
            {
                return Err(BpeError::InvalidSymbol(s.clone()));
            }
            if !seen.insert(s.as_str()) {
                return Err(BpeError::DuplicateSymbol(s.clone()));
            }
        }
        Ok(Self { symbols })
    }

    /// Sorted set of every symbol appearing in `corpus`.
    pub fn from_corpus<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<Self> {
        let set: BTreeSet<&str> = corpus.iter().flatten().map(|s| s.as_ref()).collect();
        Self::new(set.into_iter().map(String::from).collect())
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// One merge rule: `left + right -> output`, all as token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub output: usize,
}

/// Token ids together with the base-symbol span each id covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    pub spans: Vec<Range<usize>>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Mean compression of a corpus under deterministic encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionStats {
    /// Total encoded length over total base length.
    pub length_ratio: f64,
    /// Fraction of the vocabulary that occurs in the encoded corpus.
    pub vocab_utilization: f64,
    pub base_symbols: usize,
    pub encoded_tokens: usize,
}

/// Alphabet plus an ordered merge table. Merge priority is list order.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    alphabet: Alphabet,
    merges: Vec<Merge>,
    tokens: Vec<String>,
    token_ids: BTreeMap<String, usize>,
    expansions: Vec<Vec<usize>>,
    ranks: BTreeMap<(usize, usize), (usize, usize)>,
}

impl Tokenizer {
    /// Tokenizer with no merges.
    pub fn from_alphabet(alphabet: Alphabet) -> Self {
        let mut tokens: Vec<String> = RESERVED_SYMBOLS.iter().map(|s| s.to_string()).collect();
        tokens.extend(alphabet.symbols.iter().cloned());
        let token_ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let mut expansions: Vec<Vec<usize>> = (0..RESERVED).map(|i| vec![i]).collect();
        expansions.extend((0..alphabet.len()).map(|i| vec![RESERVED + i]));
        Self {
            alphabet,
            merges: Vec::new(),
            tokens,
            token_ids,
            expansions,
            ranks: BTreeMap::new(),
        }
    }

    /// Builds a tokenizer from merges given as token strings, in priority
    /// order. Each operand must be a base symbol or an earlier output.
    pub fn from_merge_strings<S: AsRef<str>>(alphabet: Alphabet, merges: &[(S, S)]) -> Result<Self> {
        let mut tok = Self::from_alphabet(alphabet);
        for (l, r) in merges {
            let left = tok.id_of_token(l.as_ref())?;
            let right = tok.id_of_token(r.as_ref())?;
            tok.push_merge(left, right);
        }
        Ok(tok)
    }

    fn id_of_token(&self, s: &str) -> Result<usize> {
        match self.token_ids.get(s) {
            Some(&id) if id >= RESERVED => Ok(id),
            _ => Err(BpeError::UnknownOperand(s.to_string())),
        }
    }

    fn push_merge(&mut self, left: usize, right: usize) -> usize {
        let joined = format!("{}{}{}", self.tokens[left], JOINER, self.tokens[right]);
        let output = match self.token_ids.get(&joined) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len();
                let mut exp = self.expansions[left].clone();
                exp.extend_from_slice(&self.expansions[right]);
                self.expansions.push(exp);
                self.tokens.push(joined.clone());
                self.token_ids.insert(joined, id);
                id
            }
        };
        let rank = self.merges.len();
        self.ranks.entry((left, right)).or_insert((rank, output));
        self.merges.push(Merge {
            left,
            right,
            output,
        });
        output
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Merges as `(left, right)` token strings, for serialization.
    pub fn merge_strings(&self) -> Vec<(&str, &str)> {
        self.merges
            .iter()
            .map(|m| (self.tokens[m.left].as_str(), self.tokens[m.right].as_str()))
            .collect()
    }

    /// Number of ids, reserved ones included.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Id of a base symbol, or [`UNK_ID`].
    pub fn symbol_id(&self, symbol: &str) -> usize {
        match self.token_ids.get(symbol) {
            Some(&id) if id >= RESERVED && id < RESERVED + self.alphabet.len() => id,
            _ => UNK_ID,
        }
    }

    /// Segments one sequence of base symbols.
    ///
    /// Each round collects the adjacent pairs that have a merge rule, drops
    /// each candidate independently with probability `dropout`, and applies
    /// the highest-priority survivor (leftmost on ties). Encoding stops when
    /// no candidate survives. `dropout == 0` never consults `rng`.
    pub fn encode<S: AsRef<str>>(
        &self,
        symbols: &[S],
        dropout: f64,
        rng: &mut dyn RngCore,
    ) -> Result<EncodedSequence> {
        if !(0.0..=1.0).contains(&dropout) {
            return Err(BpeError::Dropout(dropout));
        }
        let mut ids: Vec<usize> = symbols.iter().map(|s| self.symbol_id(s.as_ref())).collect();
        let mut spans: Vec<Range<usize>> = (0..ids.len()).map(|i| i..i + 1).collect();
        if dropout >= 1.0 {
            return Ok(EncodedSequence { ids, spans });
        }
        loop {
            let mut best: Option<(usize, usize, usize)> = None;
            for i in 0..ids.len().saturating_sub(1) {
                let Some(&(rank, output)) = self.ranks.get(&(ids[i], ids[i + 1])) else {
                    continue;
                };
                if dropout > 0.0 && rng.random::<f64>() < dropout {
                    continue;
                }
                if best.is_none_or(|(r, _, _)| rank < r) {
                    best = Some((rank, i, output));
                }
            }
            let Some((_, i, output)) = best else { break };
            ids[i] = output;
            ids.remove(i + 1);
            let end = spans.remove(i + 1).end;
            spans[i].end = end;
        }
        Ok(EncodedSequence { ids, spans })
    }

    /// Expands ids back to base symbols. Reserved ids map to their
    /// reserved strings (`<unk>` for unknown symbols).
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let exp = self.expansions.get(id).ok_or(BpeError::UnknownId(id))?;
            out.extend(exp.iter().map(|&b| self.tokens[b].clone()));
        }
        Ok(out)
    }

    /// Splits a phone line on whitespace and encodes it as one segment.
    pub fn encode_phones(&self, line: &str, dropout: f64, rng: &mut dyn RngCore) -> Result<EncodedSequence> {
        let symbols: Vec<&str> = line.split_whitespace().collect();
        self.encode(&symbols, dropout, rng)
    }

    /// Normalizes text and encodes it word by word.
    pub fn encode_text(&self, text: &str, dropout: f64, rng: &mut dyn RngCore) -> Result<EncodedSequence> {
        let mut ids = Vec::new();
        let mut spans = Vec::new();
        let mut offset = 0;
        for word in text::words(text) {
            let units = word_units(&word);
            let enc = self.encode(&units, dropout, rng)?;
            ids.extend(enc.ids);
            spans.extend(enc.spans.into_iter().map(|s| s.start + offset..s.end + offset));
            offset += units.len();
        }
        Ok(EncodedSequence { ids, spans })
    }

    /// Inverse of [`encode_text`](Self::encode_text). Reserved ids other
    /// than `<unk>` are skipped.
    pub fn decode_text(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id < RESERVED && id != UNK_ID {
                continue;
            }
            for unit in self.decode(&[id])? {
                match unit.strip_suffix(END_OF_WORD) {
                    Some(stem) => {
                        out.push_str(stem);
                        out.push(' ');
                    }
                    None => out.push_str(&unit),
                }
            }
        }
        Ok(out.trim_end().to_string())
    }

    /// Compression of `corpus` under deterministic encoding.
    pub fn compression_stats<S: AsRef<str>>(&self, corpus: &[Vec<S>]) -> Result<CompressionStats> {
        let mut base = 0;
        let mut encoded = 0;
        let mut used = BTreeSet::new();
        let mut rng = NoRng;
        for seq in corpus {
            let enc = self.encode(seq, 0.0, &mut rng)?;
            base += seq.len();
            encoded += enc.len();
            used.extend(enc.ids);
        }
        if base == 0 {
            return Err(BpeError::EmptyStats);
        }
        Ok(CompressionStats {
            length_ratio: encoded as f64 / base as f64,
            vocab_utilization: used.len() as f64 / self.vocab_size() as f64,
            base_symbols: base,
            encoded_tokens: encoded,
        })
    }
}

/// Characters of a word, the last one carrying [`END_OF_WORD`].
pub fn word_units(word: &str) -> Vec<String> {
    let mut units: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    if let Some(last) = units.last_mut() {
        last.push_str(END_OF_WORD);
    }
    units
}

/// Base-unit segments of a text corpus: one per normalized word.
pub fn text_segments<S: AsRef<str>>(texts: &[S]) -> Vec<Vec<String>> {
    texts
        .iter()
        .flat_map(|t| text::words(t.as_ref()))
        .map(|w| word_units(&w))
        .collect()
}

/// Base-unit segments of a phone corpus: one per line.
pub fn phone_segments<S: AsRef<str>>(lines: &[S]) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| l.as_ref().split_whitespace().map(String::from).collect())
        .collect()
}

/// An rng for deterministic paths; never called when dropout is zero.
struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic encoding drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic encoding drew a random number")
    }
    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("deterministic encoding drew a random number")
    }
}

/// Deterministic encoding without an rng.
pub fn encode_deterministic<S: AsRef<str>>(tok: &Tokenizer, symbols: &[S]) -> EncodedSequence {
    tok.encode(symbols, 0.0, &mut NoRng)
        .expect("dropout 0 is always valid")
}

/// Learns merges by repeatedly joining the most frequent adjacent pair.
///
/// Stops when `vocab_size` ids (reserved and alphabet included) are
/// spent or no pair occurs at least twice. Equal counts are broken by the
/// lexicographically smaller `(left, right)` token-string pair.
pub fn train_bpe<S: AsRef<str>>(corpus: &[Vec<S>], vocab_size: usize) -> Result<Tokenizer> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(BpeError::EmptyCorpus);
    }
    let alphabet = Alphabet::from_corpus(corpus)?;
    let floor = RESERVED + alphabet.len();
    if vocab_size < floor {
        return Err(BpeError::VocabTooSmall { vocab_size, floor });
    }
    let mut tok = Tokenizer::from_alphabet(alphabet);

    // Identical segments are counted once with a weight.
    let mut uniq: BTreeMap<Vec<usize>, i64> = BTreeMap::new();
    for seg in corpus {
        let ids: Vec<usize> = seg.iter().map(|s| tok.symbol_id(s.as_ref())).collect();
        if ids.len() >= 2 {
            *uniq.entry(ids).or_insert(0) += 1;
        }
    }
    let (mut seqs, freqs): (Vec<Vec<usize>>, Vec<i64>) = uniq.into_iter().unzip();

    let mut counts: BTreeMap<(usize, usize), i64> = BTreeMap::new();
    let mut locations: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for (si, seq) in seqs.iter().enumerate() {
        for w in seq.windows(2) {
            *counts.entry((w[0], w[1])).or_insert(0) += freqs[si];
            locations.entry((w[0], w[1])).or_default().insert(si);
        }
    }

    type Entry = (i64, Reverse<(String, String)>, (usize, usize));
    let entry = |tok: &Tokenizer, pair: (usize, usize), count: i64| -> Entry {
        (
            count,
            Reverse((tok.tokens[pair.0].clone(), tok.tokens[pair.1].clone())),
            pair,
        )
    };
    let mut heap: BinaryHeap<Entry> = counts.iter().map(|(&p, &c)| entry(&tok, p, c)).collect();

    let mut budget = vocab_size - floor;
    while budget > 0 {
        let Some((count, _, pair)) = heap.pop() else { break };
        if counts.get(&pair).copied().unwrap_or(0) != count {
            continue;
        }
        if count < 2 {
            break;
        }
        let output = tok.push_merge(pair.0, pair.1);
        budget -= 1;

        let affected: Vec<usize> = locations
            .remove(&pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        let mut touched = BTreeSet::new();
        for si in affected {
            let f = freqs[si];
            let seq = &mut seqs[si];
            for w in seq.windows(2) {
                let p = (w[0], w[1]);
                *counts.get_mut(&p).expect("counted pair") -= f;
                touched.insert(p);
            }
            let mut merged = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
                    merged.push(output);
                    i += 2;
                } else {
                    merged.push(seq[i]);
                    i += 1;
                }
            }
            *seq = merged;
            for w in seq.windows(2) {
                let p = (w[0], w[1]);
                *counts.entry(p).or_insert(0) += f;
                locations.entry(p).or_default().insert(si);
                touched.insert(p);
            }
        }
        for p in touched {
            let c = counts[&p];
            if c <= 0 {
                counts.remove(&p);
            } else {
                heap.push(entry(&tok, p, c));
            }
        }
    }
    Ok(tok)
}
