//! Text serialization of a tokenizer:
//!
//! ```text
//! PHONEBPE v1
//! <alphabet size>
//! <one symbol per line>
//! <left>\t<right>   one merge per line, in priority order
//! ```

use std::fs;
use std::path::Path;

use allost_core::bpe::{Alphabet, Tokenizer};

use crate::error::{Error, IoContext, Result};

pub const HEADER: &str = "PHONEBPE v1";

pub fn to_string(tok: &Tokenizer) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    out.push_str(&tok.alphabet().len().to_string());
    out.push('\n');
    for s in tok.alphabet().symbols() {
        out.push_str(s);
        out.push('\n');
    }
    for (l, r) in tok.merge_strings() {
        out.push_str(l);
        out.push('\t');
        out.push_str(r);
        out.push('\n');
    }
    out
}

pub fn from_str(text: &str) -> Result<Tokenizer> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::data(format!("tokenizer file must start with {HEADER:?}")));
    }
    let n: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| Error::data("tokenizer file: missing alphabet size"))?;
    let mut symbols = Vec::with_capacity(n);
    for i in 0..n {
        let s = lines
            .next()
            .ok_or_else(|| Error::data(format!("tokenizer file: alphabet ends after {i} of {n} symbols")))?;
        symbols.push(s.to_string());
    }
    let mut merges = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (l, r) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(format!("tokenizer file: merge {} is not tab-separated", i + 1)))?;
        merges.push((l, r));
    }
    Ok(Tokenizer::from_merge_strings(Alphabet::new(symbols)?, &merges)?)
}

pub fn save(path: &Path, tok: &Tokenizer) -> Result<()> {
    fs::write(path, to_string(tok)).at(path)
}

pub fn load(path: &Path) -> Result<Tokenizer> {
    let text = fs::read_to_string(path).at(path)?;
    from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}
