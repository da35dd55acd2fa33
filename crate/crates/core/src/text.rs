//! Text normalization shared by the target tokenizer and the BLEU scorer.

use alloc::string::String;
use alloc::vec::Vec;

/// Lowercases and removes every character that is neither alphanumeric
/// nor whitespace.
pub fn normalize(text: &str) -> String {
    text.chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Normalized whitespace-separated words.
pub fn words(text: &str) -> Vec<String> {
    normalize(text)
        .split_whitespace()
        .map(String::from)
        .collect()
}

/// Length in Unicode scalar values after normalization.
pub fn char_len(text: &str) -> usize {
    normalize(text).chars().count()
}
