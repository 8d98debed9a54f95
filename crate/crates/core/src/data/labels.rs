use std::collections::BTreeSet;

use super::ClassVocabulary;

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Distinct caption tokens in first-occurrence order.
pub fn distinct_tokens(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    tokenize(text)
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

/// Image-level labels by whole-token exact match of class names and their
/// synonyms/plurals. An empty caption yields an empty set.
pub fn extract_labels(caption: &str, vocab: &ClassVocabulary) -> BTreeSet<usize> {
    tokenize(caption)
        .iter()
        .filter_map(|t| vocab.class_of_token(t))
        .collect()
}
