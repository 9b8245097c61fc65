//! Tokenization shared by intent lexicons, methodology matching and tool discovery.

use std::collections::BTreeSet;
use std::sync::OnceLock;

const STOPWORDS_LIST: &str = include_str!("stopwords.txt");

fn stopwords() -> &'static BTreeSet<&'static str> {
    static WORDS: OnceLock<BTreeSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        STOPWORDS_LIST
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty() && !w.starts_with('#'))
            .collect()
    })
}

pub fn is_stopword(word: &str) -> bool {
    stopwords().contains(word)
}

/// Case-folded alphanumeric tokens in order of appearance, stop-words removed.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !is_stopword(t))
        .collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().collect()
}

/// Number of distinct tokens shared by both texts.
pub fn overlap_count(a: &str, b: &str) -> usize {
    let left = token_set(a);
    let right = token_set(b);
    left.intersection(&right).count()
}
