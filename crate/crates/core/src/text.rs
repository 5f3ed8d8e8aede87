//! Tokenization and deterministic text serialization helpers.
//!
//! Every component that compares, hashes, or overlaps text goes through
//! [`tokenize`] so the notion of "token" is identical pipeline-wide.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

/// Splits on whitespace, then strips leading/trailing non-alphanumerics from
/// each word ("Horror," -> "Horror", "(1995)" -> "1995"). Inner punctuation is
/// kept ("Sci-Fi" stays one token). Case is preserved.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace()
        .filter_map(|w| {
            let t = w.trim_matches(|c: char| !c.is_alphanumeric());
            if t.is_empty() {
                None
            } else {
                Some(t.to_string())
            }
        })
        .collect()
}

pub fn token_set(s: &str) -> BTreeSet<String> {
    tokenize(s).into_iter().collect()
}

/// First `n` tokens re-joined with single spaces; empty string if no tokens.
pub fn truncate_tokens(s: &str, n: usize) -> String {
    tokenize(s).into_iter().take(n).collect::<Vec<_>>().join(" ")
}

/// Canonical "key: value" lines in ascending key order. This exact form is a
/// prefix segment of every augmented item text, so it must never change shape.
pub fn serialize_metadata(metadata: &BTreeMap<String, String>) -> String {
    metadata
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Separator between the serialized metadata segment and the generated
/// description inside an augmented item text.
pub const METADATA_SEPARATOR: &str = "\n\n";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_edge_punctuation_only() {
        assert_eq!(tokenize("Alien (1979), Sci-Fi!"), vec!["Alien", "1979", "Sci-Fi"]);
    }

    #[test]
    fn tokenize_drops_pure_punctuation() {
        assert_eq!(tokenize("--- ** !!"), Vec::<String>::new());
    }

    #[test]
    fn tokenize_preserves_case() {
        assert_eq!(tokenize("War and PEACE"), vec!["War", "and", "PEACE"]);
    }

    #[test]
    fn truncate_keeps_first_n() {
        assert_eq!(truncate_tokens("a b c d", 2), "a b");
        assert_eq!(truncate_tokens("a b", 8), "a b");
    }

    #[test]
    fn metadata_serialization_is_key_ordered() {
        let mut m = BTreeMap::new();
        m.insert("title".to_string(), "Alien".to_string());
        m.insert("genre".to_string(), "Sci-Fi Horror".to_string());
        assert_eq!(serialize_metadata(&m), "genre: Sci-Fi Horror\ntitle: Alien");
    }
}
