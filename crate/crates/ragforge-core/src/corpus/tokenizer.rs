//! Whitespace tokenizer with punctuation trimming.

/// Splits `text` into lowercased word tokens.
///
/// Tokens are whitespace-separated runs with non-alphanumeric characters
/// trimmed from both ends; interior punctuation ("don't", "covid-19") is
/// kept. Runs that trim to nothing are dropped, so no token is ever empty.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}

/// Splits `text` into sentences on `.`, `!` and `?` boundaries.
///
/// Used to turn free-form abstract text into candidate reconstruction
/// statements; empty sentences are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    text.split(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_splits() {
        assert_eq!(tokenize("The Quick Fox"), vec!["the", "quick", "fox"]);
    }

    #[test]
    fn trims_edge_punctuation_keeps_interior() {
        assert_eq!(
            tokenize("Don't stop, (really)!"),
            vec!["don't", "stop", "really"]
        );
        assert_eq!(tokenize("covid-19."), vec!["covid-19"]);
    }

    #[test]
    fn drops_pure_punctuation_tokens() {
        assert_eq!(tokenize("-- ... !!"), Vec::<String>::new());
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("   \t\n "), Vec::<String>::new());
    }

    #[test]
    fn never_produces_empty_tokens() {
        for text in ["a .. b", "x", "?!", "1. 2. 3."] {
            assert!(tokenize(text).iter().all(|t| !t.is_empty()));
        }
    }

    #[test]
    fn retokenizing_joined_tokens_is_identity() {
        let toks = tokenize("The spike protein binds ACE2 receptors, per early reports.");
        let rejoined = toks.join(" ");
        assert_eq!(tokenize(&rejoined), toks);
    }

    #[test]
    fn sentence_split_basic() {
        assert_eq!(
            split_sentences("One fact. Another fact! A question? "),
            vec!["One fact", "Another fact", "A question"]
        );
        assert_eq!(split_sentences("...."), Vec::<String>::new());
    }
}
