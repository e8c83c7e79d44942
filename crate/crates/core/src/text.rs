//! Tokenisation and stable hashing shared by the toy backends.

/// Lowercases and splits on whitespace, stripping punctuation at token edges.
///
/// Apostrophes inside a word are kept, so `"I'd like"` yields `["i'd", "like"]`.
/// A text made only of punctuation yields a single token of its trimmed form so
/// that every non-empty text has at least one token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens: Vec<String> = text
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect();
    if tokens.is_empty() {
        let trimmed = text.trim();
        if !trimmed.is_empty() {
            tokens.push(trimmed.to_lowercase());
        }
    }
    tokens
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ b as u64).wrapping_mul(FNV_PRIME)
    })
}

/// Bin index of a token under `bins` hash buckets.
pub fn hash_bin(token: &str, bins: usize) -> usize {
    (fnv1a64(token.as_bytes()) % bins as u64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_edges_keeps_inner_apostrophe() {
        assert_eq!(
            tokenize("I'd like to open a savings account, please!"),
            vec!["i'd", "like", "to", "open", "a", "savings", "account", "please"]
        );
    }

    #[test]
    fn punctuation_only_text_is_one_token() {
        assert_eq!(tokenize(" ?! "), vec!["?!"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
