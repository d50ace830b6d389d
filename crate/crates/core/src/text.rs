//! The one tokenizer shared by retrieval, the mock reward scorer and the
//! evaluation metrics.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Lowercases, splits on Unicode whitespace, strips leading and trailing
/// ASCII punctuation from each token and drops empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_punctuation_and_case() {
        assert_eq!(tokenize("The sky, blue."), ["the", "sky", "blue"]);
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  ... ,, ").is_empty());
    }

    #[test]
    fn whitespace_classes() {
        assert_eq!(tokenize("a  b\tc"), ["a", "b", "c"]);
        assert_eq!(tokenize("a\u{00A0}b\nc"), ["a", "b", "c"]);
    }

    #[test]
    fn inner_punctuation_kept() {
        assert_eq!(tokenize("don't (e.g.)"), ["don't", "e.g"]);
    }

    #[test]
    fn fnv_known_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }
}
