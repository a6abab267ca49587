use crate::types::TokenSequence;

/// Maps text to token ids. Backends ship their own; [`HashedTokenizer`] is
/// the offline fallback.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
}

/// Splits on whitespace, keeps runs of alphanumerics/underscore as words and
/// every other character as its own token, then hashes each token (FNV-1a)
/// into a fixed vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedTokenizer {
    pub vocab_size: u32,
}

impl Default for HashedTokenizer {
    fn default() -> Self {
        HashedTokenizer { vocab_size: 1 << 20 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Word and punctuation pieces of `text`, in order.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        let is_word = ch.is_alphanumeric() || ch == '_';
        if is_word {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(start) = word_start.take() {
            pieces.push(&text[start..i]);
        }
        if !ch.is_whitespace() {
            pieces.push(&text[i..i + ch.len_utf8()]);
        }
    }
    if let Some(start) = word_start {
        pieces.push(&text[start..]);
    }
    pieces
}

impl HashedTokenizer {
    pub fn token_id(&self, piece: &str) -> u32 {
        (fnv1a(piece.as_bytes()) % u64::from(self.vocab_size.max(1))) as u32
    }
}

impl Tokenizer for HashedTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).into_iter().map(|p| self.token_id(p)).collect()
    }
}

/// Encodes `text` and keeps the first `max_tokens` ids.
pub fn tokenize(text: &str, tokenizer: &dyn Tokenizer, max_tokens: usize) -> TokenSequence {
    TokenSequence::truncated(tokenizer.encode(text), max_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(
            split_words("sock_set_flag(sk, SOCK_FASYNC);"),
            vec!["sock_set_flag", "(", "sk", ",", "SOCK_FASYNC", ")", ";"]
        );
        assert!(split_words("  \t\n").is_empty());
    }

    #[test]
    fn truncates_to_prefix() {
        let tok = HashedTokenizer::default();
        let text = words(600);
        let full = tok.encode(&text);
        assert_eq!(full.len(), 600);
        let seq = tokenize(&text, &tok, 512);
        assert_eq!(seq.len(), 512);
        assert_eq!(seq.tokens(), &full[..512]);
    }

    #[test]
    fn empty_and_boundary() {
        let tok = HashedTokenizer::default();
        assert_eq!(tokenize("", &tok, 512).len(), 0);
        let text = words(512);
        assert_eq!(tokenize(&text, &tok, 512).tokens(), tok.encode(&text).as_slice());
    }

    #[test]
    fn ids_are_stable() {
        let tok = HashedTokenizer::default();
        assert_eq!(tok.token_id("a"), (0xaf63dc4c8601ec8c_u64 % (1 << 20)) as u32);
    }

    proptest! {
        #[test]
        fn never_exceeds_budget(text in "[ -~\n]{0,300}", k in 1usize..64) {
            let seq = tokenize(&text, &HashedTokenizer::default(), k);
            prop_assert!(seq.len() <= k);
        }
    }
}
