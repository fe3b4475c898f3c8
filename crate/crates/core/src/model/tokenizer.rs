//! Fixed character-level vocabulary.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const CHARS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,:;#=()+-*/\n?|";
const SPECIALS: usize = 3;

pub const VOCAB_SIZE: usize = SPECIALS + CHARS.len();

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            CHARS
                .find(c)
                .map(|i| i + SPECIALS)
                .ok_or_else(|| Error::contract(format!("character {c:?} is not in the vocabulary")))
        })
        .collect()
}

/// Decodes ids, skipping the special tokens.
pub fn decode(ids: &[usize]) -> String {
    ids.iter().filter(|&&id| id >= SPECIALS).filter_map(|&id| CHARS.as_bytes().get(id - SPECIALS).map(|&b| b as char)).collect()
}

pub fn is_encodable(text: &str) -> bool {
    text.chars().all(|c| CHARS.contains(c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let s = "ann has 3 pens.\nreturn (a*b)?";
        assert_eq!(decode(&encode(s).unwrap()), s);
    }

    #[test]
    fn unknown_character_is_rejected() {
        assert!(encode("naïve").is_err());
    }

    #[test]
    fn ids_are_dense_and_distinct() {
        let ids = encode(CHARS).unwrap();
        assert_eq!(ids, (SPECIALS..VOCAB_SIZE).collect::<Vec<_>>());
        assert_eq!(VOCAB_SIZE, 81);
    }
}
