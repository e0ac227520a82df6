//! Tokenizer contract and the default byte-level tokenizer.
//!
//! The byte tokenizer maps each byte to its own id (0-255) with exact byte
//! spans, which removes any external vocabulary dependency. Other
//! tokenizers can be plugged in behind the same trait as long as they
//! report byte spans.

use crate::error::{MiError, Result};

/// One token: id plus the half-open byte span it covers in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<Token>;
    fn decode(&self, ids: &[u32]) -> Result<String>;
    /// Number of ids the tokenizer can emit; models must have at least
    /// this many vocabulary entries to consume its output.
    fn vocab_floor(&self) -> u32;
}

/// Default tokenizer: one byte, one id.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<Token> {
        text.bytes()
            .enumerate()
            .map(|(i, b)| Token {
                id: b as u32,
                start: i,
                end: i + 1,
            })
            .collect()
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes: Vec<u8> = ids
            .iter()
            .map(|&id| {
                u8::try_from(id)
                    .map_err(|_| MiError::invalid(format!("byte tokenizer: id {id} out of range")))
            })
            .collect::<Result<_>>()?;
        String::from_utf8(bytes)
            .map_err(|e| MiError::invalid(format!("byte tokenizer: invalid utf-8: {e}")))
    }

    fn vocab_floor(&self) -> u32 {
        256
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_string() {
        assert!(ByteTokenizer.encode("").is_empty());
    }

    #[test]
    fn byte_identity_with_spans() {
        let toks = ByteTokenizer.encode("AB");
        assert_eq!(toks.len(), 2);
        assert_eq!(toks[0], Token { id: 65, start: 0, end: 1 });
        assert_eq!(toks[1], Token { id: 66, start: 1, end: 2 });
    }

    #[test]
    fn roundtrip() {
        let text = "bytes → ids → bytes";
        let ids: Vec<u32> = ByteTokenizer.encode(text).iter().map(|t| t.id).collect();
        assert_eq!(ByteTokenizer.decode(&ids).unwrap(), text);
    }
}
