//! Character vocabulary: 26 letters, 10 digits, four punctuation marks,
//! space, and the sentence delimiters. CTC extends it with a blank at label 0.

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 43;
pub const SOS: usize = 41;
pub const EOS: usize = 42;
pub const SPACE: usize = 40;
/// Blank label in the CTC output alphabet; vocabulary token `i` is CTC label `i + 1`.
pub const CTC_BLANK: usize = 0;
pub const CTC_ALPHABET_SIZE: usize = VOCAB_SIZE + 1;

pub const SOS_SYMBOL: &str = "<s>";
pub const EOS_SYMBOL: &str = "</s>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut symbols: Vec<String> = ('a'..='z').map(String::from).collect();
        symbols.extend(('0'..='9').map(String::from));
        symbols.extend([".", "'", "-", "/", " "].map(String::from));
        symbols.push(SOS_SYMBOL.into());
        symbols.push(EOS_SYMBOL.into());
        Self { symbols }
    }

    /// Rebuilds a vocabulary from a symbol listing, e.g. one read from a checkpoint.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let v = Self { symbols };
        if v != Self::standard() {
            return Err(Error::Validation(
                "vocabulary listing differs from the built-in 43-token vocabulary".into(),
            ));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, token: usize) -> &str {
        &self.symbols[token]
    }

    pub fn char_to_token(&self, ch: char) -> Option<usize> {
        match ch {
            'a'..='z' => Some(ch as usize - 'a' as usize),
            '0'..='9' => Some(26 + ch as usize - '0' as usize),
            '.' => Some(36),
            '\'' => Some(37),
            '-' => Some(38),
            '/' => Some(39),
            ' ' => Some(SPACE),
            _ => None,
        }
    }

    /// Encodes transcript text; fails on the first character outside the vocabulary.
    pub fn encode(&self, text: &str) -> std::result::Result<Vec<usize>, char> {
        text.chars()
            .map(|c| self.char_to_token(c).ok_or(c))
            .collect()
    }

    /// Decodes tokens to text, skipping sentence delimiters.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != SOS && t != EOS && t < self.symbols.len())
            .map(|&t| self.symbols[t].as_str())
            .collect()
    }

    /// Characters that may appear in written transcripts.
    pub fn transcript_chars(&self) -> impl Iterator<Item = char> + '_ {
        self.symbols[..SOS].iter().filter_map(|s| s.chars().next())
    }
}

pub fn to_ctc_labels(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().map(|t| t + 1).collect()
}

pub fn from_ctc_labels(labels: &[usize]) -> Vec<usize> {
    labels
        .iter()
        .filter(|&&l| l != CTC_BLANK)
        .map(|l| l - 1)
        .collect()
}

/// Strips sentence delimiters.
pub fn strip_delimiters(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != SOS && t != EOS)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let v = Vocabulary::standard();
        assert_eq!(v.len(), VOCAB_SIZE);
        assert_eq!(v.symbols().iter().filter(|s| *s == SOS_SYMBOL).count(), 1);
        assert_eq!(v.symbols().iter().filter(|s| *s == EOS_SYMBOL).count(), 1);
        assert_eq!(v.symbol(SPACE), " ");
        assert_eq!(v.transcript_chars().count(), 41);
        for (i, c) in v.transcript_chars().enumerate() {
            assert_eq!(v.char_to_token(c), Some(i));
        }
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::standard();
        let toks = v.encode("it's 4/5 a.m.-ish").unwrap();
        assert_eq!(v.decode(&toks), "it's 4/5 a.m.-ish");
        assert_eq!(v.encode("no@pe"), Err('@'));
        assert_eq!(v.encode("Caps"), Err('C'));
    }

    #[test]
    fn ctc_label_shift() {
        assert_eq!(to_ctc_labels(&[0, 40]), vec![1, 41]);
        assert_eq!(from_ctc_labels(&[0, 1, 0, 41]), vec![0, 40]);
    }

    #[test]
    fn foreign_listing_rejected() {
        let mut syms = Vocabulary::standard().symbols().to_vec();
        syms.swap(0, 1);
        assert!(Vocabulary::from_symbols(syms).is_err());
    }
}
