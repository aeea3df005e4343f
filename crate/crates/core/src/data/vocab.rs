use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::clip::{Color, Direction, ShapeKind};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Every word the caption templates can produce, after the four specials.
    pub fn from_templates() -> Self {
        let mut words: Vec<&str> = vec!["the"];
        words.extend(Color::ALL.iter().map(|c| c.word()));
        words.extend(ShapeKind::ALL.iter().map(|s| s.word()));
        words.extend(["moves", "stays", "still"]);
        words.extend(Direction::ALL.iter().map(|d| d.word()));
        let tokens = SPECIALS.iter().copied().chain(words).map(String::from).collect();
        Self::from_tokens(tokens).expect("template vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Validation(format!("vocabulary must start with {SPECIALS:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Validation(format!("malformed token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Contents of `vocab.txt`: one token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        self.tokens.iter().flat_map(|t| [t.as_str(), "\n"]).collect()
    }

    /// Hex SHA-256 of [`Vocabulary::to_file_string`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_file_string().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Token ids of length exactly `m`, `[CLS]` first and `[PAD]`-filled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    /// `true` at `[PAD]` positions.
    pub pad_mask: Vec<bool>,
}

impl TokenizedText {
    pub fn from_ids(ids: Vec<usize>) -> Self {
        let pad_mask = ids.iter().map(|&i| i == PAD).collect();
        Self { ids, pad_mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, m: usize) -> Result<TokenizedText> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let unknown: Vec<&str> = words.iter().copied().filter(|w| vocab.id(w).is_none()).collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownWord(unknown.join(", ")));
    }
    if words.len() + 1 > m {
        return Err(Error::Contract(format!("{} words plus [CLS] exceed length {m}", words.len())));
    }
    let mut ids = Vec::with_capacity(m);
    ids.push(CLS);
    ids.extend(words.iter().map(|w| vocab.id(w).unwrap()));
    ids.resize(m, PAD);
    Ok(TokenizedText::from_ids(ids))
}

/// Inverse of [`tokenize`]; `[PAD]`, `[CLS]` and `[SEP]` are dropped.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter().filter(|&&i| !matches!(i, PAD | CLS | SEP)).filter_map(|&i| vocab.token(i)).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocabulary::from_templates();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
    }

    #[test]
    fn template_vocabulary_is_small() {
        assert!(Vocabulary::from_templates().len() < 40);
    }

    #[test]
    fn empty_text_is_cls_then_padding() {
        let v = Vocabulary::from_templates();
        let t = tokenize("", &v, 8).unwrap();
        assert_eq!(t.ids, [CLS, PAD, PAD, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(t.pad_mask, [false, true, true, true, true, true, true, true]);
    }

    #[test]
    fn caption_counts_and_round_trips() {
        let v = Vocabulary::from_templates();
        let text = "the red square moves left";
        let t = tokenize(text, &v, 16).unwrap();
        assert_eq!(t.ids.len(), 16);
        assert_eq!(t.pad_mask.iter().filter(|&&p| !p).count(), 6);
        assert_eq!(detokenize(&t.ids, &v), text);
    }

    #[test]
    fn unknown_words_are_listed() {
        let v = Vocabulary::from_templates();
        let err = tokenize("the purple square wobbles", &v, 16).unwrap_err();
        assert!(matches!(err, Error::UnknownWord(ref w) if w == "purple, wobbles"), "{err}");
    }

    #[test]
    fn overlong_text_is_rejected() {
        let v = Vocabulary::from_templates();
        assert!(tokenize("the red square moves left", &v, 5).is_err());
        assert!(tokenize("the red square moves left", &v, 6).is_ok());
    }

    #[test]
    fn malformed_vocab_file_is_rejected() {
        let bad = vec!["[CLS]".to_string(), "[PAD]".into(), "[SEP]".into(), "[MASK]".into()];
        assert!(Vocabulary::from_tokens(bad).is_err());
    }
}
