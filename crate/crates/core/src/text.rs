//! Word-level tokenizer and vocabulary shared by the encoder and decoder.

use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;

/// Punctuation split into standalone tokens.
const PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '=', '(', ')', '"'];
/// Punctuation glued to the previous token on detokenization.
const CLOSING: &[&str] = &[".", ",", ";", ":", "!", "?", ")"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary file must start with the special tokens {PAD}, {UNK}, {BOS}, {EOS}")]
    MissingSpecials,
    #[error("duplicate token `{0}` in vocabulary")]
    Duplicate(String),
}

/// Splits on whitespace, then separates punctuation into its own tokens.
///
/// A `.` between two digits stays inside the word so decimals such as
/// `25.0` remain single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let decimal_point = c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if PUNCT.contains(&c) && !decimal_point {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Inverse of [`tokenize`] for canonically spaced text.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for tok in tokens {
        let tok = tok.as_ref();
        if !out.is_empty() && !glue_next && !CLOSING.contains(&tok) {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = tok == "(";
    }
    out
}

/// Token/id mapping. Ids 0..=3 are the specials; the on-disk form is one
/// token per line with id equal to the 0-based line index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from a corpus; non-special tokens are sorted so the
    /// result does not depend on corpus order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> Self {
        let mut words = BTreeSet::new();
        for text in corpus {
            words.extend(tokenize(text));
        }
        let mut tokens: Vec<String> = [PAD, UNK, BOS, EOS].iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| ![PAD, UNK, BOS, EOS].contains(&w.as_str())));
        Self::from_tokens(tokens).expect("specials are unique")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.len() < 4 || tokens[..4] != [PAD, UNK, BOS, EOS] {
            return Err(VocabError::MissingSpecials);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// SHA-256 of the on-disk form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Decodes ids to text, skipping special tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&i| i > EOS_ID)
            .map(|&i| self.token(i))
            .collect();
        detokenize(&toks)
    }

    /// `BOS text EOS`.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(16);
        ids.push(BOS_ID);
        ids.extend(self.encode(text));
        ids.push(EOS_ID);
        ids
    }
}
