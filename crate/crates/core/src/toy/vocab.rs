use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NULL_TOKEN: &str = "<null>";
pub const IDENTIFIER: &str = "sks";

/// Closed word list of the synthetic captions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

const WORDS: &[&str] = &[
    NULL_TOKEN,
    IDENTIFIER,
    "a",
    "photo",
    "of",
    "on",
    "background",
    "with",
    "hat",
    "circle",
    "square",
    "triangle",
    "red",
    "green",
    "blue",
    "yellow",
    "gray",
];

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(WORDS.iter().map(|s| s.to_string()).collect())
            .expect("built-in vocabulary is valid")
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(NULL_TOKEN) {
            return Err(Error::Vocabulary(format!("token 0 must be {NULL_TOKEN}")));
        }
        for (i, t) in tokens.iter().enumerate() {
            if tokens[..i].contains(t) {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn null_id(&self) -> usize {
        0
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| Error::Vocabulary(format!("unknown token {token:?}")))
    }

    pub fn identifier_id(&self) -> Result<usize> {
        self.id(IDENTIFIER)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace tokenisation behind a leading null token, so the empty
    /// prompt is the single null token.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        let mut ids = vec![self.null_id()];
        for w in prompt.split_whitespace() {
            ids.push(self.id(w)?);
        }
        Ok(ids)
    }

    /// Checks that `identifier` is the reserved identifier token.
    pub fn check_identifier(&self, identifier: &str) -> Result<usize> {
        if identifier != IDENTIFIER {
            return Err(Error::Vocabulary(format!(
                "{identifier:?} is not a reserved identifier token"
            )));
        }
        self.identifier_id()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_and_errors() {
        let v = Vocabulary::default();
        assert_eq!(v.tokenize("").unwrap(), vec![0]);
        assert_eq!(v.tokenize("  ").unwrap(), vec![0]);
        let ids = v.tokenize("a photo of a sks circle").unwrap();
        assert_eq!(ids[0], 0);
        assert_eq!(ids[5], v.identifier_id().unwrap());
        assert!(matches!(v.tokenize("a dog"), Err(Error::Vocabulary(_))));
        assert!(v.check_identifier("circle").is_err());
    }
}
