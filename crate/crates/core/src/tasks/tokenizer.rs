use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

/// One token: optional single leading space, then a word, a two-digit
/// group, a `:param` / `"""` marker, or one punctuation character.
fn pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#" ?(?::param|"""|[A-Za-z_]+|[0-9]{2}|[0-9]|[^\sA-Za-z_0-9])"#)
            .expect("token pattern compiles")
    })
}

/// Splits text into token strings. Concatenating the pieces reproduces the
/// input; text the pattern cannot cover (runs of whitespace, other
/// separators) is reported as an unknown word.
pub fn pretokenize(text: &str) -> Result<Vec<&str>> {
    let mut pieces = Vec::new();
    let mut end = 0;
    for m in pattern().find_iter(text) {
        if m.start() != end {
            return Err(Error::UnknownWord(text[end..m.start()].to_string()));
        }
        pieces.push(m.as_str());
        end = m.end();
    }
    if end != text.len() {
        return Err(Error::UnknownWord(text[end..].to_string()));
    }
    Ok(pieces)
}

/// Word-level tokenizer over a fixed vocabulary.
///
/// Tokens carry their leading space (`" Tiffany"` and `"Tiffany"` are
/// distinct words), so detokenizing is plain concatenation and round-trips
/// any text the templates produce. Years split into two-digit tokens:
/// `" 1694"` is `" 16"` followed by `"94"`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Malformed(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Tokenizer { words, index })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.words.len(),
            })
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        pretokenize(text)?.into_iter().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        ids.iter().map(|&id| self.word(id)).collect()
    }

    /// The vocabulary as a JSON array of words in id order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.words).expect("word list serializes")
    }

    pub fn from_json(document: &str) -> Result<Self> {
        let words: Vec<String> =
            serde_json::from_str(document).map_err(|e| Error::Malformed(e.to_string()))?;
        Tokenizer::from_words(words)
    }
}
