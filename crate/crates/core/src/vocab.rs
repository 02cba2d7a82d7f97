use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const FILL: &str = "▁FILL";
pub const SEP: &str = "▁SEP";

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ids over some [`Vocabulary`].
pub type TokenSequence = Vec<usize>;

/// Dense id ↔ symbol table with the four special ids first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    name: String,
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    name: String,
    symbols: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        let index = f.symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocabulary {
            name: f.name,
            symbols: f.symbols,
            index,
        }
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            name: v.name,
            symbols: v.symbols,
        }
    }
}

impl Vocabulary {
    /// Specials followed by `symbols` in order, duplicates dropped.
    pub fn new<I, S>(name: &str, symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            name: name.to_string(),
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        for s in symbols {
            v.push(s.into());
        }
        v
    }

    fn push(&mut self, s: String) {
        if !self.index.contains_key(&s) {
            self.index.insert(s.clone(), self.symbols.len());
            self.symbols.push(s);
        }
    }

    /// Characters: space and a–z.
    pub fn characters() -> Self {
        let chars = std::iter::once(' ').chain('a'..='z').map(String::from);
        Vocabulary::new("asr", chars)
    }

    /// Words plus label names and the two label-format markers.
    pub fn words<'a>(words: impl IntoIterator<Item = &'a str>, labels: &[String]) -> Self {
        let mut all: Vec<&str> = vec![FILL, SEP];
        all.extend(labels.iter().map(String::as_str));
        let mut ws: Vec<&str> = words.into_iter().collect();
        ws.sort_unstable();
        ws.dedup();
        all.extend(ws);
        Vocabulary::new("lm", all)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn id_or_unk(&self, symbol: &str) -> usize {
        self.id(symbol).unwrap_or(UNK)
    }

    pub fn symbol(&self, id: usize) -> Result<&str> {
        self.symbols.get(id).map(String::as_str).ok_or(Error::Vocabulary {
            id,
            size: self.symbols.len(),
        })
    }

    pub fn check(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(&id) => Err(Error::Vocabulary { id, size: self.len() }),
            None => Ok(()),
        }
    }

    pub fn encode_chars(&self, text: &str) -> TokenSequence {
        text.chars().map(|c| self.id_or_unk(c.encode_utf8(&mut [0; 4]))).collect()
    }

    pub fn encode_words(&self, text: &str) -> TokenSequence {
        text.split_whitespace().map(|w| self.id_or_unk(w)).collect()
    }

    /// Symbols up to the first eos, specials other than unk skipped.
    fn content<'a>(&'a self, ids: &'a [usize]) -> impl Iterator<Item = &'a str> + 'a {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.symbols.get(i).map_or(SPECIALS[UNK], String::as_str))
    }

    pub fn decode_chars(&self, ids: &[usize]) -> String {
        self.content(ids).collect()
    }

    pub fn decode_words(&self, ids: &[usize]) -> String {
        self.content(ids).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first() {
        let v = Vocabulary::characters();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id(" "), Some(4));
        assert_eq!(v.len(), 4 + 27);
    }

    #[test]
    fn char_round_trip_stops_at_eos() {
        let v = Vocabulary::characters();
        let mut ids = vec![BOS];
        ids.extend(v.encode_chars("set alarm"));
        ids.push(EOS);
        ids.push(v.id("x").unwrap());
        assert_eq!(v.decode_chars(&ids), "set alarm");
        assert_eq!(v.encode_chars("a1")[1], UNK);
    }

    #[test]
    fn word_vocab_and_json_round_trip() {
        let v = Vocabulary::words(["set", "alarm", "set"], &["time".to_string()]);
        assert_eq!(v.id(FILL), Some(4));
        assert_eq!(v.encode_words("set  alrm"), vec![v.id("set").unwrap(), UNK]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(v.check(&[v.len()]).is_err());
    }
}
