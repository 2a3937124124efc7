use std::collections::HashMap;

use crate::datagen::caption_words;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Fixed word list: `<pad>`, `<unk>`, then every word the caption generator
/// can emit.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
        for w in caption_words() {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Lowercased whitespace tokens, truncated to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        text.split_whitespace()
            .take(max_len)
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.word(i).unwrap_or("<unk>")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_unknowns() {
        let v = Vocabulary::standard();
        let ids = v.tokenize("Red circle RED zebra", 16);
        assert_eq!(ids, vec![v.id("red"), v.id("circle"), v.id("red"), UNK_ID]);
        assert!(v.tokenize("", 16).is_empty());
        assert_eq!(v.tokenize("a b c d", 2).len(), 2);
    }

    #[test]
    fn round_trip_known_words() {
        let v = Vocabulary::standard();
        let text = "small blue triangle on dotted background";
        let ids = v.tokenize(text, 16);
        assert_eq!(v.detokenize(&ids).join(" "), text);
        for id in 2..v.len() {
            assert_eq!(v.id(v.word(id).unwrap()), id);
        }
    }
}
