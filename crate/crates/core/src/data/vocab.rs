//! Word-level tokenizer and frequency-ordered vocabulary.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;

const PAD_TOKEN: &str = "<pad>";
const EOS_TOKEN: &str = "<eos>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercased word-level split: alphanumeric runs are words, any other
/// non-whitespace character is its own token.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token-to-id bijection with fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from a word stream: sorted by descending
    /// frequency, ties broken lexicographically, after the reserved ids.
    /// The same corpus always yields a byte-identical vocabulary.
    pub fn build<'a>(words: impl Iterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for w in words {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        tokens.extend(entries.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens).expect("reserved prefix just written")
    }

    /// Rebuilds a vocabulary from its serialized token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < 3
            || tokens[PAD_ID] != PAD_TOKEN
            || tokens[EOS_ID] != EOS_TOKEN
            || tokens[UNK_ID] != UNK_TOKEN
        {
            return Err("vocabulary must start with <pad>, <eos>, <unk>".into());
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    /// Target encoding: tokenized words plus a trailing EOS.
    pub fn encode_target(&self, text: &str) -> Vec<usize> {
        let mut ids = tokenize(text, self);
        ids.push(EOS_ID);
        ids
    }

    /// Restores the id lookup after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// Encodes text to token ids; unknown words map to `UNK_ID`. No EOS is
/// appended (targets get one via [`Vocabulary::encode_target`]).
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    tokenize_words(text).iter().map(|w| vocab.id_of(w)).collect()
}

/// Joins tokens back into text, skipping PAD and EOS. Punctuation that
/// attaches to the preceding word gets no leading space, so canonical
/// lowercase text round-trips exactly.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    let mut suppress_space = false;
    for &id in ids {
        if id == PAD_ID || id == EOS_ID {
            continue;
        }
        let tok = vocab.token(id);
        let attach_left = matches!(tok, "," | "!" | "?" | ":" | ";" | "." | ")");
        if !out.is_empty() && !attach_left && !suppress_space {
            out.push(' ');
        }
        out.push_str(tok);
        suppress_space = tok == "(";
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_vocab() -> Vocabulary {
        Vocabulary::build(
            tokenize_words("good , food ! the soup was cold task : polarity | sentence aspect")
                .iter()
                .map(|s| s.as_str()),
        )
    }

    #[test]
    fn empty_text_tokenizes_empty() {
        let vocab = sample_vocab();
        assert!(tokenize("", &vocab).is_empty());
    }

    #[test]
    fn punctuation_splits() {
        let vocab = sample_vocab();
        let ids = tokenize("Good, food!", &vocab);
        let words: Vec<&str> = ids.iter().map(|&i| vocab.token(i)).collect();
        assert_eq!(words, vec!["good", ",", "food", "!"]);
        assert_eq!(detokenize(&ids, &vocab), "good, food!");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let vocab = sample_vocab();
        let ids = tokenize("zebra soup", &vocab);
        assert_eq!(ids[0], UNK_ID);
        assert_ne!(ids[1], UNK_ID);
    }

    #[test]
    fn build_is_deterministic() {
        let words = ["b", "a", "a", "c", "b", "a"];
        let v1 = Vocabulary::build(words.iter().copied());
        let v2 = Vocabulary::build(words.iter().copied());
        assert_eq!(v1.tokens(), v2.tokens());
        // frequency desc, then lexicographic
        assert_eq!(v1.token(3), "a");
        assert_eq!(v1.token(4), "b");
        assert_eq!(v1.token(5), "c");
    }

    #[test]
    fn template_prompt_roundtrips() {
        let prompt = "task: polarity | sentence: the soup was cold | aspect: soup";
        let vocab = Vocabulary::build(tokenize_words(prompt).iter().map(|s| s.as_str()));
        let ids = tokenize(prompt, &vocab);
        assert_eq!(detokenize(&ids, &vocab), prompt);
    }

    #[test]
    fn target_encoding_appends_eos() {
        let vocab = sample_vocab();
        let ids = vocab.encode_target("good food");
        assert_eq!(*ids.last().unwrap(), EOS_ID);
        assert_eq!(ids.len(), 3);
    }
}
