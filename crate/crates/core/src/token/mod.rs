//! Word-level vocabulary with structural special tokens.
//!
//! Ids are laid out as: the twelve special tokens, then `[Person1..Person15]`,
//! then surface words ordered by descending count and lexicographically.
//! Encoding lowercases and whitespace-tokenizes; a `[PersonN]` token is
//! matched case-sensitively and kept as a single id. Out-of-vocabulary words
//! map to UNK.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{parse_person_token, Corpus, Relation};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const END: u32 = 2;
pub const S_IMG: u32 = 3;
pub const E_IMG: u32 = 4;
pub const S_EVENT: u32 = 5;
pub const E_EVENT: u32 = 6;
pub const S_PLACE: u32 = 7;
pub const E_PLACE: u32 = 8;
pub const REL_BEFORE: u32 = 9;
pub const REL_INTENT: u32 = 10;
pub const REL_AFTER: u32 = 11;

pub const N_SPECIALS: u32 = 12;
pub const MAX_PERSONS: u32 = 15;
/// First id assigned to a surface word.
pub const FIRST_WORD: u32 = N_SPECIALS + MAX_PERSONS;

const SPECIAL_NAMES: [(&str, u32); 12] = [
    ("<pad>", PAD),
    ("<unk>", UNK),
    ("<end>", END),
    ("<s_img>", S_IMG),
    ("<e_img>", E_IMG),
    ("<s_event>", S_EVENT),
    ("<e_event>", E_EVENT),
    ("<s_place>", S_PLACE),
    ("<e_place>", E_PLACE),
    ("<before>", REL_BEFORE),
    ("<intent>", REL_INTENT),
    ("<after>", REL_AFTER),
];

/// A token id sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("corpus has no events to build a vocabulary from")]
    EmptyCorpus,
    #[error("token id {0} out of range for vocabulary of size {1}")]
    IdOutOfRange(u32, u32),
    #[error("vocabulary file is inconsistent: {0}")]
    BadFile(String),
}

/// Frozen token <-> id bijection.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    words: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    specials: Vec<(String, u32)>,
    max_persons: u32,
}

impl Vocab {
    /// Specials, person tokens, then corpus words with frequency >= `min_count`.
    pub fn build(corpus: &Corpus, min_count: u32) -> Result<Vocab, VocabError> {
        if corpus.events().next().is_none() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut counts: HashMap<String, u32> = HashMap::new();
        let mut bump = |text: &str| {
            for tok in text.split_whitespace() {
                if parse_person_token(tok).is_some() {
                    continue;
                }
                *counts.entry(tok.to_lowercase()).or_insert(0) += 1;
            }
        };
        for (_, _, event) in corpus.events() {
            bump(&event.event_text);
            bump(&event.place_text);
            for inf in &event.inferences {
                bump(&inf.text);
            }
        }

        let mut words: Vec<(String, u32)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|(s, _)| s.to_string()).collect();
        for n in 1..=MAX_PERSONS {
            tokens.push(format!("[Person{n}]"));
        }
        tokens.extend(words.into_iter().map(|(w, _)| w));

        let lookup = tokens
            .iter()
            .enumerate()
            .skip(FIRST_WORD as usize)
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, words: lookup })
    }

    pub fn size(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn person_token(tag: u32) -> Option<u32> {
        (1..=MAX_PERSONS).contains(&tag).then(|| N_SPECIALS + tag - 1)
    }

    /// The person tag carried by `id`, if it is a person token.
    pub fn person_of(id: u32) -> Option<u32> {
        (N_SPECIALS..FIRST_WORD).contains(&id).then(|| id - N_SPECIALS + 1)
    }

    pub fn relation_token(relation: Relation) -> u32 {
        match relation {
            Relation::Before => REL_BEFORE,
            Relation::Intent => REL_INTENT,
            Relation::After => REL_AFTER,
        }
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.words.get(word).copied()
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        let ids = text
            .split_whitespace()
            .map(|tok| {
                if let Some(id) = parse_person_token(tok).and_then(Vocab::person_token) {
                    return id;
                }
                self.words.get(&tok.to_lowercase()).copied().unwrap_or(UNK)
            })
            .collect();
        TokenSeq::new(ids)
    }

    /// Renders a sequence back to surface text. Structural tokens vanish,
    /// UNK renders as `<unk>` (which re-encodes to UNK), persons keep their
    /// bracketed form.
    pub fn decode(&self, seq: &TokenSeq) -> Result<String, VocabError> {
        let mut words = Vec::new();
        for &id in &seq.ids {
            if id >= self.size() {
                return Err(VocabError::IdOutOfRange(id, self.size()));
            }
            match id {
                UNK => words.push("<unk>"),
                _ if id < N_SPECIALS => {}
                _ => words.push(&self.tokens[id as usize]),
            }
        }
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            specials: SPECIAL_NAMES.iter().map(|&(s, i)| (s.to_string(), i)).collect(),
            max_persons: MAX_PERSONS,
        };
        serde_json::to_string(&file).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Vocab, VocabError> {
        let file: VocabFile = serde_json::from_str(json).map_err(|e| VocabError::BadFile(e.to_string()))?;
        if file.max_persons != MAX_PERSONS {
            return Err(VocabError::BadFile(format!("max_persons {} unsupported", file.max_persons)));
        }
        for (name, id) in &file.specials {
            if file.tokens.get(*id as usize).map(|s| s.as_str()) != Some(name.as_str()) {
                return Err(VocabError::BadFile(format!("special {name:?} not at id {id}")));
            }
        }
        if file.tokens.len() < FIRST_WORD as usize {
            return Err(VocabError::BadFile("token list shorter than specials + persons".into()));
        }
        let words = file
            .tokens
            .iter()
            .enumerate()
            .skip(FIRST_WORD as usize)
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Vocab {
            tokens: file.tokens,
            words,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::tiny_scene;
    use crate::graph::{Corpus, Inference, PersonTag};

    fn corpus_with_texts(event: &str, inferences: &[&str]) -> Corpus {
        let mut entry = tiny_scene("s0", 4, 2);
        entry.events[0].event_text = event.into();
        entry.events[0].inferences = inferences
            .iter()
            .map(|t| Inference {
                relation: Relation::Before,
                text: (*t).to_string(),
                subject: PersonTag(1),
            })
            .collect();
        Corpus::from_entries(4, vec![entry]).unwrap()
    }

    #[test]
    fn vocab_size_is_specials_plus_persons_plus_words() {
        // Exactly 10 distinct surface words.
        let corpus = corpus_with_texts("[Person1] orders a drink", &["walk into the bar", "pay for one beer"]);
        // words: orders a drink | walk into the bar | pay for one beer (place text
        // "at the bar" adds "at"): orders,a,drink,walk,into,the,bar,pay,for,one,beer,at = 12
        let vocab = Vocab::build(&corpus, 1).unwrap();
        assert_eq!(vocab.size(), N_SPECIALS + MAX_PERSONS + 12);

        // Check against an independent count of the distinct words.
        let mut distinct: std::collections::BTreeSet<&str> = Default::default();
        for text in ["[Person1] orders a drink", "at the bar", "walk into the bar", "pay for one beer"] {
            for w in text.split_whitespace() {
                if parse_person_token(w).is_none() {
                    distinct.insert(w);
                }
            }
        }
        assert_eq!(vocab.size(), N_SPECIALS + MAX_PERSONS + distinct.len() as u32);
    }

    #[test]
    fn min_count_filters_to_unk() {
        let corpus = corpus_with_texts("[Person1] waves hello", &["walk away"]);
        let vocab = Vocab::build(&corpus, 2).unwrap();
        // "the"/"bar" appear twice via place text duplication? place text is per
        // event, single event: every word unique except place words appear once.
        // All words below min_count collapse to UNK.
        let seq = vocab.encode("waves hello");
        assert!(seq.ids.iter().all(|&id| id == UNK));
    }

    #[test]
    fn build_is_deterministic() {
        let corpus = corpus_with_texts("[Person1] orders a drink", &["walk into the bar"]);
        let a = Vocab::build(&corpus, 1).unwrap();
        let b = Vocab::build(&corpus, 1).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn encode_examples() {
        let corpus = corpus_with_texts("[Person1] orders a drink", &["order a drink"]);
        let vocab = Vocab::build(&corpus, 1).unwrap();
        let seq = vocab.encode("order a drink");
        assert_eq!(seq.len(), 3);
        assert!(seq.ids.iter().all(|&id| id >= FIRST_WORD));

        let seq = vocab.encode("[Person1] sits");
        assert_eq!(seq.ids[0], Vocab::person_token(1).unwrap());
        assert_eq!(seq.ids[1], UNK); // "sits" is not in this corpus

        assert_eq!(vocab.encode("zzzz").ids, vec![UNK]);
    }

    #[test]
    fn decode_examples() {
        let corpus = corpus_with_texts("[Person1] orders a drink", &["order a drink"]);
        let vocab = Vocab::build(&corpus, 1).unwrap();
        let seq = vocab.encode("Order A Drink");
        assert_eq!(vocab.decode(&seq).unwrap(), "order a drink");

        assert_eq!(vocab.decode(&TokenSeq::new(vec![PAD, PAD])).unwrap(), "");
        assert_eq!(vocab.decode(&TokenSeq::new(vec![E_EVENT])).unwrap(), "");
        assert!(vocab.decode(&TokenSeq::new(vec![vocab.size()])).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let corpus = corpus_with_texts("[Person1] orders a drink", &["order a drink"]);
        let vocab = Vocab::build(&corpus, 1).unwrap();
        let back = Vocab::from_json(&vocab.to_json()).unwrap();
        assert_eq!(back, vocab);
    }

    #[test]
    fn relation_tokens_are_distinct_specials() {
        let ids: Vec<u32> = Relation::ALL.iter().map(|&r| Vocab::relation_token(r)).collect();
        assert_eq!(ids, vec![REL_BEFORE, REL_INTENT, REL_AFTER]);
    }
}
