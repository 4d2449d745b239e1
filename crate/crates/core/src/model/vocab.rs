use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::ontology::{ConceptType, Ontology};
use crate::timeline::{Timeline, Token};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const PAD_SPELLING: &str = "<PAD>";
pub const UNK_SPELLING: &str = "<UNK>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub index: u32,
    pub token: String,
    #[serde(default)]
    pub concept_type: Option<ConceptType>,
}

/// Dense token inventory. Index 0 is padding and 1 is the unknown token; real
/// tokens follow by descending training frequency, ties lexicographic.
#[derive(Debug, Clone)]
pub struct Vocab {
    entries: Vec<VocabEntry>,
    parsed: Vec<Option<Token>>,
    index: HashMap<String, u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<VocabEntry>,
}

impl Vocab {
    pub fn build(timelines: &[Timeline]) -> Result<Vocab, ModelError> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in timelines {
            for tok in t.tokens() {
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let spellings = [PAD_SPELLING.to_string(), UNK_SPELLING.to_string()]
            .into_iter()
            .chain(ranked.into_iter().map(|(s, _)| s));
        Vocab::from_spellings(spellings)
    }

    pub fn from_spellings(spellings: impl IntoIterator<Item = String>) -> Result<Vocab, ModelError> {
        let entries = spellings
            .into_iter()
            .enumerate()
            .map(|(i, token)| VocabEntry { index: i as u32, token, concept_type: None })
            .collect();
        Vocab::from_entries(entries)
    }

    fn from_entries(entries: Vec<VocabEntry>) -> Result<Vocab, ModelError> {
        if entries.len() < 2 || entries[0].token != PAD_SPELLING || entries[1].token != UNK_SPELLING {
            return Err(ModelError::Format("vocab must start with <PAD>, <UNK>".into()));
        }
        let mut index = HashMap::with_capacity(entries.len());
        let mut parsed = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.index as usize != i {
                return Err(ModelError::Format(format!("vocab index {} at position {i}", e.index)));
            }
            if index.insert(e.token.clone(), i as u32).is_some() {
                return Err(ModelError::Format(format!("duplicate vocab token {}", e.token)));
            }
            parsed.push(if i < 2 {
                None
            } else {
                Some(e.token.parse::<Token>().map_err(|err| ModelError::Format(err.to_string()))?)
            });
        }
        Ok(Vocab { entries, parsed, index })
    }

    /// Tags concept entries with their ontology type. Concepts missing from
    /// the ontology keep no type.
    pub fn annotate_types(&mut self, ontology: &Ontology) {
        for (e, tok) in self.entries.iter_mut().zip(&self.parsed) {
            e.concept_type = tok.as_ref().and_then(Token::concept).and_then(|c| ontology.type_of(c).ok());
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn spelling(&self, idx: u32) -> &str {
        &self.entries[idx as usize].token
    }

    /// `None` for the padding and unknown slots.
    pub fn token(&self, idx: u32) -> Option<&Token> {
        self.parsed.get(idx as usize).and_then(Option::as_ref)
    }

    pub fn concept_type(&self, idx: u32) -> Option<ConceptType> {
        self.entries.get(idx as usize).and_then(|e| e.concept_type)
    }

    pub fn lookup(&self, spelling: &str) -> Option<u32> {
        self.index.get(spelling).copied()
    }

    /// Tokens absent from the vocabulary map to [`UNK`].
    pub fn encode(&self, token: &Token) -> u32 {
        match token {
            Token::Pad => PAD,
            t => self.lookup(&t.to_string()).unwrap_or(UNK),
        }
    }

    pub fn encode_timeline(&self, timeline: &Timeline) -> Vec<u32> {
        timeline.tokens().map(|t| self.encode(t)).collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(&VocabFile { tokens: self.entries.clone() })
    }

    pub fn from_json(text: &str) -> Result<Vocab, ModelError> {
        let file: VocabFile = serde_json::from_str(text)?;
        Vocab::from_entries(file.tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeline::TimelineItem;

    fn tl(spellings: &[&str]) -> Timeline {
        let t = "2020-01-01".parse().unwrap();
        Timeline {
            patient_id: "p".into(),
            fragment_index: 0,
            items: spellings.iter().map(|s| TimelineItem { token: s.parse().unwrap(), t }).collect(),
        }
    }

    #[test]
    fn counts_and_orders() {
        let v = Vocab::build(&[tl(&["SEP", "C:A", "C:A", "C:B"])]).unwrap();
        // three distinct real tokens plus the two specials
        assert_eq!(v.len(), 5);
        assert_eq!(v.spelling(PAD), PAD_SPELLING);
        assert_eq!(v.spelling(UNK), UNK_SPELLING);
        assert_eq!(v.spelling(2), "C:A");
        assert_eq!(v.spelling(3), "C:B");
        assert_eq!(v.spelling(4), "SEP");
        assert_eq!(v.encode(&"C:Z".parse().unwrap()), UNK);
    }

    #[test]
    fn deterministic_and_empty() {
        let corpus = [tl(&["SEX:F", "C:x", "SEP", "C:y"]), tl(&["SEX:M", "C:y"])];
        assert_eq!(Vocab::build(&corpus).unwrap(), Vocab::build(&corpus).unwrap());
        assert!(matches!(Vocab::build(&[]), Err(ModelError::EmptyCorpus)));
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::build(&[tl(&["SEX:F", "C:x", "SEP", "C:y"])]).unwrap();
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, back);
    }
}
