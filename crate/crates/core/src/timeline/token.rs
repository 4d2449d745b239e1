use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::ConceptId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse token {spelling:?}: {reason}")]
pub struct TokenParseError {
    pub spelling: String,
    pub reason: &'static str,
}

fn parse_err(spelling: &str, reason: &'static str) -> TokenParseError {
    TokenParseError {
        spelling: spelling.to_string(),
        reason,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Sex {
    Female,
    Male,
    Unknown,
}

impl Sex {
    pub const ALL: [Sex; 3] = [Sex::Female, Sex::Male, Sex::Unknown];

    /// Single-letter form used in token spellings.
    pub fn code(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
            Sex::Unknown => "U",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sex::Female => "Female",
            Sex::Male => "Male",
            Sex::Unknown => "Unknown",
        }
    }
}

impl FromStr for Sex {
    type Err = TokenParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Sex::ALL
            .into_iter()
            .find(|x| x.code().eq_ignore_ascii_case(s) || x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| parse_err(s, "unknown sex"))
    }
}

impl TryFrom<String> for Sex {
    type Error = TokenParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Sex> for String {
    fn from(s: Sex) -> String {
        s.name().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Ethnicity {
    Asian,
    Black,
    Mixed,
    Other,
    Unknown,
    White,
}

impl Ethnicity {
    pub const ALL: [Ethnicity; 6] = [
        Ethnicity::Asian,
        Ethnicity::Black,
        Ethnicity::Mixed,
        Ethnicity::Other,
        Ethnicity::Unknown,
        Ethnicity::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ethnicity::Asian => "Asian",
            Ethnicity::Black => "Black",
            Ethnicity::Mixed => "Mixed",
            Ethnicity::Other => "Other",
            Ethnicity::Unknown => "Unknown",
            Ethnicity::White => "White",
        }
    }
}

impl FromStr for Ethnicity {
    type Err = TokenParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ethnicity::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| parse_err(s, "unknown ethnicity"))
    }
}

impl TryFrom<String> for Ethnicity {
    type Error = TokenParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Ethnicity> for String {
    fn from(e: Ethnicity) -> String {
        e.name().to_string()
    }
}

/// A timeline token. Spelled `C:<id>`, `SEX:<F|M|U>`, `ETH:<name>`,
/// `AGE:<years>`, `SEP`, `DEATH`; `Pad` is `<PAD>` and only occurs in batches.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Token {
    Concept(ConceptId),
    Sex(Sex),
    Ethnicity(Ethnicity),
    Age(u8),
    Sep,
    Death,
    Pad,
}

impl Token {
    pub const MAX_AGE: u8 = 130;

    pub fn is_concept(&self) -> bool {
        matches!(self, Token::Concept(_))
    }

    pub fn concept(&self) -> Option<&ConceptId> {
        match self {
            Token::Concept(c) => Some(c),
            _ => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Concept(c) => write!(f, "C:{c}"),
            Token::Sex(s) => write!(f, "SEX:{}", s.code()),
            Token::Ethnicity(e) => write!(f, "ETH:{}", e.name()),
            Token::Age(y) => write!(f, "AGE:{y}"),
            Token::Sep => f.write_str("SEP"),
            Token::Death => f.write_str("DEATH"),
            Token::Pad => f.write_str("<PAD>"),
        }
    }
}

impl FromStr for Token {
    type Err = TokenParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "SEP" => return Ok(Token::Sep),
            "DEATH" => return Ok(Token::Death),
            "<PAD>" => return Ok(Token::Pad),
            _ => {}
        }
        let Some((kind, value)) = s.split_once(':') else {
            return Err(parse_err(s, "expected KIND:value"));
        };
        match kind {
            "C" if !value.is_empty() => Ok(Token::Concept(ConceptId::new(value))),
            "C" => Err(parse_err(s, "empty concept id")),
            "SEX" => value.parse().map(Token::Sex).map_err(|_| parse_err(s, "unknown sex")),
            "ETH" => value
                .parse()
                .map(Token::Ethnicity)
                .map_err(|_| parse_err(s, "unknown ethnicity")),
            "AGE" => match value.parse::<u8>() {
                Ok(y) if y <= Token::MAX_AGE => Ok(Token::Age(y)),
                _ => Err(parse_err(s, "age must be an integer in 0..=130")),
            },
            _ => Err(parse_err(s, "unknown token kind")),
        }
    }
}

impl TryFrom<String> for Token {
    type Error = TokenParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Token> for String {
    fn from(t: Token) -> String {
        t.to_string()
    }
}
