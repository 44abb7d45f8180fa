//! Melodico-rhythmic token alphabet.
//!
//! Every step of a 16th-note grid becomes one token: the MIDI pitch at a note
//! onset (`"55"`..`"84"`), `"__"` while that note is held, and `"R"` for
//! silence. Two extra symbols exist only on the model input side: the
//! positional constraint `"p"` (prior input) and the start symbol `"s"`
//! (decoder input).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ClsmError, Result};

pub const MIN_PITCH: u8 = 55;
pub const MAX_PITCH: u8 = 84;
pub const N_PITCHES: usize = (MAX_PITCH - MIN_PITCH + 1) as usize;
/// Pitches + rest + hold.
pub const DATA_VOCAB: usize = N_PITCHES + 2;
/// Data vocabulary + constraint + start.
pub const MODEL_VOCAB: usize = DATA_VOCAB + 2;

pub type TokenSeq = Vec<Token>;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(u8);

impl Token {
    pub const REST: Token = Token(N_PITCHES as u8);
    pub const HOLD: Token = Token(N_PITCHES as u8 + 1);
    pub const CONSTRAINT: Token = Token(N_PITCHES as u8 + 2);
    pub const START: Token = Token(N_PITCHES as u8 + 3);

    pub fn pitch(pitch: u8) -> Result<Token> {
        if (MIN_PITCH..=MAX_PITCH).contains(&pitch) {
            Ok(Token(pitch - MIN_PITCH))
        } else {
            Err(ClsmError::OutOfRange(pitch))
        }
    }

    pub fn from_index(index: usize) -> Result<Token> {
        if index < MODEL_VOCAB {
            Ok(Token(index as u8))
        } else {
            Err(ClsmError::InvalidToken(format!("index {index}")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_pitch(self) -> Option<u8> {
        ((self.0 as usize) < N_PITCHES).then(|| self.0 + MIN_PITCH)
    }

    /// True for the 32 symbols that can appear in data and model output.
    pub fn is_data(self) -> bool {
        (self.0 as usize) < DATA_VOCAB
    }

    pub fn symbol(self) -> String {
        match self {
            Token::REST => "R".to_string(),
            Token::HOLD => "__".to_string(),
            Token::CONSTRAINT => "p".to_string(),
            Token::START => "s".to_string(),
            t => (t.0 + MIN_PITCH).to_string(),
        }
    }

    /// Shift a pitch token by `semitones`; rest/hold/special tokens pass through.
    pub fn transpose(self, semitones: i32) -> Result<Token> {
        match self.as_pitch() {
            Some(p) => {
                let shifted = p as i32 + semitones;
                if !(MIN_PITCH as i32..=MAX_PITCH as i32).contains(&shifted) {
                    return Err(ClsmError::OutOfRange(shifted.clamp(0, 255) as u8));
                }
                Token::pitch(shifted as u8)
            }
            None => Ok(self),
        }
    }
}

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.symbol())
    }
}

impl FromStr for Token {
    type Err = ClsmError;

    fn from_str(s: &str) -> Result<Token> {
        match s {
            "R" => Ok(Token::REST),
            "__" => Ok(Token::HOLD),
            "p" => Ok(Token::CONSTRAINT),
            "s" => Ok(Token::START),
            _ => {
                let pitch: u8 = s
                    .parse()
                    .map_err(|_| ClsmError::InvalidToken(s.to_string()))?;
                Token::pitch(pitch).map_err(|_| ClsmError::InvalidToken(s.to_string()))
            }
        }
    }
}

impl Serialize for Token {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.symbol())
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Token, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parse whitespace-separated token text.
pub fn parse_seq(text: &str) -> Result<TokenSeq> {
    text.split_whitespace().map(str::parse).collect()
}

pub fn format_seq(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.symbol())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn to_indices(tokens: &[Token]) -> Vec<u32> {
    tokens.iter().map(|t| t.index() as u32).collect()
}

/// The serialized symbol <-> index map stored alongside checkpoints and corpora.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAlphabet {
    pub symbols: Vec<String>,
}

impl TokenAlphabet {
    pub fn standard() -> Self {
        let symbols = (0..MODEL_VOCAB)
            .map(|i| Token(i as u8).symbol())
            .collect();
        Self { symbols }
    }

    pub fn data_size(&self) -> usize {
        DATA_VOCAB
    }

    pub fn model_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    /// A stored alphabet must map every symbol to the same index as this build.
    pub fn ensure_compatible(&self) -> Result<()> {
        if *self == Self::standard() {
            Ok(())
        } else {
            Err(ClsmError::Checkpoint(
                "token index map differs from this build's alphabet".into(),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_sizes() {
        let alphabet = TokenAlphabet::standard();
        assert_eq!(alphabet.data_size(), 32);
        assert_eq!(alphabet.model_size(), 34);
        assert_eq!(alphabet.index_of("55"), Some(0));
        assert_eq!(alphabet.index_of("84"), Some(29));
        assert_eq!(alphabet.index_of("R"), Some(30));
        assert_eq!(alphabet.index_of("__"), Some(31));
    }

    #[test]
    fn symbols_round_trip() {
        for i in 0..MODEL_VOCAB {
            let t = Token::from_index(i).unwrap();
            assert_eq!(t.symbol().parse::<Token>().unwrap(), t);
        }
        assert!("54".parse::<Token>().is_err());
        assert!("85".parse::<Token>().is_err());
        assert!("x".parse::<Token>().is_err());
    }

    #[test]
    fn alphabet_survives_json() {
        let a = TokenAlphabet::standard();
        let text = serde_json::to_string(&a).unwrap();
        let b: TokenAlphabet = serde_json::from_str(&text).unwrap();
        b.ensure_compatible().unwrap();
    }

    #[test]
    fn special_tokens_are_not_data() {
        assert!(Token::REST.is_data());
        assert!(Token::HOLD.is_data());
        assert!(!Token::CONSTRAINT.is_data());
        assert!(!Token::START.is_data());
    }
}
