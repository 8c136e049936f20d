//! Fixed char-level vocabulary with a handful of special tokens.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("character `{0}` outside vocabulary")]
    UnknownChar(char),
    #[error("unknown token id {0}")]
    UnknownId(u32),
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const THINK: u32 = 3;
pub const THINK_END: u32 = 4;
pub const ANSWER: u32 = 5;
pub const ANSWER_END: u32 = 6;
pub const IMG: u32 = 7;

pub const SPECIAL_STRINGS: [&str; 8] = [
    "<pad>", "<bos>", "<eos>", "<think>", "</think>", "<answer>", "</answer>", "<img>",
];

const CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .,;+-=<>/'";

/// Bijective id <-> string table; specials first, then single characters.
#[derive(Debug, Clone)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let v = Self {
            chars: CHARS.chars().collect(),
        };
        debug_assert!(v.size() <= 64);
        v
    }

    pub fn size(&self) -> usize {
        SPECIAL_STRINGS.len() + self.chars.len()
    }

    fn char_id(&self, c: char) -> Option<u32> {
        self.chars
            .iter()
            .position(|&x| x == c)
            .map(|i| (SPECIAL_STRINGS.len() + i) as u32)
    }

    /// Map text to ids. Special tokens written literally become single ids;
    /// everything else is one id per character.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, VocabError> {
        let mut ids = Vec::new();
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        'outer: while i < chars.len() {
            if chars[i] == '<' {
                for (sid, s) in SPECIAL_STRINGS.iter().enumerate() {
                    let sc: Vec<char> = s.chars().collect();
                    if chars[i..].starts_with(&sc) {
                        ids.push(sid as u32);
                        i += sc.len();
                        continue 'outer;
                    }
                }
            }
            match self.char_id(chars[i]) {
                Some(id) => ids.push(id),
                None => return Err(VocabError::UnknownChar(chars[i])),
            }
            i += 1;
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String, VocabError> {
        let mut out = String::new();
        for &id in ids {
            if (id as usize) < SPECIAL_STRINGS.len() {
                out.push_str(SPECIAL_STRINGS[id as usize]);
            } else {
                let ci = id as usize - SPECIAL_STRINGS.len();
                match self.chars.get(ci) {
                    Some(&c) => out.push(c),
                    None => return Err(VocabError::UnknownId(id)),
                }
            }
        }
        Ok(out)
    }
}

/// Token ids with optional per-token log-probabilities recorded under a
/// stated model at sampling time. When present, `logprobs` aligns
/// one-to-one with the ids after the prompt boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub logprobs: Option<Vec<f64>>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids, logprobs: None }
    }
}
