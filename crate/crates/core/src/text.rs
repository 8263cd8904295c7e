//! Toy text conditioning: tokenizer, token classes and hash-seeded embeddings.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::prng::{mix64, Prng};
use crate::tensor::Tensor;

/// Context length, including start and end tokens.
pub const CONTEXT_LEN: usize = 77;
/// Embedding width.
pub const EMBED_DIM: usize = 64;

pub const SOT_ID: u32 = 0;
pub const EOT_ID: u32 = 1;
pub const PAD_ID: u32 = 2;

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");
const EMBED_SALT: u64 = 0x7E37_0C0D_E000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Sot,
    Eot,
    Pad,
    Stop,
    Related,
}

impl TokenClass {
    /// Members of the unrelated set: start token, padding and stop words.
    pub fn is_unrelated(self) -> bool {
        matches!(self, TokenClass::Sot | TokenClass::Pad | TokenClass::Stop)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopWords {
    words: HashSet<String>,
}

impl StopWords {
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Self { words }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl Default for StopWords {
    fn default() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub classes: Vec<TokenClass>,
    /// Source word for word tokens, `None` for SoT/EoT/Pad.
    pub surface: Vec<Option<String>>,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.surface.iter().flatten().map(String::as_str)
    }

    /// Positions regularized inside the RoI: SoT, padding and stop words.
    pub fn unrelated_indices(&self) -> Vec<usize> {
        self.indices_where(|c| c.is_unrelated())
    }

    /// Complement of [`Self::unrelated_indices`]: related words plus EoT.
    pub fn related_indices(&self) -> Vec<usize> {
        self.indices_where(|c| !c.is_unrelated())
    }

    /// Related word positions only (EoT excluded).
    pub fn related_word_indices(&self) -> Vec<usize> {
        self.indices_where(|c| c == TokenClass::Related)
    }

    fn indices_where(&self, f: impl Fn(TokenClass) -> bool) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| f(c))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Lowercase, split on anything that is not alphanumeric, truncate to
/// `CONTEXT_LEN - 2` words and lay out `[SoT, words.., EoT, Pad..]`.
/// Word classes come from `stopwords`.
pub fn tokenize(text: &str, stopwords: &StopWords) -> Result<TokenSequence> {
    let lower = text.to_lowercase();
    let mut words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(Error::EmptyInstruction);
    }
    let truncated = words.len() > CONTEXT_LEN - 2;
    words.truncate(CONTEXT_LEN - 2);

    let mut ids = Vec::with_capacity(CONTEXT_LEN);
    let mut surface = Vec::with_capacity(CONTEXT_LEN);
    let mut classes = Vec::with_capacity(CONTEXT_LEN);
    ids.push(SOT_ID);
    surface.push(None);
    classes.push(TokenClass::Sot);
    for w in &words {
        ids.push(word_id(w));
        surface.push(Some((*w).to_string()));
        classes.push(TokenClass::Related);
    }
    ids.push(EOT_ID);
    surface.push(None);
    classes.push(TokenClass::Eot);
    while ids.len() < CONTEXT_LEN {
        ids.push(PAD_ID);
        surface.push(None);
        classes.push(TokenClass::Pad);
    }
    Ok(classify_tokens(
        TokenSequence {
            ids,
            classes,
            surface,
            truncated,
        },
        stopwords,
    ))
}

/// Recompute word classes: `Stop` iff the word is on the list, otherwise `Related`.
/// Special tokens keep their positional class.
pub fn classify_tokens(mut seq: TokenSequence, stopwords: &StopWords) -> TokenSequence {
    for (class, word) in seq.classes.iter_mut().zip(&seq.surface) {
        if let Some(w) = word {
            *class = if stopwords.contains(w) {
                TokenClass::Stop
            } else {
                TokenClass::Related
            };
        }
    }
    seq
}

/// Stable id for a word: FNV-1a over its UTF-8 bytes, folded above the reserved ids.
pub fn word_id(word: &str) -> u32 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    3 + (h % (u32::MAX as u64 - 3)) as u32
}

/// Embedding row of one token id: `EMBED_DIM` standard-normal draws from a
/// generator seeded by a hash of the id.
pub fn embedding_row(id: u32) -> Vec<f32> {
    let mut p = Prng::new(mix64(id as u64 ^ EMBED_SALT));
    (0..EMBED_DIM).map(|_| p.next_gaussian() as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// `CONTEXT_LEN × EMBED_DIM`.
    pub matrix: Tensor,
}

pub fn embed(seq: &TokenSequence) -> TextEmbedding {
    let mut data = Vec::with_capacity(seq.len() * EMBED_DIM);
    for &id in &seq.ids {
        data.extend(embedding_row(id));
    }
    TextEmbedding {
        matrix: Tensor::new(&[seq.len(), EMBED_DIM], data).expect("embedding dims"),
    }
}
