//! Grapheme and byte-pair-encoding tokenizers.

mod bpe;
mod chars;

pub use bpe::{BpeModel, WORD_BOUNDARY};
pub use chars::CharVocab;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub(crate) const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Lowercases, drops every character other than letters, digits, apostrophes
/// and whitespace, and collapses whitespace runs to single spaces.
///
/// Applied identically to training transcripts, references and hypotheses.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if c.is_alphanumeric() || c == '\'' {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// Output granularity of a decoder pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Resolution {
    Character,
    Subword,
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Resolution::Character => "char",
            Resolution::Subword => "subword",
        })
    }
}

/// Both tokenizers used by a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizers {
    pub chars: CharVocab,
    pub subwords: BpeModel,
}

impl Tokenizers {
    pub fn encode(&self, resolution: Resolution, text: &str) -> Vec<usize> {
        match resolution {
            Resolution::Character => self.chars.encode(text),
            Resolution::Subword => self.subwords.encode(text),
        }
    }

    pub fn decode(&self, resolution: Resolution, ids: &[usize]) -> String {
        match resolution {
            Resolution::Character => self.chars.decode(ids),
            Resolution::Subword => self.subwords.decode(ids),
        }
    }

    pub fn vocab_size(&self, resolution: Resolution) -> usize {
        match resolution {
            Resolution::Character => self.chars.len(),
            Resolution::Subword => self.subwords.len(),
        }
    }

    /// Trains both tokenizers on normalized `lines`.
    pub fn train(lines: &[String], subword_vocab_size: usize) -> crate::Result<Self> {
        Ok(Tokenizers {
            chars: CharVocab::from_corpus(lines),
            subwords: BpeModel::train(lines, subword_vocab_size)?,
        })
    }
}
