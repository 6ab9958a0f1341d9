use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{normalize_text, NUM_SPECIALS, SPECIAL_NAMES, UNK};
use crate::error::{Error, Result};

const SPACE_TOKEN: &str = "<space>";

/// Grapheme inventory. Ids `0..4` are the specials, then graphemes in
/// code-point order (space included).
#[derive(Debug)]
pub struct CharVocab {
    graphemes: Vec<char>,
    index: HashMap<char, usize>,
    unk_count: AtomicUsize,
}

impl CharVocab {
    pub fn new(graphemes: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = graphemes.into_iter().collect();
        let graphemes: Vec<char> = set.into_iter().collect();
        let index = graphemes
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + NUM_SPECIALS))
            .collect();
        CharVocab {
            graphemes,
            index,
            unk_count: AtomicUsize::new(0),
        }
    }

    /// Every grapheme of the normalized corpus.
    pub fn from_corpus<S: AsRef<str>>(lines: &[S]) -> Self {
        Self::new(lines.iter().flat_map(|l| normalize_text(l.as_ref()).chars().collect::<Vec<_>>()))
    }

    /// Number of ids, specials included.
    pub fn len(&self) -> usize {
        self.graphemes.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        self.graphemes.is_empty()
    }

    pub fn graphemes(&self) -> &[char] {
        &self.graphemes
    }

    pub fn unk_count(&self) -> usize {
        self.unk_count.load(Ordering::Relaxed)
    }

    /// One id per character; characters outside the inventory become UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| {
                self.index.get(&c).copied().unwrap_or_else(|| {
                    self.unk_count.fetch_add(1, Ordering::Relaxed);
                    UNK
                })
            })
            .collect()
    }

    /// Inverse of [`encode`](Self::encode). PAD/BOS/EOS are dropped and UNK
    /// renders as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == UNK {
                out.push_str(SPECIAL_NAMES[UNK]);
            } else if id >= NUM_SPECIALS {
                if let Some(&c) = self.graphemes.get(id - NUM_SPECIALS) {
                    out.push(c);
                }
            }
        }
        out
    }

    /// One entry per line in id order, specials included.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for name in SPECIAL_NAMES {
            s.push_str(name);
            s.push('\n');
        }
        for &c in &self.graphemes {
            if c == ' ' {
                s.push_str(SPACE_TOKEN);
            } else {
                s.push(c);
            }
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str, path: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_SPECIALS || lines[..NUM_SPECIALS] != SPECIAL_NAMES {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: "character vocabulary must start with the four special tokens".into(),
            });
        }
        let mut graphemes = Vec::new();
        for (n, line) in lines.iter().enumerate().skip(NUM_SPECIALS) {
            let c = if *line == SPACE_TOKEN {
                ' '
            } else {
                let mut it = line.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => c,
                    _ => {
                        return Err(Error::Parse {
                            path: path.into(),
                            line: n + 1,
                            msg: format!("expected one grapheme, got {line:?}"),
                        })
                    }
                }
            };
            if graphemes.last().is_some_and(|&p| p >= c) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: n + 1,
                    msg: "graphemes must be unique and in code-point order".into(),
                });
            }
            graphemes.push(c);
        }
        Ok(Self::new(graphemes))
    }
}

impl PartialEq for CharVocab {
    fn eq(&self, other: &Self) -> bool {
        self.graphemes == other.graphemes
    }
}

impl Clone for CharVocab {
    fn clone(&self) -> Self {
        Self::new(self.graphemes.iter().copied())
    }
}
