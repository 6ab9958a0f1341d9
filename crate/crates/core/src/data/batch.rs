use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::preprocess::Utterance;
use crate::error::{Error, Result};
use crate::nn::AttentionMask;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{Resolution, Tokenizers, BOS, EOS, PAD};

/// Target sequences of one resolution framed as `BOS … EOS` and right-padded
/// with PAD to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    /// `[batch, max_len]`, row-major.
    pub tokens: Vec<usize>,
    /// Framed lengths (BOS and EOS included).
    pub lens: Vec<usize>,
    pub max_len: usize,
}

impl TargetBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Self {
        let max_len = seqs.iter().map(|s| s.len() + 2).max().unwrap_or(2);
        let mut tokens = Vec::with_capacity(seqs.len() * max_len);
        for s in seqs {
            tokens.push(BOS);
            tokens.extend_from_slice(s);
            tokens.push(EOS);
            tokens.resize(tokens.len() + max_len - s.len() - 2, PAD);
        }
        TargetBatch {
            tokens,
            lens: seqs.iter().map(|s| s.len() + 2).collect(),
            max_len,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    /// Positions the decoder reads and predicts at: `max_len - 1`.
    pub fn steps(&self) -> usize {
        self.max_len - 1
    }

    /// Teacher-forcing input: every row without its last column.
    pub fn inputs(&self) -> Vec<usize> {
        self.tokens
            .chunks(self.max_len)
            .flat_map(|r| r[..self.max_len - 1].iter().copied())
            .collect()
    }

    /// Prediction targets: every row without its BOS column.
    pub fn outputs(&self) -> Vec<usize> {
        self.tokens
            .chunks(self.max_len)
            .flat_map(|r| r[1..].iter().copied())
            .collect()
    }

    /// Number of real (non-PAD) prediction targets per row.
    pub fn output_lens(&self) -> Vec<usize> {
        self.lens.iter().map(|l| l - 1).collect()
    }

    /// `[batch * steps]` flags, true where the target is not padding.
    pub fn output_mask(&self) -> Vec<bool> {
        let steps = self.steps();
        self.lens
            .iter()
            .flat_map(|&l| (0..steps).map(move |t| t < l - 1))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[batch, max_rows, feature_dim]`, zero beyond each length.
    pub audio: Tensor,
    pub audio_lens: Vec<usize>,
    /// `[batch, 1, video_dim]`, zero where absent.
    pub video: Tensor,
    pub video_present: Vec<bool>,
    pub chars: TargetBatch,
    pub subwords: TargetBatch,
    pub references: Vec<String>,
}

impl Batch {
    pub fn from_utterances(utts: &[&Utterance], tok: &Tokenizers, video_dim: usize) -> Result<Self> {
        let Some(first) = utts.first() else {
            return Err(Error::Contract("cannot build an empty batch".into()));
        };
        let dim = first.feature_dim();
        let max_rows = utts.iter().map(|u| u.rows()).max().unwrap_or(0);
        let mut audio = vec![0.0 as Real; utts.len() * max_rows * dim];
        let mut video = vec![0.0 as Real; utts.len() * video_dim];
        let mut video_present = Vec::with_capacity(utts.len());
        for (i, u) in utts.iter().enumerate() {
            if u.feature_dim() != dim {
                return Err(Error::Ingestion {
                    id: u.id.clone(),
                    msg: format!("feature dim {} differs from batch dim {dim}", u.feature_dim()),
                });
            }
            let off = i * max_rows * dim;
            audio[off..off + u.audio.numel()].copy_from_slice(u.audio.data());
            match &u.video {
                Some(v) if v.len() == video_dim => {
                    video[i * video_dim..(i + 1) * video_dim].copy_from_slice(v);
                    video_present.push(true);
                }
                Some(v) => {
                    return Err(Error::Ingestion {
                        id: u.id.clone(),
                        msg: format!("video dim {} differs from expected {video_dim}", v.len()),
                    })
                }
                None => video_present.push(false),
            }
        }
        let encode = |r: Resolution| -> Vec<Vec<usize>> {
            utts.iter().map(|u| tok.encode(r, &u.transcript)).collect()
        };
        Ok(Batch {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            audio: Tensor::new(vec![utts.len(), max_rows, dim], audio)?,
            audio_lens: utts.iter().map(|u| u.rows()).collect(),
            video: Tensor::new(vec![utts.len(), 1, video_dim], video)?,
            video_present,
            chars: TargetBatch::new(&encode(Resolution::Character)),
            subwords: TargetBatch::new(&encode(Resolution::Subword)),
            references: utts.iter().map(|u| u.transcript.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_rows(&self) -> usize {
        self.audio.shape()[1]
    }

    pub fn targets(&self, r: Resolution) -> &TargetBatch {
        match r {
            Resolution::Character => &self.chars,
            Resolution::Subword => &self.subwords,
        }
    }

    /// Key-padding mask over audio rows for queries of length `len_q`.
    pub fn audio_mask(&self, len_q: usize) -> Result<AttentionMask> {
        AttentionMask::key_padding(&self.audio_lens, len_q, self.max_rows())
    }

    /// Audio rows that are not padding.
    pub fn real_frames(&self) -> usize {
        self.audio_lens.iter().sum()
    }

    pub fn padded_frames(&self) -> usize {
        self.len() * self.max_rows() - self.real_frames()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchOptions {
    /// Upper bound on `batch_size × longest utterance` in feature rows.
    pub frame_budget: usize,
    /// Batch-order shuffle seed; `None` keeps length order.
    pub shuffle_seed: Option<u64>,
    pub video_dim: usize,
}

/// Buckets utterances by length (stable sort, ties by id) and packs them
/// greedily under the frame budget. Batch order is then shuffled by the seed.
pub fn make_batches(utts: &[Utterance], tok: &Tokenizers, opts: &BatchOptions) -> Result<Vec<Batch>> {
    if let Some(u) = utts.iter().find(|u| u.rows() > opts.frame_budget) {
        return Err(Error::Ingestion {
            id: u.id.clone(),
            msg: format!(
                "{} rows exceed the batch frame budget {}; filter, chunk or stack first",
                u.rows(),
                opts.frame_budget
            ),
        });
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by(|&a, &b| utts[a].rows().cmp(&utts[b].rows()).then_with(|| utts[a].id.cmp(&utts[b].id)));

    let mut groups: Vec<Vec<&Utterance>> = Vec::new();
    let mut current: Vec<&Utterance> = Vec::new();
    for i in order {
        let u = &utts[i];
        // Sorted ascending, so u is the longest in the group if added.
        if !current.is_empty() && (current.len() + 1) * u.rows() > opts.frame_budget {
            groups.push(std::mem::take(&mut current));
        }
        current.push(u);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    if let Some(seed) = opts.shuffle_seed {
        groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    groups
        .iter()
        .map(|g| Batch::from_utterances(g, tok, opts.video_dim))
        .collect()
}
