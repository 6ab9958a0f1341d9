//! The audio-visual recognizer: modality projections, a tied projection
//! layer, audio and video encoders, α-weighted cross-modal fusion, one shared
//! decoder and per-resolution output heads.

mod config;
mod missing;

pub use config::ModelConfig;
pub use missing::{apply_missing_video_mode, MissingVideo};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, TargetBatch};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, AttentionMask, Decoder, Encoder, Linear, MultiHeadAttention};
use crate::tensor::{Graph, ParamId, ParamSet, Real, Tensor, Var};
use crate::tokenizer::Resolution;

/// Encoder output that the decoder attends to.
#[derive(Clone, Debug)]
pub struct Memory {
    /// `[batch, rows, d_model]`.
    pub var: Var,
    pub lens: Vec<usize>,
}

/// Logits of both decoder passes, `[batch, steps, vocab]` each.
#[derive(Clone, Copy, Debug)]
pub struct Logits {
    pub chars: Var,
    pub subwords: Var,
}

impl Logits {
    pub fn get(&self, r: Resolution) -> Var {
        match r {
            Resolution::Character => self.chars,
            Resolution::Subword => self.subwords,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AvAsrModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub audio_proj: Linear,
    pub video_proj: Linear,
    /// Equal to `tied_video` unless the config unties them.
    pub tied_audio: Linear,
    pub tied_video: Linear,
    pub audio_encoder: Encoder,
    pub video_encoder: Encoder,
    pub cross_attn: MultiHeadAttention,
    /// Scalar fusion weight, shape `[1]`, initialised to zero.
    pub alpha: ParamId,
    pub decoder: Decoder,
    pub char_embed: ParamId,
    pub subword_embed: ParamId,
    pub char_head: Linear,
    pub subword_head: Linear,
}

impl AvAsrModel {
    /// Builds a freshly initialised model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = &config;
        let d = c.d_model;
        let dims = c.layer_dims();
        let audio_proj = Linear::new(&mut ps, "audio_proj", c.audio_dim(), d, &mut rng);
        let video_proj = Linear::new(&mut ps, "video_proj", c.video_dim, d, &mut rng);
        let (tied_audio, tied_video) = if c.tied_projection {
            let t = Linear::new(&mut ps, "tied", d, d, &mut rng);
            (t.clone(), t)
        } else {
            (
                Linear::new(&mut ps, "tied_audio", d, d, &mut rng),
                Linear::new(&mut ps, "tied_video", d, d, &mut rng),
            )
        };
        let audio_encoder = Encoder::new(&mut ps, "audio_encoder", c.enc_layers, dims, &mut rng)?;
        let video_encoder = Encoder::new(&mut ps, "video_encoder", c.enc_layers, dims, &mut rng)?;
        let cross_attn =
            MultiHeadAttention::new(&mut ps, "fusion.cross_attn", d, c.heads, c.attention_scaling, &mut rng)?;
        let alpha = ps.add("fusion.alpha", Tensor::zeros(&[1]));
        let decoder = Decoder::new(&mut ps, "decoder", c.dec_layers, dims, &mut rng)?;
        let char_embed = ps.add("char_embed", Tensor::randn(&[c.char_vocab_size, d], 1.0, &mut rng));
        let subword_embed = ps.add(
            "subword_embed",
            Tensor::randn(&[c.subword_vocab_size, d], 1.0, &mut rng),
        );
        let char_head = Linear::new(&mut ps, "char_head", d, c.char_vocab_size, &mut rng);
        let subword_head = Linear::new(&mut ps, "subword_head", d, c.subword_vocab_size, &mut rng);
        Ok(AvAsrModel {
            config,
            params: ps,
            audio_proj,
            video_proj,
            tied_audio,
            tied_video,
            audio_encoder,
            video_encoder,
            cross_attn,
            alpha,
            decoder,
            char_embed,
            subword_embed,
            char_head,
            subword_head,
        })
    }

    /// Graph over this model's parameters in inference mode.
    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.params)
    }

    pub fn vocab_size(&self, r: Resolution) -> usize {
        match r {
            Resolution::Character => self.config.char_vocab_size,
            Resolution::Subword => self.config.subword_vocab_size,
        }
    }

    fn add_positions(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let len = g.shape(x)[1];
        let pos = g.constant(sinusoidal_positions(len, self.config.d_model));
        g.add(x, pos)
    }

    /// `audio`: `[batch, rows, audio_dim]` with `lens` real rows each.
    pub fn encode_audio(&self, g: &mut Graph, audio: Var, lens: &[usize]) -> Result<Var> {
        let s = g.shape(audio).to_vec();
        if s.len() != 3 || s[2] != self.config.audio_dim() {
            return Err(Error::Config(format!(
                "audio features {s:?} do not match audio_dim {} ({} × stack {})",
                self.config.audio_dim(),
                self.config.feature_dim,
                self.config.stack_factor
            )));
        }
        if lens.len() != s[0] || lens.iter().any(|&l| l == 0 || l > s[1]) {
            return Err(Error::Contract(format!("audio lengths {lens:?} invalid for {s:?}")));
        }
        let mut x = self.audio_proj.forward(g, audio)?;
        if self.config.positions_after_tied {
            x = self.tied_audio.forward(g, x)?;
            x = self.add_positions(g, x)?;
        } else {
            x = self.add_positions(g, x)?;
            x = self.tied_audio.forward(g, x)?;
        }
        x = g.dropout(x, self.config.dropout);
        let mask = AttentionMask::key_padding(lens, s[1], s[1])?;
        self.audio_encoder.forward(g, x, &mask)
    }

    /// `video`: `[batch, len, video_dim]` (len is 1 for pooled features).
    pub fn encode_video(&self, g: &mut Graph, video: Var) -> Result<Var> {
        let s = g.shape(video).to_vec();
        if s.len() != 3 || s[2] != self.config.video_dim {
            return Err(Error::Config(format!(
                "video features {s:?} do not match video_dim {}",
                self.config.video_dim
            )));
        }
        let x = self.video_proj.forward(g, video)?;
        let x = self.tied_video.forward(g, x)?;
        let x = g.dropout(x, self.config.dropout);
        self.video_encoder.forward(g, x, &AttentionMask::full(s[0], s[1], s[1]))
    }

    /// `audio + α · CrossAttention(Q = audio, K = V = video)`. Returns the
    /// audio encoding untouched when fusion is disabled or `gate` is set.
    pub fn fuse(&self, g: &mut Graph, audio_enc: Var, video_enc: Var, gate: bool) -> Result<Var> {
        if !self.config.fusion_enabled || gate {
            return Ok(audio_enc);
        }
        let cross = self.cross_attn.forward(g, audio_enc, video_enc, None)?;
        let alpha = g.param(self.alpha);
        let scaled = g.mul(cross, alpha)?;
        g.add(audio_enc, scaled)
    }

    /// Encodes a batch into decoder memory. `gate` forces α to zero for this
    /// pass without touching parameters.
    pub fn encode(&self, g: &mut Graph, batch: &Batch, gate: bool) -> Result<Memory> {
        let audio = g.constant(batch.audio.clone());
        let audio_enc = self.encode_audio(g, audio, &batch.audio_lens)?;
        let var = if self.config.fusion_enabled && !gate {
            if let Some(i) = batch.video_present.iter().position(|p| !p) {
                return Err(Error::Contract(format!(
                    "utterance '{}' has no video; choose a missing-video mode or disable fusion",
                    batch.ids[i]
                )));
            }
            let video = g.constant(batch.video.clone());
            let video_enc = self.encode_video(g, video)?;
            self.fuse(g, audio_enc, video_enc, false)?
        } else {
            audio_enc
        };
        Ok(Memory {
            var,
            lens: batch.audio_lens.clone(),
        })
    }

    /// Runs the shared decoder over `inputs` (`[batch, len]` ids, `input_lens`
    /// real positions per row) and projects to `resolution` logits.
    ///
    /// `memory` may have batch 1 and is then shared by every row;
    /// `mem_lens` always has one entry per row.
    pub fn decode(
        &self,
        g: &mut Graph,
        memory: Var,
        mem_lens: &[usize],
        inputs: &[usize],
        input_lens: &[usize],
        resolution: Resolution,
    ) -> Result<Var> {
        let b = input_lens.len();
        if b == 0 || !inputs.len().is_multiple_of(b) || mem_lens.len() != b {
            return Err(Error::Contract(format!(
                "decoder inputs: {} ids for {b} rows and {} memory lengths",
                inputs.len(),
                mem_lens.len()
            )));
        }
        let len = inputs.len() / b;
        let vocab = self.vocab_size(resolution);
        if let Some(&bad) = inputs.iter().find(|&&t| t >= vocab) {
            return Err(Error::Contract(format!("token id {bad} outside {resolution} vocabulary of {vocab}")));
        }
        let (table, head) = match resolution {
            Resolution::Character => (self.char_embed, &self.char_head),
            Resolution::Subword => (self.subword_embed, &self.subword_head),
        };
        let table = g.param(table);
        let y = g.embedding(table, inputs, &[b, len])?;
        self.decode_embedded(g, y, memory, mem_lens, input_lens, head)
    }

    /// Decoder pass starting from already embedded inputs `[batch, len, d]`.
    pub fn decode_embedded(
        &self,
        g: &mut Graph,
        embedded: Var,
        memory: Var,
        mem_lens: &[usize],
        input_lens: &[usize],
        head: &Linear,
    ) -> Result<Var> {
        let len = g.shape(embedded)[1];
        let mem_len = g.shape(memory)[1];
        let y = self.add_positions(g, embedded)?;
        let y = g.dropout(y, self.config.dropout);
        let self_mask = AttentionMask::causal(input_lens, len)?;
        let mem_mask = AttentionMask::key_padding(mem_lens, len, mem_len)?;
        let h = self.decoder.forward(g, y, memory, &self_mask, &mem_mask)?;
        head.forward(g, h)
    }

    /// Teacher-forced logits for one resolution.
    pub fn decode_targets(&self, g: &mut Graph, memory: &Memory, targets: &TargetBatch, r: Resolution) -> Result<Var> {
        let input_lens: Vec<usize> = targets.lens.iter().map(|l| l - 1).collect();
        self.decode(g, memory.var, &memory.lens, &targets.inputs(), &input_lens, r)
    }

    /// Full teacher-forced pass: encode and fuse once, then decode each
    /// resolution over the same memory.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, gate: bool) -> Result<Logits> {
        let memory = self.encode(g, batch, gate)?;
        Ok(Logits {
            chars: self.decode_targets(g, &memory, &batch.chars, Resolution::Character)?,
            subwords: self.decode_targets(g, &memory, &batch.subwords, Resolution::Subword)?,
        })
    }

    pub fn alpha_value(&self) -> Real {
        self.params.get(self.alpha).value.data()[0]
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }
}
