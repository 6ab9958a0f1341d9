use std::fmt::Write as _;

use crate::config::{on_off, parse_bool, parse_value};
use crate::error::{Error, Result};
use crate::nn::LayerDims;
use crate::tensor::Real;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Layers in each of the audio and video encoders.
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub dropout: Real,
    /// Width of one raw audio frame.
    pub feature_dim: usize,
    /// Raw frames concatenated into one encoder input row.
    pub stack_factor: usize,
    pub video_dim: usize,
    pub char_vocab_size: usize,
    pub subword_vocab_size: usize,
    pub attention_scaling: bool,
    pub fusion_enabled: bool,
    /// One shared d_model→d_model layer for both modalities. When off each
    /// modality gets its own copy.
    pub tied_projection: bool,
    /// Add positional encodings after the tied layer (otherwise before it).
    pub positions_after_tied: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 480,
            heads: 6,
            enc_layers: 6,
            dec_layers: 4,
            d_ff: 1920,
            dropout: 0.2,
            feature_dim: 43,
            stack_factor: 4,
            video_dim: 2048,
            char_vocab_size: 45,
            subword_vocab_size: 1200,
            attention_scaling: true,
            fusion_enabled: true,
            tied_projection: true,
            positions_after_tied: true,
        }
    }
}

const KEYS: &[&str] = &[
    "d_model",
    "heads",
    "enc_layers",
    "dec_layers",
    "d_ff",
    "dropout",
    "feature_dim",
    "stack_factor",
    "video_dim",
    "char_vocab_size",
    "subword_vocab_size",
    "attention_scaling",
    "fusion_enabled",
    "tied_projection",
    "positions_after_tied",
];

impl ModelConfig {
    /// Input width of the audio projection.
    pub fn audio_dim(&self) -> usize {
        self.feature_dim * self.stack_factor
    }

    pub fn layer_dims(&self) -> LayerDims {
        LayerDims {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            attention_scaling: self.attention_scaling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_ff", self.d_ff),
            ("feature_dim", self.feature_dim),
            ("stack_factor", self.stack_factor),
            ("video_dim", self.video_dim),
        ];
        if let Some((k, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for (k, v) in [
            ("char_vocab_size", self.char_vocab_size),
            ("subword_vocab_size", self.subword_vocab_size),
        ] {
            if v <= crate::tokenizer::NUM_SPECIALS {
                return Err(Error::Config(format!("{k} {v} leaves no room beyond the special tokens")));
            }
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Applies one setting. Returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_model" => self.d_model = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "enc_layers" => self.enc_layers = parse_value(key, value)?,
            "dec_layers" => self.dec_layers = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "feature_dim" => self.feature_dim = parse_value(key, value)?,
            "stack_factor" => self.stack_factor = parse_value(key, value)?,
            "video_dim" => self.video_dim = parse_value(key, value)?,
            "char_vocab_size" => self.char_vocab_size = parse_value(key, value)?,
            "subword_vocab_size" => self.subword_vocab_size = parse_value(key, value)?,
            "attention_scaling" => self.attention_scaling = parse_bool(key, value)?,
            "fusion_enabled" => self.fusion_enabled = parse_bool(key, value)?,
            "tied_projection" => self.tied_projection = parse_bool(key, value)?,
            "positions_after_tied" => self.positions_after_tied = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every setting as `key = value` lines, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let vals: [String; 15] = [
            self.d_model.to_string(),
            self.heads.to_string(),
            self.enc_layers.to_string(),
            self.dec_layers.to_string(),
            self.d_ff.to_string(),
            self.dropout.to_string(),
            self.feature_dim.to_string(),
            self.stack_factor.to_string(),
            self.video_dim.to_string(),
            self.char_vocab_size.to_string(),
            self.subword_vocab_size.to_string(),
            on_off(self.attention_scaling).into(),
            on_off(self.fusion_enabled).into(),
            on_off(self.tied_projection).into(),
            on_off(self.positions_after_tied).into(),
        ];
        for (k, v) in KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses text produced by [`to_kv`](Self::to_kv); every key is required.
    pub fn from_kv(text: &str, label: &str) -> Result<Self> {
        let pairs = crate::config::parse_kv(text, label)?;
        let mut cfg = ModelConfig::default();
        for k in KEYS {
            if !pairs.iter().any(|(p, _)| p == k) {
                return Err(Error::Version(format!("{label}: model config lacks '{k}'")));
            }
        }
        for (k, v) in &pairs {
            if !cfg.set(k, v)? {
                return Err(Error::Version(format!("{label}: unknown model config key '{k}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
