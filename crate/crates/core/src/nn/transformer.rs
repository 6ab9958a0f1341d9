//! Pre-norm encoder and decoder layers: `x + dropout(sublayer(norm(x)))`.

use rand::Rng;

use super::attention::{AttentionMask, MultiHeadAttention};
use super::layers::{FeedForward, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSet, Real, Var};

/// Hyperparameters shared by every layer of a stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerDims {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: Real,
    pub attention_scaling: bool,
}

impl LayerDims {
    fn encoder_layer_params(&self) -> usize {
        2 * 2 * self.d_model
            + MultiHeadAttention::num_params(self.d_model)
            + Linear::num_params(self.d_model, self.d_ff)
            + Linear::num_params(self.d_ff, self.d_model)
    }

    fn decoder_layer_params(&self) -> usize {
        self.encoder_layer_params() + 2 * self.d_model + MultiHeadAttention::num_params(self.d_model)
    }
}

fn residual(g: &mut Graph, x: Var, sub: Var, p: Real) -> Result<Var> {
    let sub = g.dropout(sub, p);
    g.add(x, sub)
}

fn check_len(g: &Graph, x: Var, mask: &AttentionMask, what: &str) -> Result<()> {
    let s = g.shape(x);
    let (b, lq, _) = mask.dims();
    if s.len() != 3 || s[0] != b || s[1] != lq {
        return Err(Error::Contract(format!(
            "{what}: mask {:?} does not match sequence {s:?}",
            mask.dims()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
    pub dropout: Real,
}

impl EncoderLayer {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, dims: LayerDims, rng: &mut R) -> Result<Self> {
        Ok(EncoderLayer {
            norm_attn: LayerNorm::new(params, &format!("{name}.norm_attn"), dims.d_model),
            self_attn: MultiHeadAttention::new(
                params,
                &format!("{name}.self_attn"),
                dims.d_model,
                dims.heads,
                dims.attention_scaling,
                rng,
            )?,
            norm_ff: LayerNorm::new(params, &format!("{name}.norm_ff"), dims.d_model),
            ff: FeedForward::new(params, &format!("{name}.ff"), dims.d_model, dims.d_ff, rng),
            dropout: dims.dropout,
        })
    }

    /// `pad_mask` is a key-padding mask over `x`'s own positions.
    pub fn forward(&self, g: &mut Graph, x: Var, pad_mask: &AttentionMask) -> Result<Var> {
        check_len(g, x, pad_mask, "encoder layer")?;
        let h = self.norm_attn.forward(g, x)?;
        let a = self.self_attn.forward(g, h, h, Some(pad_mask))?;
        let x = residual(g, x, a, self.dropout)?;
        let h = self.norm_ff.forward(g, x)?;
        let f = self.ff.forward(g, h)?;
        residual(g, x, f, self.dropout)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_src: LayerNorm,
    pub src_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
    pub dropout: Real,
}

impl DecoderLayer {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, dims: LayerDims, rng: &mut R) -> Result<Self> {
        let mha = |params: &mut ParamSet, part: &str, rng: &mut R| {
            MultiHeadAttention::new(
                params,
                &format!("{name}.{part}"),
                dims.d_model,
                dims.heads,
                dims.attention_scaling,
                rng,
            )
        };
        Ok(DecoderLayer {
            norm_self: LayerNorm::new(params, &format!("{name}.norm_self"), dims.d_model),
            self_attn: mha(params, "self_attn", rng)?,
            norm_src: LayerNorm::new(params, &format!("{name}.norm_src"), dims.d_model),
            src_attn: mha(params, "src_attn", rng)?,
            norm_ff: LayerNorm::new(params, &format!("{name}.norm_ff"), dims.d_model),
            ff: FeedForward::new(params, &format!("{name}.ff"), dims.d_model, dims.d_ff, rng),
            dropout: dims.dropout,
        })
    }

    /// `self_mask` must be causal; `mem_mask` is [batch, len_y, len_memory].
    pub fn forward(
        &self,
        g: &mut Graph,
        y: Var,
        memory: Var,
        self_mask: &AttentionMask,
        mem_mask: &AttentionMask,
    ) -> Result<Var> {
        check_len(g, y, self_mask, "decoder self-attention")?;
        check_len(g, y, mem_mask, "decoder source attention")?;
        let h = self.norm_self.forward(g, y)?;
        let a = self.self_attn.forward(g, h, h, Some(self_mask))?;
        let y = residual(g, y, a, self.dropout)?;
        let h = self.norm_src.forward(g, y)?;
        let a = self.src_attn.forward(g, h, memory, Some(mem_mask))?;
        let y = residual(g, y, a, self.dropout)?;
        let h = self.norm_ff.forward(g, y)?;
        let f = self.ff.forward(g, h)?;
        residual(g, y, f, self.dropout)
    }
}

/// Encoder layers followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        n_layers: usize,
        dims: LayerDims,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(params, &format!("{name}.layers.{i}"), dims, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            layers,
            norm: LayerNorm::new(params, &format!("{name}.norm"), dims.d_model),
        })
    }

    pub fn num_params(n_layers: usize, dims: &LayerDims) -> usize {
        n_layers * dims.encoder_layer_params() + 2 * dims.d_model
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, pad_mask: &AttentionMask) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x, pad_mask)?;
        }
        self.norm.forward(g, x)
    }
}

/// Decoder layers followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
}

impl Decoder {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        n_layers: usize,
        dims: LayerDims,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| DecoderLayer::new(params, &format!("{name}.layers.{i}"), dims, rng))
            .collect::<Result<_>>()?;
        Ok(Decoder {
            layers,
            norm: LayerNorm::new(params, &format!("{name}.norm"), dims.d_model),
        })
    }

    pub fn num_params(n_layers: usize, dims: &LayerDims) -> usize {
        n_layers * dims.decoder_layer_params() + 2 * dims.d_model
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        mut y: Var,
        memory: Var,
        self_mask: &AttentionMask,
        mem_mask: &AttentionMask,
    ) -> Result<Var> {
        for layer in &self.layers {
            y = layer.forward(g, y, memory, self_mask, mem_mask)?;
        }
        self.norm.forward(g, y)
    }
}
