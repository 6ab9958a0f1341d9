use rand::Rng;

use super::layers::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSet, Real, Tensor, Var};

/// Added to disallowed scores before the softmax.
pub const MASK_FILL: Real = -1e9;

/// Which key positions each query may attend to, shaped [batch, len_q, len_kv].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    batch: usize,
    len_q: usize,
    len_kv: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Fails if any query row allows no key at all.
    pub fn new(batch: usize, len_q: usize, len_kv: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != batch * len_q * len_kv {
            return Err(Error::shape(
                "attention mask",
                &[batch, len_q, len_kv],
                &[allowed.len()],
            ));
        }
        if let Some(row) = allowed
            .chunks(len_kv)
            .position(|row| !row.iter().any(|&a| a))
        {
            return Err(Error::Contract(format!(
                "attention mask row {} (batch {}, query {}) allows no keys",
                row,
                row / len_q,
                row % len_q
            )));
        }
        Ok(AttentionMask {
            batch,
            len_q,
            len_kv,
            allowed,
        })
    }

    /// Every query may attend to every key.
    pub fn full(batch: usize, len_q: usize, len_kv: usize) -> Self {
        AttentionMask {
            batch,
            len_q,
            len_kv,
            allowed: vec![true; batch * len_q * len_kv],
        }
    }

    /// Keys at or beyond each sequence's length are hidden.
    pub fn key_padding(key_lens: &[usize], len_q: usize, len_kv: usize) -> Result<Self> {
        let mut allowed = Vec::with_capacity(key_lens.len() * len_q * len_kv);
        for &len in key_lens {
            for _ in 0..len_q {
                allowed.extend((0..len_kv).map(|k| k < len));
            }
        }
        Self::new(key_lens.len(), len_q, len_kv, allowed)
    }

    /// Causal mask combined with target padding: query `i` sees keys
    /// `k <= i` with `k < len`.
    pub fn causal(lens: &[usize], len: usize) -> Result<Self> {
        let mut allowed = Vec::with_capacity(lens.len() * len * len);
        for &l in lens {
            for q in 0..len {
                allowed.extend((0..len).map(|k| k <= q && k < l));
            }
        }
        Self::new(lens.len(), len, len, allowed)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.len_q, self.len_kv)
    }

    pub fn is_allowed(&self, b: usize, q: usize, k: usize) -> bool {
        self.allowed[(b * self.len_q + q) * self.len_kv + k]
    }

    /// Additive form (0 or [`MASK_FILL`]) shaped `[batch, 1, …, len_q, len_kv]`
    /// with `rank` axes in total.
    pub fn additive(&self, rank: usize) -> Tensor {
        let mut shape = vec![self.batch];
        shape.extend(std::iter::repeat_n(1, rank.saturating_sub(3)));
        shape.extend([self.len_q, self.len_kv]);
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_FILL })
            .collect();
        Tensor::new(shape, data).expect("mask shape")
    }
}

/// Keys, values and queries for one attention call. Shapes are
/// `[batch, …, len, d]`; keys and values share `len_kv`.
pub struct AttentionInputs<'m> {
    pub keys: Var,
    pub values: Var,
    pub queries: Var,
    pub mask: Option<&'m AttentionMask>,
}

/// `softmax(Q·Kᵀ / √d + mask) · V`, optionally without the `1/√d` factor.
pub fn scaled_dot_attention(g: &mut Graph, inputs: AttentionInputs, scaling: bool) -> Result<Var> {
    let AttentionInputs {
        keys,
        values,
        queries,
        mask,
    } = inputs;
    let (ks, vs, qs) = (g.shape(keys).to_vec(), g.shape(values).to_vec(), g.shape(queries).to_vec());
    let rank = qs.len();
    if rank < 3 || ks.len() != rank || vs.len() != rank {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if ks[..rank - 1] != vs[..rank - 1] || ks[rank - 1] != qs[rank - 1] || (ks[0] != qs[0] && ks[0] != 1) {
        return Err(Error::shape("attention", &ks, &vs));
    }
    let d = qs[rank - 1];
    let kt = g.transpose(keys, rank - 2, rank - 1)?;
    let mut scores = g.matmul(queries, kt)?;
    if scaling {
        scores = g.scale(scores, 1.0 / (d as Real).sqrt());
    }
    if let Some(mask) = mask {
        let (b, lq, lk) = mask.dims();
        if b != qs[0] || lq != qs[rank - 2] || lk != ks[rank - 2] {
            return Err(Error::shape(
                "attention mask",
                &[b, lq, lk],
                &[qs[0], qs[rank - 2], ks[rank - 2]],
            ));
        }
        let add = g.constant(mask.additive(rank));
        scores = g.add(scores, add)?;
    }
    let weights = g.softmax(scores, rank - 1)?;
    g.matmul(weights, values)
}

/// Multi-head attention. Self-attention when `q_src` and `kv_src` are the
/// same tensor; cross-modal when keys/values come from another modality.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub scaling: bool,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        d_model: usize,
        heads: usize,
        scaling: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let mut proj = |p: &str| Linear::new(params, &format!("{name}.{p}"), d_model, d_model, rng);
        Ok(MultiHeadAttention {
            heads,
            d_model,
            scaling,
            w_q: proj("w_q"),
            w_k: proj("w_k"),
            w_v: proj("w_v"),
            w_o: proj("w_o"),
        })
    }

    pub fn num_params(d_model: usize) -> usize {
        4 * Linear::num_params(d_model, d_model)
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], self.heads, self.d_model / self.heads])?;
        g.transpose(x, 1, 2)
    }

    /// `q_src`: [batch, len_q, d_model]; `kv_src`: [batch or 1, len_kv, d_model].
    pub fn forward(
        &self,
        g: &mut Graph,
        q_src: Var,
        kv_src: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (qs, ks) = (g.shape(q_src).to_vec(), g.shape(kv_src).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[2] != self.d_model || ks[2] != self.d_model {
            return Err(Error::shape("multi-head attention", &qs, &ks));
        }
        let q = self.w_q.forward(g, q_src)?;
        let k = self.w_k.forward(g, kv_src)?;
        let v = self.w_v.forward(g, kv_src)?;
        let (q, k, v) = (
            self.split_heads(g, q)?,
            self.split_heads(g, k)?,
            self.split_heads(g, v)?,
        );
        let out = scaled_dot_attention(
            g,
            AttentionInputs {
                keys: k,
                values: v,
                queries: q,
                mask,
            },
            self.scaling,
        )?;
        let out = g.transpose(out, 1, 2)?;
        let out = g.reshape(out, &[qs[0], qs[1], self.d_model])?;
        self.w_o.forward(g, out)
    }
}
