use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Label-smoothed cross-entropy `−Σ_v q_v log p_v`, averaged over unmasked
/// positions, where `q` puts `1 − ε` on the gold id and `ε / (V − 1)` on
/// every other id.
///
/// `logits`: `[batch, steps, V]`; `targets` and `mask`: `[batch, steps]`.
pub fn label_smoothed_ce(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool], eps: Real) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let &[b, t, v] = shape.as_slice() else {
        return Err(Error::Contract(format!("logits must be [batch, steps, vocab], got {shape:?}")));
    };
    if targets.len() != b * t || mask.len() != b * t {
        return Err(Error::shape("label_smoothed_ce", &shape, &[targets.len(), mask.len()]));
    }
    if v < 2 {
        return Err(Error::Contract("label smoothing needs a vocabulary of at least 2".into()));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Contract("every target position is masked".into()));
    }
    let n = count as Real;
    let off = eps / (v - 1) as Real / n;
    let on = (1.0 - eps) / n;
    let mut q = vec![0.0; b * t * v];
    for (i, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if tgt >= v {
            return Err(Error::Contract(format!("target id {tgt} outside vocabulary of {v}")));
        }
        let row = &mut q[i * v..(i + 1) * v];
        row.fill(off);
        row[tgt] = on;
    }
    let q = g.constant(Tensor::new(shape, q)?);
    let logp = g.log_softmax(logits, 2)?;
    let weighted = g.mul(q, logp)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0))
}

/// `γ · L_subword + (1 − γ) · L_character`.
pub fn multiresolution_loss(g: &mut Graph, char_loss: Var, subword_loss: Var, gamma: Real) -> Result<Var> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    let s = g.scale(subword_loss, gamma);
    let c = g.scale(char_loss, 1.0 - gamma);
    g.add(s, c)
}
