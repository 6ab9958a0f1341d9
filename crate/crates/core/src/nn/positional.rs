use crate::tensor::{Real, Tensor};

/// Fixed sine/cosine position table, shape [length, d_model]:
/// even columns `sin(pos / 10000^(2i/d))`, odd columns the matching cosine.
pub fn sinusoidal_positions(length: usize, d_model: usize) -> Tensor {
    assert!(length >= 1 && d_model >= 1);
    Tensor::from_fn(&[length, d_model], |idx| {
        let (pos, col) = (idx / d_model, idx % d_model);
        let pair = (col / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
        let v = if col % 2 == 0 { angle.sin() } else { angle.cos() };
        v as Real
    })
}
