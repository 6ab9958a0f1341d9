use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Inference-time treatment of the visual input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MissingVideo {
    /// Replace every video vector by zeros.
    Zeros,
    /// Replace every video vector by iid N(0, σ²) draws.
    Gaussian { sigma: Real },
    /// Force α to zero for the pass, leaving parameters untouched.
    GateAlpha,
}

impl MissingVideo {
    pub const DEFAULT_SIGMA: Real = 0.2;
}

impl FromStr for MissingVideo {
    type Err = Error;

    /// `zeros`, `gaussian`, `gaussian:<sigma>` or `gate_alpha`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "zeros" => Ok(MissingVideo::Zeros),
            None if s == "gate_alpha" => Ok(MissingVideo::GateAlpha),
            None if s == "gaussian" => Ok(MissingVideo::Gaussian {
                sigma: Self::DEFAULT_SIGMA,
            }),
            Some(("gaussian", sigma)) => match sigma.parse::<Real>() {
                Ok(sigma) if sigma >= 0.0 && sigma.is_finite() => Ok(MissingVideo::Gaussian { sigma }),
                _ => Err(Error::Config(format!("invalid gaussian sigma '{sigma}'"))),
            },
            _ => Err(Error::Config(format!(
                "unknown missing-video mode '{s}' (expected zeros, gaussian[:sigma] or gate_alpha)"
            ))),
        }
    }
}

impl std::fmt::Display for MissingVideo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MissingVideo::Zeros => f.write_str("zeros"),
            MissingVideo::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            MissingVideo::GateAlpha => f.write_str("gate_alpha"),
        }
    }
}

/// FNV-1a, stable across platforms and releases.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Returns the transformed batch and whether α must be gated. Gaussian draws
/// use one generator per utterance seeded from `seed` and the id, so the
/// result does not depend on how utterances are grouped into batches.
pub fn apply_missing_video_mode(batch: &Batch, mode: MissingVideo, seed: u64) -> (Batch, bool) {
    let mut out = batch.clone();
    let shape = batch.video.shape().to_vec();
    let vdim = shape[1] * shape[2];
    match mode {
        MissingVideo::GateAlpha => return (out, true),
        MissingVideo::Zeros => out.video = Tensor::zeros(&shape),
        MissingVideo::Gaussian { sigma } => {
            let mut data = Vec::with_capacity(batch.video.numel());
            for id in &batch.ids {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(id));
                data.extend(Tensor::randn(&[vdim], sigma, &mut rng).into_data());
            }
            out.video = Tensor::new(shape, data).expect("video shape");
        }
    }
    out.video_present = vec![true; batch.len()];
    (out, false)
}
