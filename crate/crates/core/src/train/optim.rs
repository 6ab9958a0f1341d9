use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Linear warmup to the base rate, then inverse-square-root decay.
    WarmupInvSqrt,
    Constant,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup_inv_sqrt" => Ok(Schedule::WarmupInvSqrt),
            "constant" => Ok(Schedule::Constant),
            _ => Err(Error::Config(format!(
                "unknown schedule '{s}' (expected warmup_inv_sqrt or constant)"
            ))),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::WarmupInvSqrt => "warmup_inv_sqrt",
            Schedule::Constant => "constant",
        })
    }
}

/// `base_lr · min(step / warmup, sqrt(warmup / step))` for steps from 1.
pub fn lr_schedule(step: u64, base_lr: Real, warmup: u64) -> Real {
    if warmup == 0 {
        return base_lr;
    }
    let (s, w) = (step.max(1) as Real, warmup as Real);
    base_lr * (s / w).min((w / s).sqrt())
}

impl Schedule {
    pub fn lr(self, step: u64, base_lr: Real, warmup: u64) -> Real {
        match self {
            Schedule::WarmupInvSqrt => lr_schedule(step, base_lr, warmup),
            Schedule::Constant => base_lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was not finite; nothing was changed.
    Skipped,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update from the gradients stored in `params`.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn update(&mut self, params: &mut ParamSet, lr: Real, cfg: &AdamConfig) -> StepOutcome {
        if params
            .iter()
            .any(|p| p.grad.as_ref().is_some_and(|g| !g.all_finite()))
        {
            return StepOutcome::Skipped;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = &p.grad else { continue };
            let (m, v, g) = (m.data_mut(), v.data_mut(), g.data());
            for (((w, m), v), &g) in p.value.data_mut().iter_mut().zip(m).zip(v).zip(g) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        }
        StepOutcome::Applied
    }

    /// Checks that buffers line up with `params`.
    pub fn matches(&self, params: &ParamSet) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape())
    }
}

/// Global L2 norm of all stored gradients.
pub fn grad_norm(params: &ParamSet) -> Real {
    params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<Real>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: Real) -> Real {
    let norm = grad_norm(params);
    if max_norm > 0.0 && norm.is_finite() && norm > max_norm {
        let f = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|x| *x *= f);
            }
        }
    }
    norm
}
