//! Beam search, word error rate and the evaluation harness.

mod beam;
mod eval;
mod wer;

pub use beam::{beam_search, greedy_search, BeamConfig, BeamResult, Hypothesis, LengthNorm, StepScorer};
pub use eval::{decode_utterance, evaluate, DecodeOptions, EvalMode, EvalReport, ModelScorer, UtteranceResult};
pub use wer::{align, wer, WerStats};
