#![allow(dead_code)]

use avasr_core::tensor::{finite_diff_grad, max_relative_error, Graph, ParamSet, Real, Var};

pub const FD_STEP: Real = 1e-5;
pub const FD_TOL: Real = 1e-4;
pub const FD_FLOOR: Real = 1e-5;

/// Max relative error between backprop and central differences for every
/// scalar in `params`, for the scalar loss built by `loss`.
pub fn param_grad_error<F>(params: &mut ParamSet, loss: F) -> Real
where
    F: for<'a> Fn(&mut Graph<'a>) -> Var,
{
    let analytic = {
        let mut g = Graph::with_params(params);
        let l = loss(&mut g);
        let grads = g.backward(l).unwrap();
        params.zero_grad();
        params.accumulate(&grads);
        params.flatten_grads()
    };
    let point = params.flatten();
    let mut scratch = params.clone();
    let numeric = finite_diff_grad(
        |p| {
            scratch.unflatten(p);
            let mut g = Graph::with_params(&scratch);
            let l = loss(&mut g);
            g.value(l).item()
        },
        &point,
        FD_STEP,
    );
    params.zero_grad();
    max_relative_error(&analytic, &numeric, FD_FLOOR)
}

/// Brute-force word-level edit distance over the full DP matrix.
pub fn dp_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}


use avasr_core::data::{ensure_stacked, Batch, Utterance};
use avasr_core::model::{AvAsrModel, ModelConfig};
use avasr_core::synth::{generate, SynthConfig};
use avasr_core::tokenizer::{Resolution, Tokenizers};
use avasr_core::train::{label_smoothed_ce, multiresolution_loss};

/// Toy utterances with 3-d audio frames and 5-d video vectors.
pub fn tiny_corpus(n: usize, seed: u64) -> (Vec<Utterance>, Tokenizers) {
    let corpus = generate(&SynthConfig {
        seed,
        train: n,
        dev: 0,
        test: 0,
        feature_dim: 3,
        video_dim: 5,
        ..SynthConfig::default()
    });
    let lines: Vec<String> = corpus.train.iter().map(|u| u.transcript.clone()).collect();
    let tok = Tokenizers::train(&lines, 40).unwrap();
    (corpus.train, tok)
}

/// d_model 8, two heads, one encoder and one decoder layer, no dropout.
pub fn tiny_config(tok: &Tokenizers) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_ff: 16,
        dropout: 0.0,
        feature_dim: 3,
        stack_factor: 2,
        video_dim: 5,
        char_vocab_size: tok.vocab_size(Resolution::Character),
        subword_vocab_size: tok.vocab_size(Resolution::Subword),
        ..ModelConfig::default()
    }
}

pub fn tiny_batch(cfg: &ModelConfig, utts: &[Utterance], tok: &Tokenizers) -> Batch {
    let stacked: Vec<Utterance> = utts
        .iter()
        .map(|u| ensure_stacked(u.clone(), cfg.stack_factor).unwrap())
        .collect();
    let refs: Vec<&Utterance> = stacked.iter().collect();
    Batch::from_utterances(&refs, tok, cfg.video_dim).unwrap()
}

/// γ-weighted label-smoothed loss of a teacher-forced pass.
pub fn batch_loss(g: &mut Graph, model: &AvAsrModel, batch: &Batch, gamma: Real, eps: Real) -> Var {
    let logits = model.forward(g, batch, false).unwrap();
    let lc = label_smoothed_ce(g, logits.chars, &batch.chars.outputs(), &batch.chars.output_mask(), eps).unwrap();
    let ls = label_smoothed_ce(
        g,
        logits.subwords,
        &batch.subwords.outputs(),
        &batch.subwords.output_mask(),
        eps,
    )
    .unwrap();
    multiresolution_loss(g, lc, ls, gamma).unwrap()
}

pub fn set_param(model: &mut AvAsrModel, name: &str, values: &[Real]) {
    let id = model.params.id_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.params.get_mut(id).value.data_mut().copy_from_slice(values);
}
