//! Gradient and oracle suites runnable from the command line.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    chunk_records, ensure_stacked, filter_long, stack_frames, unstack_frames, Batch, ChunkSpan, Utterance,
};
use crate::decode::{align, beam_search, evaluate, BeamConfig, DecodeOptions, EvalMode, Hypothesis, LengthNorm, ModelScorer, StepScorer};
use crate::model::{AvAsrModel, ModelConfig};
use crate::synth::{generate, SynthConfig};
use crate::tensor::{finite_diff_grad, max_relative_error, Graph, Real, Tensor, Var};
use crate::tokenizer::{Resolution, Tokenizers, BOS, EOS, PAD};
use crate::train::{label_smoothed_ce, multiresolution_loss};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfCheckOptions {
    pub gradient_seeds: u64,
    pub beam_models: u64,
    pub wer_pairs: usize,
    pub seed: u64,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        SelfCheckOptions {
            gradient_seeds: 20,
            beam_models: 50,
            wer_pairs: 1000,
            seed: 0,
        }
    }
}

pub const FD_STEP: Real = 1e-5;
pub const FD_TOLERANCE: Real = 1e-4;
const FD_FLOOR: Real = 1e-5;

type Suite<'a> = (&'static str, Box<dyn Fn() -> Result<(bool, String)> + 'a>);

/// Runs every suite; a suite that errors counts as failed.
pub fn run(opts: &SelfCheckOptions) -> Vec<Check> {
    let suites: [Suite; 7] = [
        ("gradients", Box::new(|| gradient_check(opts.gradient_seeds, opts.seed))),
        ("single_key_attention", Box::new(|| single_key_check(opts.seed))),
        ("gamma_boundaries", Box::new(|| gamma_check(opts.seed))),
        ("alpha_gate", Box::new(|| gate_check(opts.seed))),
        ("beam_oracle", Box::new(|| beam_oracle_check(opts.beam_models, opts.seed))),
        ("wer_oracle", Box::new(|| Ok(wer_check(opts.wer_pairs, opts.seed)))),
        ("preprocessing", Box::new(|| preprocessing_check(opts.seed))),
    ];
    suites
        .into_iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            let detail = format!("{detail} ({:.1} s)", t0.elapsed().as_secs_f64());
            log::info!("selfcheck {name}: {} {detail}", if passed { "PASS" } else { "FAIL" });
            Check { name, passed, detail }
        })
        .collect()
}

/// Three-dimensional audio, five-dimensional video, 40 subwords.
fn tiny_corpus(n: usize, seed: u64) -> Result<(Vec<Utterance>, Tokenizers)> {
    let corpus = generate(&SynthConfig {
        seed,
        train: n,
        dev: 0,
        test: 0,
        feature_dim: 3,
        video_dim: 5,
        ..SynthConfig::default()
    });
    let tok = Tokenizers::train(&corpus.transcripts(), 40)?;
    Ok((corpus.train, tok))
}

/// d_model 8, two heads, one encoder and one decoder layer, fusion on.
pub fn gradcheck_model_config() -> ModelConfig {
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
        fusion_enabled: true,
        ..ModelConfig::default()
    }
}

fn single_batch(cfg: &ModelConfig, utts: &[Utterance], tok: &Tokenizers) -> Result<Batch> {
    let stacked = utts
        .iter()
        .map(|u| ensure_stacked(u.clone(), cfg.stack_factor))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Utterance> = stacked.iter().collect();
    Batch::from_utterances(&refs, tok, cfg.video_dim)
}

fn set_param(model: &mut AvAsrModel, name: &str, values: &[Real]) {
    let id = model.params.id_of(name).expect("parameter exists");
    model.params.get_mut(id).value.data_mut().copy_from_slice(values);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientReport {
    /// Over coordinates whose ±h perturbations stay on one linear piece of
    /// every ReLU.
    pub max_rel_error: Real,
    pub scalars: usize,
    /// Coordinates whose central difference straddles a ReLU kink, where
    /// the loss has no derivative to compare against.
    pub straddling: usize,
}

fn loss_value(g: &mut Graph, model: &AvAsrModel, batch: &Batch, gamma: Real, eps: Real) -> Result<Var> {
    let logits = model.forward(g, batch, false)?;
    let lc = label_smoothed_ce(g, logits.chars, &batch.chars.outputs(), &batch.chars.output_mask(), eps)?;
    let ls = label_smoothed_ce(g, logits.subwords, &batch.subwords.outputs(), &batch.subwords.output_mask(), eps)?;
    multiresolution_loss(g, lc, ls, gamma)
}

/// Backprop against central differences (step [`FD_STEP`]) of the γ=0.5
/// label-smoothed multiresolution loss, over every parameter of a fused toy
/// model with nonzero α.
pub fn gradient_error(seed: u64) -> Result<GradientReport> {
    let (gamma, eps) = (0.5, 0.1);
    let (utts, tok) = tiny_corpus(2, seed)?;
    let mut cfg = gradcheck_model_config();
    cfg.char_vocab_size = tok.vocab_size(Resolution::Character);
    cfg.subword_vocab_size = tok.vocab_size(Resolution::Subword);
    let mut model = AvAsrModel::new(cfg.clone(), seed)?;
    let alpha = ChaCha8Rng::seed_from_u64(seed).random_range(0.3..1.5);
    set_param(&mut model, "fusion.alpha", &[alpha]);
    let batch = single_batch(&cfg, &utts, &tok)?;

    let (analytic, pattern) = {
        let mut g = model.graph();
        let l = loss_value(&mut g, &model, &batch, gamma, eps)?;
        let pattern = g.relu_pattern();
        let grads = g.backward(l)?;
        let mut params = model.params.clone();
        params.zero_grad();
        params.accumulate(&grads);
        (params.flatten_grads(), pattern)
    };
    let point = model.params.flatten();
    let mut scratch = model.clone();
    let mut same_piece = Vec::with_capacity(2 * point.len());
    let mut failure = None;
    let numeric = finite_diff_grad(
        |p| {
            scratch.params.unflatten(p);
            let mut g = scratch.graph();
            match loss_value(&mut g, &scratch, &batch, gamma, eps) {
                Ok(l) => {
                    same_piece.push(g.relu_pattern() == pattern);
                    g.value(l).item()
                }
                Err(e) => {
                    failure = Some(e);
                    Real::NAN
                }
            }
        },
        &point,
        FD_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let smooth: Vec<usize> = (0..point.len())
        .filter(|&i| same_piece[2 * i] && same_piece[2 * i + 1])
        .collect();
    let pick = |v: &[Real]| smooth.iter().map(|&i| v[i]).collect::<Vec<_>>();
    Ok(GradientReport {
        max_rel_error: max_relative_error(&pick(&analytic), &pick(&numeric), FD_FLOOR),
        scalars: point.len(),
        straddling: point.len() - smooth.len(),
    })
}

fn gradient_check(seeds: u64, base: u64) -> Result<(bool, String)> {
    let mut worst: Real = 0.0;
    let (mut scalars, mut straddling) = (0, 0);
    for s in base..base + seeds {
        let r = gradient_error(s)?;
        worst = worst.max(r.max_rel_error);
        scalars += r.scalars;
        straddling += r.straddling;
    }
    Ok((
        worst < FD_TOLERANCE,
        format!(
            "max relative error {worst:.2e} over {seeds} seeds ({scalars} coordinates, {straddling} straddling a ReLU kink)"
        ),
    ))
}

fn single_key_check(seed: u64) -> Result<(bool, String)> {
    let (_, tok) = tiny_corpus(1, seed)?;
    let mut cfg = gradcheck_model_config();
    cfg.char_vocab_size = tok.vocab_size(Resolution::Character);
    cfg.subword_vocab_size = tok.vocab_size(Resolution::Subword);
    let model = AvAsrModel::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = model.graph();
    let q = g.constant(Tensor::randn(&[3, 7, 8], 1.0, &mut rng));
    let kv = g.constant(Tensor::randn(&[3, 1, 8], 1.0, &mut rng));
    let out = model.cross_attn.forward(&mut g, q, kv, None)?;
    let v = model.cross_attn.w_v.forward(&mut g, kv)?;
    let row = model.cross_attn.w_o.forward(&mut g, v)?;
    let (out, row) = (g.value(out), g.value(row));
    let mut exact = true;
    for b in 0..3 {
        for t in 0..7 {
            for j in 0..8 {
                exact &= out.at(&[b, t, j]) == row.at(&[b, 0, j]);
            }
        }
    }
    Ok((exact, "output rows equal the projected value row bit for bit".into()))
}

/// At γ=1 the loss is the subword loss and the character head gets exactly
/// zero gradient; γ=0 mirrors this.
fn gamma_check(seed: u64) -> Result<(bool, String)> {
    let (utts, tok) = tiny_corpus(3, seed)?;
    let mut cfg = gradcheck_model_config();
    cfg.char_vocab_size = tok.vocab_size(Resolution::Character);
    cfg.subword_vocab_size = tok.vocab_size(Resolution::Subword);
    let mut model = AvAsrModel::new(cfg.clone(), seed)?;
    set_param(&mut model, "fusion.alpha", &[0.7]);
    let batch = single_batch(&cfg, &utts, &tok)?;
    let mut ok = true;
    for (gamma, dead, live) in [(1.0, "char_head.weight", "subword_head.weight"), (0.0, "subword_head.weight", "char_head.weight")] {
        let mut g = model.graph();
        let logits = model.forward(&mut g, &batch, false)?;
        let lc = label_smoothed_ce(&mut g, logits.chars, &batch.chars.outputs(), &batch.chars.output_mask(), 0.1)?;
        let ls = label_smoothed_ce(&mut g, logits.subwords, &batch.subwords.outputs(), &batch.subwords.output_mask(), 0.1)?;
        let total = multiresolution_loss(&mut g, lc, ls, gamma)?;
        let single = if gamma == 1.0 { ls } else { lc };
        ok &= g.value(total).item() == g.value(single).item();
        let grads = g.backward(total)?;
        let mut params = model.params.clone();
        params.accumulate(&grads);
        let grad_of = |name: &str| {
            let p = params.get(params.id_of(name).expect("parameter exists"));
            p.grad.as_ref().map_or(0.0, |t| t.data().iter().map(|x| x.abs()).sum::<Real>())
        };
        ok &= grad_of(dead) == 0.0 && grad_of(live) > 0.0;
    }
    Ok((ok, "γ=1 and γ=0 reduce to one branch with exactly zero gradient to the other head".into()))
}

fn gate_check(seed: u64) -> Result<(bool, String)> {
    let (utts, tok) = tiny_corpus(4, seed)?;
    let mut cfg = gradcheck_model_config();
    cfg.char_vocab_size = tok.vocab_size(Resolution::Character);
    cfg.subword_vocab_size = tok.vocab_size(Resolution::Subword);
    let mut model = AvAsrModel::new(cfg, seed)?;
    set_param(&mut model, "fusion.alpha", &[1.5]);
    let mut off = model.clone();
    off.config.fusion_enabled = false;
    let opts = DecodeOptions {
        beam: BeamConfig {
            beam: 3,
            max_len: 12,
            ..BeamConfig::default()
        },
        ..DecodeOptions::default()
    };
    let gated = evaluate(&model, &tok, &utts, EvalMode::AudioOnlyGate, &opts);
    let audio = evaluate(&off, &tok, &utts, EvalMode::Full, &opts);
    let same = gated.corpus_wer().to_bits() == audio.corpus_wer().to_bits()
        && gated
            .utterances
            .iter()
            .zip(&audio.utterances)
            .all(|(a, b)| a.hypothesis == b.hypothesis && a.score.to_bits() == b.score.to_bits());
    Ok((
        same && gated.failed() == 0,
        format!("gated WER {} vs audio-only WER {}", gated.corpus_wer(), audio.corpus_wer()),
    ))
}

/// Best EOS-terminated sequence of at most `max_len` generated tokens under
/// `norm`, by enumeration.
pub fn enumerate_best<S: StepScorer + ?Sized>(
    scorer: &S,
    max_len: usize,
    banned: &[usize],
    norm: LengthNorm,
) -> Result<Option<Hypothesis>> {
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![(vec![BOS], 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        if prefix.len() > max_len {
            continue;
        }
        let row = scorer.log_probs(std::slice::from_ref(&prefix))?.remove(0);
        for (tok, &l) in row.iter().enumerate() {
            if banned.contains(&tok) {
                continue;
            }
            let mut tokens = prefix.clone();
            tokens.push(tok);
            if tok != EOS {
                stack.push((tokens, lp + l));
                continue;
            }
            let h = Hypothesis {
                tokens,
                log_prob: lp + l,
                finished: true,
            };
            let wins = best.as_ref().is_none_or(|b| {
                let (sh, sb) = (h.score(norm), b.score(norm));
                sh > sb || (sh == sb && h.tokens < b.tokens)
            });
            if wins {
                best = Some(h);
            }
        }
    }
    Ok(best)
}

/// Beam 64, three tokens, six subword ids with PAD and BOS banned: the beam
/// holds every prefix, so search must agree with enumeration.
fn beam_oracle_check(models: u64, base: u64) -> Result<(bool, String)> {
    let norm = LengthNorm::Power(0.7);
    let banned = vec![PAD, BOS];
    let (utts, tok) = tiny_corpus(1, base)?;
    let mut agree = 0;
    for seed in base..base + models {
        let mut cfg = gradcheck_model_config();
        cfg.char_vocab_size = tok.vocab_size(Resolution::Character);
        cfg.subword_vocab_size = 6;
        let mut model = AvAsrModel::new(cfg.clone(), seed)?;
        set_param(&mut model, "fusion.alpha", &[0.5]);
        let batch = single_batch(&cfg, &utts, &tok)?;
        let scorer = ModelScorer::new(&model, &batch, false, Resolution::Subword)?;
        let got = beam_search(
            &scorer,
            &BeamConfig {
                beam: 64,
                norm,
                max_len: 3,
                banned: banned.clone(),
            },
        )?;
        let want = enumerate_best(&scorer, 3, &banned, norm)?;
        agree += usize::from(want.as_ref() == Some(&got.best));
    }
    Ok((agree as u64 == models, format!("{agree}/{models} models agree with enumeration")))
}

/// Word-level edit distance from the full DP table.
pub fn dp_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn wer_check(pairs: usize, seed: u64) -> (bool, String) {
    const WORDS: [&str; 4] = ["a", "b", "c", "d"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = |rng: &mut ChaCha8Rng| -> Vec<&str> {
        let n = rng.random_range(0..=8);
        (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect()
    };
    let mut mismatches = 0;
    for _ in 0..pairs {
        let (h, r) = (words(&mut rng), words(&mut rng));
        let s = align(&h, &r);
        let consistent = s.edits() == dp_edit_distance(&h, &r)
            && s.ref_words == r.len()
            && s.insertions + r.len() == s.deletions + h.len();
        mismatches += usize::from(!consistent);
    }
    let hand = [
        ("the player makes a lay off", "the player makes a lay up", 1, 6),
        ("a b", "a b c", 1, 3),
        ("a b c d", "a b c", 1, 3),
        ("", "a b", 2, 2),
    ];
    let hand_ok = hand.iter().all(|&(h, r, edits, n)| {
        let s = crate::decode::wer(h, r);
        s.edits() == edits && s.ref_words == n
    });
    (
        mismatches == 0 && hand_ok,
        format!("{mismatches}/{pairs} pairs disagree with the DP oracle; hand cases {}", if hand_ok { "ok" } else { "wrong" }),
    )
}

fn preprocessing_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    for _ in 0..50 {
        let t = rng.random_range(1..20);
        let d = rng.random_range(1..6);
        let k = rng.random_range(1..5);
        let x = Tensor::randn(&[t, d], 1.0, &mut rng);
        let s = stack_frames(&x, k)?;
        ok &= s.shape() == [t.div_ceil(k), k * d];
        ok &= unstack_frames(&s, k, t)? == x;
    }

    let utt = |id: &str, duration_s: f64| Utterance {
        id: id.into(),
        audio: Tensor::zeros(&[1, 1]),
        stack: 1,
        video: None,
        transcript: String::new(),
        duration_s,
        chunk_spans: Vec::new(),
    };
    let items = [utt("a", 14.99), utt("b", 15.0), utt("c", 15.01)];
    let (kept, report) = filter_long(&items, 15.0);
    ok &= kept.iter().map(|u| u.id.as_str()).collect::<Vec<_>>() == ["a", "b"];
    ok &= report.kept == 2 && report.total == 3;

    let audio = Tensor::from_fn(&[10, 2], |i| i as Real);
    let long = Utterance {
        audio: audio.clone(),
        transcript: "one two".into(),
        chunk_spans: vec![
            ChunkSpan {
                start: 0,
                end: 4,
                text: "one".into(),
            },
            ChunkSpan {
                start: 4,
                end: 10,
                text: "two".into(),
            },
        ],
        ..utt("u", 0.1)
    };
    let chunks = chunk_records(&[long])?;
    ok &= chunks.len() == 2;
    ok &= chunks[0].audio == audio.slice_rows(0, 4)? && chunks[1].audio == audio.slice_rows(4, 10)?;
    ok &= chunks[0].transcript == "one" && chunks[1].id == "u-c1";
    Ok((ok, "stack round trip, filter boundary and chunk slicing".into()))
}
