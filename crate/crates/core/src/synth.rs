//! Deterministic toy corpus for desk-scale experiments.
//!
//! Audio frames are noisy per-letter prototypes (two frames per letter, a
//! short silence between words). Homophone pairs share one pronunciation and
//! differ only in spelling; the spelling follows the utterance topic, which
//! is visible only in the pooled video vector (a per-topic prototype plus
//! noise). Audio alone therefore cannot tell "flour" from "flower".

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_split, Utterance, FRAME_STEP_S};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::tensor::{Real, Tensor};
use crate::train::{Schedule, TrainConfig};

/// (kitchen spelling, field spelling); both pronounced like the first.
pub const HOMOPHONES: &[(&str, &str)] = &[
    ("flour", "flower"),
    ("thyme", "time"),
    ("leek", "leak"),
    ("roll", "role"),
];
pub const NEUTRAL_WORDS: &[&str] = &["add", "some", "the", "now", "good", "see"];
pub const TOPIC_WORDS: [&[&str]; 2] = [&["stir", "bake", "salt"], &["kick", "run", "goal"]];
pub const TOPIC_NAMES: [&str; 2] = ["kitchen", "field"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub feature_dim: usize,
    pub video_dim: usize,
    pub frames_per_letter: usize,
    pub silence_frames: usize,
    /// Std of the noise added to audio prototypes.
    pub audio_noise: Real,
    /// Std of the noise added to topic prototypes.
    pub video_noise: Real,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            train: 30,
            dev: 10,
            test: 10,
            feature_dim: 43,
            video_dim: 2048,
            frames_per_letter: 2,
            silence_frames: 2,
            audio_noise: 0.3,
            video_noise: 0.5,
        }
    }
}

/// Subword vocabulary size used with the toy corpus.
pub const TOY_SUBWORD_VOCAB: usize = 48;

/// A model small enough to train on the toy corpus in about a minute.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        heads: 4,
        enc_layers: 1,
        dec_layers: 1,
        d_ff: 64,
        dropout: 0.1,
        stack_factor: 2,
        ..ModelConfig::default()
    }
}

pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: 3e-3,
        warmup_steps: 100,
        schedule: Schedule::WarmupInvSqrt,
        max_epochs: 1000,
        patience: 8,
        seed,
        batch_frames: 400,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl SynthCorpus {
    pub fn transcripts(&self) -> Vec<String> {
        self.train.iter().map(|u| u.transcript.clone()).collect()
    }
}

struct Prototypes {
    letters: Vec<Vec<Real>>,
    topics: [Vec<Real>; 2],
}

fn pronunciation(word: &str) -> &str {
    HOMOPHONES
        .iter()
        .find(|(_, field)| *field == word)
        .map_or(word, |(kitchen, _)| kitchen)
}

/// `<neutral> <neutral or topic word> <homophone>`; the homophone is
/// spelled according to the topic.
fn sentence(rng: &mut ChaCha8Rng, topic: usize) -> Vec<&'static str> {
    let first = *NEUTRAL_WORDS.choose(rng).unwrap();
    let second = if rng.random_bool(0.3) {
        *TOPIC_WORDS[topic].choose(rng).unwrap()
    } else {
        *NEUTRAL_WORDS.choose(rng).unwrap()
    };
    let (kitchen, field) = *HOMOPHONES.choose(rng).unwrap();
    vec![first, second, if topic == 0 { kitchen } else { field }]
}

fn utterance(cfg: &SynthConfig, protos: &Prototypes, rng: &mut ChaCha8Rng, id: String) -> Utterance {
    let topic = rng.random_range(0..2);
    let words = sentence(rng, topic);
    let d = cfg.feature_dim;
    let mut frames: Vec<Real> = Vec::new();
    let noise = |frames: &mut Vec<Real>, base: Option<&[Real]>, rng: &mut ChaCha8Rng| {
        let n = Tensor::randn(&[d], cfg.audio_noise, rng).into_data();
        match base {
            Some(b) => frames.extend(b.iter().zip(n).map(|(p, e)| p + e)),
            None => frames.extend(n),
        }
    };
    for _ in 0..cfg.silence_frames {
        noise(&mut frames, None, rng);
    }
    for w in &words {
        for c in pronunciation(w).bytes() {
            let proto = &protos.letters[(c - b'a') as usize];
            for _ in 0..cfg.frames_per_letter {
                noise(&mut frames, Some(proto), rng);
            }
        }
        for _ in 0..cfg.silence_frames {
            noise(&mut frames, None, rng);
        }
    }
    // Round through f32 so in-memory values equal what a feature file holds.
    let frames: Vec<Real> = frames.into_iter().map(|x| x as f32 as Real).collect();
    let rows = frames.len() / d;
    let video: Vec<Real> = protos.topics[topic]
        .iter()
        .zip(Tensor::randn(&[cfg.video_dim], cfg.video_noise, rng).into_data())
        .map(|(p, e)| (p + e) as f32 as Real)
        .collect();
    Utterance {
        id,
        audio: Tensor::new(vec![rows, d], frames).expect("frame buffer"),
        stack: 1,
        video: Some(video),
        transcript: words.join(" "),
        duration_s: rows as f64 * FRAME_STEP_S,
        chunk_spans: Vec::new(),
    }
}

/// Generates train/dev/test splits; identical configs give identical corpora.
pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = Prototypes {
        letters: (0..26)
            .map(|_| Tensor::randn(&[cfg.feature_dim], 1.0, &mut rng).into_data())
            .collect(),
        topics: [
            Tensor::randn(&[cfg.video_dim], 1.0, &mut rng).into_data(),
            Tensor::randn(&[cfg.video_dim], 1.0, &mut rng).into_data(),
        ],
    };
    let mut split = |name: &str, n: usize| -> Vec<Utterance> {
        (0..n)
            .map(|i| utterance(cfg, &protos, &mut rng, format!("{name}-{i:03}")))
            .collect()
    };
    SynthCorpus {
        train: split("train", cfg.train),
        dev: split("dev", cfg.dev),
        test: split("test", cfg.test),
    }
}

/// Writes `feats/` plus `train.tsv`, `dev.tsv` and `test.tsv` under `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    for (name, utts) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        save_split(utts, dir, &format!("{name}.tsv"))?;
    }
    Ok(())
}
