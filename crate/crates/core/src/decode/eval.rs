use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use super::beam::{beam_search, BeamConfig, Hypothesis, StepScorer};
use super::wer::{wer, WerStats};
use crate::data::{ensure_stacked, Batch, Utterance};
use crate::error::{Error, Result};
use crate::model::{apply_missing_video_mode, AvAsrModel, MissingVideo};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{normalize_text, Resolution, Tokenizers};

/// Treatment of the visual input during evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMode {
    Full,
    AudioOnlyZeros,
    AudioOnlyGaussian { sigma: Real },
    AudioOnlyGate,
}

impl EvalMode {
    pub fn missing_video(self) -> Option<MissingVideo> {
        match self {
            EvalMode::Full => None,
            EvalMode::AudioOnlyZeros => Some(MissingVideo::Zeros),
            EvalMode::AudioOnlyGaussian { sigma } => Some(MissingVideo::Gaussian { sigma }),
            EvalMode::AudioOnlyGate => Some(MissingVideo::GateAlpha),
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    /// `full`, `audio_only_zeros`, `audio_only_gaussian[:sigma]` or `audio_only_gate`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => return Ok(EvalMode::Full),
            "audio_only_zeros" => return Ok(EvalMode::AudioOnlyZeros),
            "audio_only_gate" => return Ok(EvalMode::AudioOnlyGate),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("audio_only_") {
            if let MissingVideo::Gaussian { sigma } = rest.parse::<MissingVideo>()? {
                return Ok(EvalMode::AudioOnlyGaussian { sigma });
            }
        }
        Err(Error::Config(format!(
            "unknown evaluation mode '{s}' (expected full, audio_only_zeros, audio_only_gaussian[:sigma] or audio_only_gate)"
        )))
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalMode::Full => f.write_str("full"),
            EvalMode::AudioOnlyZeros => f.write_str("audio_only_zeros"),
            EvalMode::AudioOnlyGaussian { sigma } => write!(f, "audio_only_gaussian:{sigma}"),
            EvalMode::AudioOnlyGate => f.write_str("audio_only_gate"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: BeamConfig,
    pub resolution: Resolution,
    /// Seeds the Gaussian missing-video mode.
    pub seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: BeamConfig::default(),
            resolution: Resolution::Subword,
            seed: 0,
        }
    }
}

/// Scores next tokens with the model's decoder over a fixed encoder memory.
pub struct ModelScorer<'m> {
    pub model: &'m AvAsrModel,
    /// `[1, rows, d_model]`.
    pub memory: Tensor,
    pub mem_len: usize,
    pub resolution: Resolution,
}

impl<'m> ModelScorer<'m> {
    /// Encodes a single-utterance batch.
    pub fn new(model: &'m AvAsrModel, batch: &Batch, gate: bool, resolution: Resolution) -> Result<Self> {
        if batch.len() != 1 {
            return Err(Error::Contract("the model scorer decodes one utterance at a time".into()));
        }
        let mut g = model.graph();
        let memory = model.encode(&mut g, batch, gate)?;
        Ok(ModelScorer {
            model,
            memory: g.value(memory.var).clone(),
            mem_len: memory.lens[0],
            resolution,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size(self.resolution)
    }

    fn log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<Real>>> {
        let n = prefixes.len();
        let t = prefixes.first().map_or(0, Vec::len);
        if t == 0 || prefixes.iter().any(|p| p.len() != t) {
            return Err(Error::Contract("prefixes must be non-empty and of equal length".into()));
        }
        let ids: Vec<usize> = prefixes.concat();
        let mut g = self.model.graph();
        let mem = g.constant_ref(&self.memory);
        let logits = self
            .model
            .decode(&mut g, mem, &vec![self.mem_len; n], &ids, &vec![t; n], self.resolution)?;
        let v = self.vocab_size();
        let data = g.value(logits).data();
        Ok((0..n)
            .map(|i| {
                let row = &data[((i * t) + t - 1) * v..((i * t) + t) * v];
                let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<Real>().ln();
                row.iter().map(|x| x - lse).collect()
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub stats: WerStats,
    pub score: Real,
    /// Decoding hit the length limit without emitting EOS.
    pub unfinished: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub resolution: Resolution,
    pub fusion_enabled: bool,
    pub beam: usize,
    /// Sorted by utterance id.
    pub utterances: Vec<UtteranceResult>,
    pub totals: WerStats,
}

impl EvalReport {
    pub fn corpus_wer(&self) -> Real {
        self.totals.wer()
    }

    pub fn failed(&self) -> usize {
        self.utterances.iter().filter(|u| u.error.is_some()).count()
    }

    pub fn unfinished(&self) -> usize {
        self.utterances.iter().filter(|u| u.unfinished).count()
    }

    fn summary(&self) -> String {
        format!(
            "mode={} resolution={} fusion={} beam={} utterances={} failed={} unfinished={} ref_words={} S={} I={} D={} corpus_wer={:.6}",
            self.mode,
            self.resolution,
            crate::config::on_off(self.fusion_enabled),
            self.beam,
            self.utterances.len(),
            self.failed(),
            self.unfinished(),
            self.totals.ref_words,
            self.totals.substitutions,
            self.totals.insertions,
            self.totals.deletions,
            self.corpus_wer()
        )
    }

    /// Tab-separated per-utterance rows followed by a `#` summary line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tref_words\tsubstitutions\tinsertions\tdeletions\twer\tunfinished\terror\treference\thypothesis\n");
        for u in &self.utterances {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}",
                u.id,
                u.stats.ref_words,
                u.stats.substitutions,
                u.stats.insertions,
                u.stats.deletions,
                u.stats.wer(),
                u.unfinished,
                u.error.as_deref().unwrap_or("-").replace(['\t', '\n'], " "),
                u.reference,
                u.hypothesis
            );
        }
        let _ = writeln!(s, "# {}", self.summary());
        s
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let w = self.utterances.iter().map(|u| u.id.len()).max().unwrap_or(2).max(2);
        let mut s = format!("{:<w$}  {:>7}  {:>3} {:>3} {:>3}  hypothesis\n", "id", "WER", "S", "I", "D");
        for u in &self.utterances {
            let hyp = match &u.error {
                Some(e) => format!("[error: {e}]"),
                None if u.unfinished => format!("{} [unfinished]", u.hypothesis),
                None => u.hypothesis.clone(),
            };
            let _ = writeln!(
                s,
                "{:<w$}  {:>6.2}%  {:>3} {:>3} {:>3}  {hyp}",
                u.id,
                100.0 * u.stats.wer(),
                u.stats.substitutions,
                u.stats.insertions,
                u.stats.deletions
            );
        }
        let _ = writeln!(s, "{}", self.summary());
        s
    }
}

/// Beam-decodes one utterance and returns the best hypothesis, whether it
/// is unfinished, and its text after normalization.
pub fn decode_utterance(
    model: &AvAsrModel,
    tok: &Tokenizers,
    utt: &Utterance,
    mode: EvalMode,
    opts: &DecodeOptions,
) -> Result<(Hypothesis, bool, String)> {
    let utt = ensure_stacked(utt.clone(), model.config.stack_factor)?;
    let batch = Batch::from_utterances(&[&utt], tok, model.config.video_dim)?;
    let (batch, gate) = match mode.missing_video() {
        Some(m) => apply_missing_video_mode(&batch, m, opts.seed),
        None => (batch, false),
    };
    let scorer = ModelScorer::new(model, &batch, gate, opts.resolution)?;
    let res = beam_search(&scorer, &opts.beam)?;
    let text = normalize_text(&tok.decode(opts.resolution, res.best.content()));
    Ok((res.best, res.unfinished, text))
}

/// Decodes every utterance (in parallel) and scores it against its
/// transcript. Failures are recorded per utterance and scored as an empty
/// hypothesis.
pub fn evaluate(
    model: &AvAsrModel,
    tok: &Tokenizers,
    utts: &[Utterance],
    mode: EvalMode,
    opts: &DecodeOptions,
) -> EvalReport {
    let mut utterances: Vec<UtteranceResult> = utts
        .par_iter()
        .map(|u| {
            let reference = normalize_text(&u.transcript);
            let (hypothesis, score, unfinished, error) = match decode_utterance(model, tok, u, mode, opts) {
                Ok((h, unfinished, text)) => (text, h.score(opts.beam.norm), unfinished, None),
                Err(e) => (String::new(), Real::NEG_INFINITY, false, Some(e.to_string())),
            };
            UtteranceResult {
                id: u.id.clone(),
                stats: wer(&hypothesis, &reference),
                reference,
                hypothesis,
                score,
                unfinished,
                error,
            }
        })
        .collect();
    utterances.sort_by(|a, b| a.id.cmp(&b.id));
    let mut totals = WerStats::default();
    for u in &utterances {
        totals.merge(&u.stats);
    }
    EvalReport {
        mode,
        resolution: opts.resolution,
        fusion_enabled: model.config.fusion_enabled,
        beam: opts.beam.beam,
        utterances,
        totals,
    }
}
