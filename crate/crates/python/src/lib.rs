//! Python bindings: tokenizers, training, checkpoint loading, evaluation,
//! scoring and the synthetic corpus.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use avasr_core::checkpoint::Checkpoint;
use avasr_core::data::{load_manifest, load_utterances, stack_frames as stack, LoadOptions, Utterance};
use avasr_core::decode::{evaluate as run_eval, BeamConfig, DecodeOptions, EvalMode, LengthNorm, WerStats};
use avasr_core::model::{AvAsrModel, ModelConfig};
use avasr_core::selfcheck::{run as run_selfcheck, SelfCheckOptions};
use avasr_core::synth::{generate, write_corpus, SynthConfig};
use avasr_core::tensor::{Real, Tensor};
use avasr_core::tokenizer::{self, Resolution};
use avasr_core::train::{TrainConfig, Trainer};
use avasr_core::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::File { .. } | Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Contract(_) | Error::Parse { .. } | Error::Shape { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn resolution(name: &str) -> PyResult<Resolution> {
    match name {
        "char" | "character" => Ok(Resolution::Character),
        "subword" => Ok(Resolution::Subword),
        _ => Err(PyValueError::new_err(format!("unknown resolution '{name}' (expected char or subword)"))),
    }
}

fn load(manifest: &Path) -> PyResult<Vec<Utterance>> {
    let records = load_manifest(manifest, LoadOptions::default()).map_err(to_py)?;
    load_utterances(&records).map_err(to_py)
}

/// Character vocabulary and BPE model.
#[pyclass(name = "Tokenizers", frozen, from_py_object)]
#[derive(Clone)]
struct PyTokenizers(tokenizer::Tokenizers);

#[pymethods]
impl PyTokenizers {
    /// Learns both tokenizers from transcripts (normalized first).
    #[staticmethod]
    fn train(lines: Vec<String>, subword_vocab_size: usize) -> PyResult<Self> {
        let lines: Vec<String> = lines.iter().map(|l| tokenizer::normalize_text(l)).collect();
        tokenizer::Tokenizers::train(&lines, subword_vocab_size)
            .map(PyTokenizers)
            .map_err(to_py)
    }

    #[pyo3(signature = (text, resolution = "subword"))]
    fn encode(&self, text: &str, resolution: &str) -> PyResult<Vec<usize>> {
        Ok(self.0.encode(self::resolution(resolution)?, &tokenizer::normalize_text(text)))
    }

    #[pyo3(signature = (ids, resolution = "subword"))]
    fn decode(&self, ids: Vec<usize>, resolution: &str) -> PyResult<String> {
        Ok(self.0.decode(self::resolution(resolution)?, &ids))
    }

    #[pyo3(signature = (resolution = "subword"))]
    fn vocab_size(&self, resolution: &str) -> PyResult<usize> {
        Ok(self.0.vocab_size(self::resolution(resolution)?))
    }
}

/// Word-level alignment counts.
#[pyclass(name = "WerStats", frozen, get_all)]
struct PyWerStats {
    substitutions: usize,
    insertions: usize,
    deletions: usize,
    ref_words: usize,
    wer: Real,
}

impl From<WerStats> for PyWerStats {
    fn from(s: WerStats) -> Self {
        PyWerStats {
            substitutions: s.substitutions,
            insertions: s.insertions,
            deletions: s.deletions,
            ref_words: s.ref_words,
            wer: s.wer(),
        }
    }
}

#[pymethods]
impl PyWerStats {
    fn __repr__(&self) -> String {
        format!(
            "WerStats(S={}, I={}, D={}, ref_words={}, wer={})",
            self.substitutions, self.insertions, self.deletions, self.ref_words, self.wer
        )
    }
}

/// Evaluation outcome: corpus WER plus the per-utterance report.
#[pyclass(name = "EvalReport", frozen, get_all)]
struct PyEvalReport {
    corpus_wer: Real,
    failed: usize,
    unfinished: usize,
    /// (id, reference, hypothesis) per utterance, sorted by id.
    hypotheses: Vec<(String, String, String)>,
    tsv: String,
    table: String,
}

/// A trained model with its tokenizers.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    model: AvAsrModel,
    tokenizers: tokenizer::Tokenizers,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, tokenizers) = Checkpoint::load(&path)
            .and_then(Checkpoint::model_and_tokenizers)
            .map_err(to_py)?;
        Ok(PyModel { model, tokenizers })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    /// Current value of the fusion weight α.
    #[getter]
    fn alpha(&self) -> Real {
        self.model.alpha_value()
    }

    /// Model settings as strings.
    #[getter]
    fn config(&self) -> BTreeMap<String, String> {
        kv_map(&self.model.config.to_kv())
    }

    #[getter]
    fn tokenizers(&self) -> PyTokenizers {
        PyTokenizers(self.tokenizers.clone())
    }

    /// Decodes and scores every utterance in `manifest`.
    #[pyo3(signature = (manifest, mode = "full", beam = 5, no_fusion = false, resolution = "subword", max_len = 200, length_norm = 0.7, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        py: Python<'_>,
        manifest: PathBuf,
        mode: &str,
        beam: usize,
        no_fusion: bool,
        resolution: &str,
        max_len: usize,
        length_norm: Real,
        seed: u64,
    ) -> PyResult<PyEvalReport> {
        let mode: EvalMode = mode.parse().map_err(to_py)?;
        let opts = DecodeOptions {
            beam: BeamConfig {
                beam,
                norm: LengthNorm::Power(length_norm),
                max_len,
                ..BeamConfig::default()
            },
            resolution: self::resolution(resolution)?,
            seed,
        };
        let utts = load(&manifest)?;
        let mut model = self.model.clone();
        if no_fusion {
            model.config.fusion_enabled = false;
        }
        let report = py.detach(|| run_eval(&model, &self.tokenizers, &utts, mode, &opts));
        Ok(PyEvalReport {
            corpus_wer: report.corpus_wer(),
            failed: report.failed(),
            unfinished: report.unfinished(),
            hypotheses: report
                .utterances
                .iter()
                .map(|u| (u.id.clone(), u.reference.clone(), u.hypothesis.clone()))
                .collect(),
            tsv: report.to_tsv(),
            table: report.to_table(),
        })
    }
}

fn kv_map(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Outcome of a training run.
#[pyclass(name = "FitReport", frozen, get_all)]
struct PyFitReport {
    epochs: usize,
    best_epoch: usize,
    best_dev_loss: Real,
    stop: String,
    checkpoint: PathBuf,
}

/// Trains a model and writes checkpoints and metrics under `out_dir`.
///
/// `config` maps model and training keys (as in the config file) to values.
/// Tokenizers are learned from the training transcripts unless given.
#[pyfunction]
#[pyo3(signature = (train_manifest, dev_manifest, out_dir, config = None, tokenizers = None))]
fn train(
    py: Python<'_>,
    train_manifest: PathBuf,
    dev_manifest: PathBuf,
    out_dir: PathBuf,
    config: Option<BTreeMap<String, String>>,
    tokenizers: Option<PyTokenizers>,
) -> PyResult<PyFitReport> {
    let mut model = ModelConfig::default();
    let mut cfg = TrainConfig::default();
    for (k, v) in config.unwrap_or_default() {
        if !model.set(&k, &v).map_err(to_py)? && !cfg.set(&k, &v).map_err(to_py)? {
            return Err(PyValueError::new_err(format!("unknown config key '{k}'")));
        }
    }
    let train_utts = load(&train_manifest)?;
    let dev_utts = load(&dev_manifest)?;
    let tok = match tokenizers {
        Some(t) => t.0,
        None => {
            let lines: Vec<String> = train_utts.iter().map(|u| u.transcript.clone()).collect();
            tokenizer::Tokenizers::train(&lines, model.subword_vocab_size).map_err(to_py)?
        }
    };
    let mut trainer = Trainer::new(model, cfg, tok).map_err(to_py)?;
    let report = py
        .detach(|| trainer.fit(&train_utts, &dev_utts, Some(&out_dir)))
        .map_err(to_py)?;
    Ok(PyFitReport {
        epochs: report.epochs.len(),
        best_epoch: report.best_epoch,
        best_dev_loss: report.best_dev_loss,
        stop: format!("{:?}", report.stop),
        checkpoint: out_dir.join("best.ckpt"),
    })
}

#[pyfunction]
fn wer(hypothesis: &str, reference: &str) -> PyWerStats {
    avasr_core::decode::wer(hypothesis, reference).into()
}

#[pyfunction]
fn normalize_text(text: &str) -> String {
    tokenizer::normalize_text(text)
}

/// Concatenates each group of `k` frames; the tail is zero-padded.
#[pyfunction]
fn stack_frames(frames: Vec<Vec<Real>>, k: usize) -> PyResult<Vec<Vec<Real>>> {
    let d = frames.first().map_or(0, Vec::len);
    if frames.iter().any(|f| f.len() != d) {
        return Err(PyValueError::new_err("all frames must have the same length"));
    }
    let t = Tensor::new(vec![frames.len(), d], frames.concat()).map_err(to_py)?;
    let s = stack(&t, k).map_err(to_py)?;
    Ok(s.data().chunks(s.shape()[1].max(1)).map(<[Real]>::to_vec).collect())
}

/// Writes the synthetic corpus (`train.tsv`, `dev.tsv`, `test.tsv`, `feats/`).
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 7, train = 30, dev = 10, test = 10))]
fn synth(out_dir: PathBuf, seed: u64, train: usize, dev: usize, test: usize) -> PyResult<()> {
    let corpus = generate(&SynthConfig {
        seed,
        train,
        dev,
        test,
        ..SynthConfig::default()
    });
    std::fs::create_dir_all(&out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    write_corpus(&corpus, &out_dir).map_err(to_py)
}

/// Runs the gradient and oracle suites; returns (name, passed, detail).
#[pyfunction]
#[pyo3(signature = (gradient_seeds = 20, beam_models = 50, wer_pairs = 1000, seed = 0))]
fn selfcheck(py: Python<'_>, gradient_seeds: u64, beam_models: u64, wer_pairs: usize, seed: u64) -> Vec<(String, bool, String)> {
    let opts = SelfCheckOptions {
        gradient_seeds,
        beam_models,
        wer_pairs,
        seed,
    };
    py.detach(|| run_selfcheck(&opts))
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pymodule]
fn avasr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTokenizers>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyWerStats>()?;
    m.add_class::<PyEvalReport>()?;
    m.add_class::<PyFitReport>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(stack_frames, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    Ok(())
}
