use std::path::Path;

use rayon::prelude::*;

use super::features::{read_features, write_features};
use super::manifest::{validate_spans, ChunkSpan, UtteranceRecord, FRAME_STEP_S};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::normalize_text;

/// An utterance with its features in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[rows, cols]`; each row holds `stack` consecutive raw frames.
    pub audio: Tensor,
    pub stack: usize,
    pub video: Option<Vec<Real>>,
    /// Normalized transcript.
    pub transcript: String,
    pub duration_s: f64,
    pub chunk_spans: Vec<ChunkSpan>,
}

impl Utterance {
    pub fn rows(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.audio.shape()[1]
    }

    pub fn load(record: &UtteranceRecord) -> Result<Self> {
        let ingest = |e: Error| Error::Ingestion {
            id: record.id.clone(),
            msg: e.to_string(),
        };
        let (h, audio) = read_features(&record.audio_path).map_err(ingest)?;
        let video = match &record.video_path {
            Some(p) => Some(read_features(p).map_err(ingest)?.1.into_data()),
            None => None,
        };
        Ok(Utterance {
            id: record.id.clone(),
            audio,
            stack: h.stack,
            video,
            transcript: normalize_text(&record.transcript),
            duration_s: record.duration_s,
            chunk_spans: record
                .chunk_spans
                .iter()
                .map(|c| ChunkSpan {
                    text: normalize_text(&c.text),
                    ..c.clone()
                })
                .collect(),
        })
    }

    /// Writes `<dir>/<id>.feat` (and `<id>.video.feat`) and returns the
    /// matching manifest record.
    pub fn save(&self, dir: &Path) -> Result<UtteranceRecord> {
        let stem: String = self
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect();
        let audio_path = dir.join(format!("{stem}.feat"));
        write_features(&audio_path, &self.audio, self.stack)?;
        let video_path = match &self.video {
            Some(v) => {
                let p = dir.join(format!("{stem}.video.feat"));
                write_features(&p, &Tensor::new(vec![1, v.len()], v.clone())?, 1)?;
                Some(p)
            }
            None => None,
        };
        Ok(UtteranceRecord {
            id: self.id.clone(),
            audio_path,
            video_path,
            duration_s: self.duration_s,
            transcript: self.transcript.clone(),
            chunk_spans: self.chunk_spans.clone(),
        })
    }
}

/// Writes features under `<dir>/feats/` and a manifest `<dir>/<file_name>`
/// whose paths are relative to `dir`. Returns the manifest path.
pub fn save_split(utts: &[Utterance], dir: &Path, file_name: &str) -> Result<std::path::PathBuf> {
    let feats = dir.join("feats");
    std::fs::create_dir_all(&feats).map_err(|e| Error::file(&feats, e))?;
    let relative = |p: std::path::PathBuf| Path::new("feats").join(p.file_name().expect("feature file name"));
    let mut records = Vec::with_capacity(utts.len());
    for u in utts {
        let mut r = u.save(&feats)?;
        r.audio_path = relative(r.audio_path);
        r.video_path = r.video_path.map(relative);
        records.push(r);
    }
    let path = dir.join(file_name);
    super::manifest::write_manifest(&path, &records)?;
    Ok(path)
}

/// Loads every record's features, reading files in parallel. Output order
/// follows input order.
pub fn load_utterances(records: &[UtteranceRecord]) -> Result<Vec<Utterance>> {
    records.par_iter().map(Utterance::load).collect()
}

pub trait Timed {
    fn duration_s(&self) -> f64;
}

impl Timed for UtteranceRecord {
    fn duration_s(&self) -> f64 {
        self.duration_s
    }
}

impl Timed for Utterance {
    fn duration_s(&self) -> f64 {
        self.duration_s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterReport {
    pub kept: usize,
    pub total: usize,
    pub kept_seconds: f64,
    pub total_seconds: f64,
}

impl FilterReport {
    /// Share of total audio time that survived the filter.
    pub fn retained_fraction(&self) -> f64 {
        if self.total_seconds == 0.0 {
            1.0
        } else {
            self.kept_seconds / self.total_seconds
        }
    }
}

/// Keeps items with duration ≤ `max_seconds` (boundary inclusive).
pub fn filter_long<T: Timed + Clone>(items: &[T], max_seconds: f64) -> (Vec<T>, FilterReport) {
    let kept: Vec<T> = items
        .iter()
        .filter(|r| r.duration_s() <= max_seconds)
        .cloned()
        .collect();
    let report = FilterReport {
        kept: kept.len(),
        total: items.len(),
        kept_seconds: kept.iter().map(Timed::duration_s).sum(),
        total_seconds: items.iter().map(Timed::duration_s).sum(),
    };
    log::info!(
        "filter_long(max {max_seconds} s): kept {}/{} utterances, {:.2}% of audio time",
        report.kept,
        report.total,
        100.0 * report.retained_fraction()
    );
    (kept, report)
}

/// Splits every utterance with chunk spans into one utterance per span
/// (id `<id>-c<i>`); the rest pass through unchanged.
pub fn chunk_records(utts: &[Utterance]) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for u in utts {
        if u.chunk_spans.is_empty() {
            out.push(u.clone());
            continue;
        }
        if u.stack != 1 {
            return Err(Error::Ingestion {
                id: u.id.clone(),
                msg: "chunking requires unstacked features".into(),
            });
        }
        validate_spans(&u.id, &u.chunk_spans, u.rows())?;
        for (i, span) in u.chunk_spans.iter().enumerate() {
            out.push(Utterance {
                id: format!("{}-c{i}", u.id),
                audio: u.audio.slice_rows(span.start, span.end)?,
                stack: 1,
                video: u.video.clone(),
                transcript: span.text.clone(),
                duration_s: (span.end - span.start) as f64 * FRAME_STEP_S,
                chunk_spans: Vec::new(),
            });
        }
    }
    Ok(out)
}

/// Concatenates each group of `k` consecutive rows; the last group is
/// zero-padded. `[T, d]` becomes `[ceil(T/k), k*d]`.
pub fn stack_frames(features: &Tensor, k: usize) -> Result<Tensor> {
    let &[t, d] = features.shape() else {
        return Err(Error::Contract(format!("stack_frames needs [T, d], got {:?}", features.shape())));
    };
    if k == 0 {
        return Err(Error::Config("stack factor must be at least 1".into()));
    }
    let rows = t.div_ceil(k);
    let mut data = features.data().to_vec();
    data.resize(rows * k * d, 0.0);
    Tensor::new(vec![rows, k * d], data)
}

/// Inverse of [`stack_frames`] that drops the zero tail beyond `frames`.
pub fn unstack_frames(stacked: &Tensor, k: usize, frames: usize) -> Result<Tensor> {
    let &[rows, w] = stacked.shape() else {
        return Err(Error::Contract(format!("unstack_frames needs [R, k*d], got {:?}", stacked.shape())));
    };
    if k == 0 || w % k != 0 || frames > rows * k || frames + k <= rows * k {
        return Err(Error::Contract(format!(
            "cannot unstack {:?} by {k} into {frames} frames",
            stacked.shape()
        )));
    }
    let d = w / k;
    Tensor::new(vec![frames, d], stacked.data()[..frames * d].to_vec())
}

/// Stacks an utterance's raw frames by `k`.
pub fn stack_utterance(u: &Utterance, k: usize) -> Result<Utterance> {
    if u.stack != 1 {
        return Err(Error::Ingestion {
            id: u.id.clone(),
            msg: format!("features are already stacked by {}", u.stack),
        });
    }
    Ok(Utterance {
        audio: stack_frames(&u.audio, k)?,
        stack: k,
        chunk_spans: Vec::new(),
        ..u.clone()
    })
}

/// Brings features to `k` frames per row, stacking raw features if needed.
pub fn ensure_stacked(u: Utterance, k: usize) -> Result<Utterance> {
    match u.stack {
        s if s == k => Ok(u),
        1 => stack_utterance(&u, k),
        s => Err(Error::Ingestion {
            id: u.id,
            msg: format!("features stacked by {s}, model expects {k}"),
        }),
    }
}
