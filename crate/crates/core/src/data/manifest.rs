use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::features::read_feature_header;
use crate::error::{Error, Result};

/// Seconds covered by one raw feature frame.
pub const FRAME_STEP_S: f64 = 0.01;

/// A forced-alignment segment in raw frames, `start..end`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio_path: PathBuf,
    pub video_path: Option<PathBuf>,
    pub duration_s: f64,
    pub transcript: String,
    pub chunk_spans: Vec<ChunkSpan>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Log and drop invalid lines instead of failing on the first one.
    pub skip_invalid: bool,
}

/// Loads and validates a manifest. Relative paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path, opts: LoadOptions) -> Result<Vec<UtteranceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, &path.display().to_string(), opts)
}

pub fn parse_manifest(
    text: &str,
    base_dir: &Path,
    label: &str,
    opts: LoadOptions,
) -> Result<Vec<UtteranceRecord>> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed = parse_line(line, n + 1, base_dir, label).and_then(|r| {
            if !seen.insert(r.id.clone()) {
                return Err(Error::Parse {
                    path: label.into(),
                    line: n + 1,
                    msg: format!("duplicate utterance id '{}'", r.id),
                });
            }
            validate(&r)?;
            Ok(r)
        });
        match parsed {
            Ok(r) => records.push(r),
            Err(e) if opts.skip_invalid => log::warn!("skipping manifest line {}: {e}", n + 1),
            Err(e) => return Err(e),
        }
    }
    if records.is_empty() {
        log::warn!("manifest {label} contains no records");
    }
    Ok(records)
}

fn parse_line(line: &str, n: usize, base: &Path, label: &str) -> Result<UtteranceRecord> {
    let err = |msg: String| Error::Parse {
        path: label.into(),
        line: n,
        msg,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    let (id, audio, video, duration, transcript, spans) = match fields.as_slice() {
        [id, a, d, t] => (*id, *a, "-", *d, *t, None),
        [id, a, v, d, t] => (*id, *a, *v, *d, *t, None),
        [id, a, v, d, t, s] => (*id, *a, *v, *d, *t, Some(*s)),
        _ => {
            return Err(err(format!(
                "expected 4, 5 or 6 tab-separated fields, found {}",
                fields.len()
            )))
        }
    };
    if id.is_empty() {
        return Err(err("empty utterance id".into()));
    }
    let duration_s: f64 = duration
        .parse()
        .ok()
        .filter(|d: &f64| d.is_finite() && *d > 0.0)
        .ok_or_else(|| err(format!("invalid duration '{duration}'")))?;
    let chunk_spans = match spans {
        Some(s) if !s.is_empty() => parse_spans(s).map_err(err)?,
        _ => Vec::new(),
    };
    Ok(UtteranceRecord {
        id: id.to_string(),
        audio_path: base.join(audio),
        video_path: (video != "-").then(|| base.join(video)),
        duration_s,
        transcript: transcript.to_string(),
        chunk_spans,
    })
}

fn parse_spans(s: &str) -> std::result::Result<Vec<ChunkSpan>, String> {
    s.split('|')
        .map(|part| {
            let mut it = part.splitn(3, ':');
            let (Some(a), Some(b), Some(text)) = (it.next(), it.next(), it.next()) else {
                return Err(format!("chunk span '{part}' is not start:end:text"));
            };
            let start = a.parse().map_err(|_| format!("bad span start '{a}'"))?;
            let end = b.parse().map_err(|_| format!("bad span end '{b}'"))?;
            Ok(ChunkSpan {
                start,
                end,
                text: text.to_string(),
            })
        })
        .collect()
}

/// Spans must be non-empty, ordered, disjoint and within `frames`.
pub fn validate_spans(id: &str, spans: &[ChunkSpan], frames: usize) -> Result<()> {
    let mut prev_end = 0;
    for s in spans {
        if s.start >= s.end || s.start < prev_end || s.end > frames {
            return Err(Error::Ingestion {
                id: id.into(),
                msg: format!(
                    "chunk span {}..{} is empty, overlapping or outside 0..{frames}",
                    s.start, s.end
                ),
            });
        }
        prev_end = s.end;
    }
    Ok(())
}

fn validate(r: &UtteranceRecord) -> Result<()> {
    let ingest = |msg: String| Error::Ingestion {
        id: r.id.clone(),
        msg,
    };
    if !r.audio_path.is_file() {
        return Err(ingest(format!("audio file {} not found", r.audio_path.display())));
    }
    let h = read_feature_header(&r.audio_path).map_err(|e| ingest(e.to_string()))?;
    let frames = h.rows * h.stack;
    let slack = h.stack as f64 * FRAME_STEP_S + 1e-9;
    if (r.duration_s - frames as f64 * FRAME_STEP_S).abs() > slack {
        return Err(ingest(format!(
            "duration {} s disagrees with {frames} frames",
            r.duration_s
        )));
    }
    if let Some(v) = &r.video_path {
        if !v.is_file() {
            return Err(ingest(format!("video file {} not found", v.display())));
        }
        let vh = read_feature_header(v).map_err(|e| ingest(e.to_string()))?;
        if vh.rows != 1 {
            return Err(ingest(format!("video feature must be one pooled row, found {}", vh.rows)));
        }
    }
    if !r.chunk_spans.is_empty() && h.stack != 1 {
        return Err(ingest("chunk spans require unstacked features".into()));
    }
    validate_spans(&r.id, &r.chunk_spans, frames)
}

/// Inverse of [`parse_manifest`]; always writes the 5- or 6-field form.
pub fn serialize_manifest(records: &[UtteranceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let video = r
            .video_path
            .as_ref()
            .map_or("-".to_string(), |p| p.display().to_string());
        let _ = write!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            r.id,
            r.audio_path.display(),
            video,
            r.duration_s,
            r.transcript
        );
        if !r.chunk_spans.is_empty() {
            let spans: Vec<String> = r
                .chunk_spans
                .iter()
                .map(|c| format!("{}:{}:{}", c.start, c.end, c.text))
                .collect();
            s.push('\t');
            s.push_str(&spans.join("|"));
        }
        s.push('\n');
    }
    s
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    fs::write(path, serialize_manifest(records)).map_err(|e| Error::file(path, e))
}
