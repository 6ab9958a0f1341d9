use std::fs;
use std::path::Path;

use avasr_core::data::*;
use avasr_core::tensor::{Real, Tensor};
use avasr_core::tokenizer::{Tokenizers, BOS, EOS, PAD};
use avasr_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_features(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Values representable in f32 so file round trips are exact.
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-4.0f32..4.0) as Real)
}

/// Writes `<id>.feat` (and a video file when `video`) into `dir` and returns
/// the manifest line.
fn write_utt(dir: &Path, id: &str, frames: usize, video: bool, text: &str) -> String {
    let seed = id.bytes().map(u64::from).sum();
    write_features(&dir.join(format!("{id}.feat")), &random_features(frames, 43, seed), 1).unwrap();
    let v = if video {
        write_features(&dir.join(format!("{id}.v")), &random_features(1, 16, seed + 1), 1).unwrap();
        format!("{id}.v")
    } else {
        "-".into()
    };
    format!("{id}\t{id}.feat\t{v}\t{}\t{text}", frames as f64 * FRAME_STEP_S)
}

fn tokenizers(lines: &[&str]) -> Tokenizers {
    let lines: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
    Tokenizers::train(&lines, 60).unwrap()
}

fn utt(id: &str, rows: usize, text: &str) -> Utterance {
    Utterance {
        id: id.into(),
        audio: random_features(rows, 4, rows as u64),
        stack: 1,
        video: Some(vec![1.0; 3]),
        transcript: text.into(),
        duration_s: rows as f64 * FRAME_STEP_S,
        chunk_spans: Vec::new(),
    }
}

#[test]
fn feature_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.feat");
    let t = random_features(7, 43, 1);
    write_features(&p, &t, 1).unwrap();
    let (h, back) = read_features(&p).unwrap();
    assert_eq!(back, t);
    assert_eq!(h, read_feature_header(&p).unwrap());
    assert_eq!(fs::metadata(&p).unwrap().len(), 16 + 4 * 7 * 43);
}

#[test]
fn empty_manifest_is_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tsv");
    fs::write(&p, "").unwrap();
    assert!(load_manifest(&p, LoadOptions::default()).unwrap().is_empty());
}

#[test]
fn four_field_line_has_no_video() {
    let dir = tempfile::tempdir().unwrap();
    write_utt(dir.path(), "u1", 20, false, "x");
    let p = dir.path().join("m.tsv");
    fs::write(&p, "u1\tu1.feat\t0.2\thello there\n").unwrap();
    let recs = load_manifest(&p, LoadOptions::default()).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].video_path, None);
    assert_eq!(recs[0].transcript, "hello there");
    assert_eq!(recs[0].audio_path, dir.path().join("u1.feat"));
}

#[test]
fn ten_line_manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    for i in 0..10 {
        let mut l = write_utt(dir.path(), &format!("utt{i}"), 30 + i, i % 3 != 0, &format!("words number {i}"));
        if i % 4 == 0 {
            l.push_str("\t0:10:words|12:20:number");
        }
        lines.push(l);
    }
    let p = dir.path().join("m.tsv");
    fs::write(&p, lines.join("\n")).unwrap();
    let a = load_manifest(&p, LoadOptions::default()).unwrap();
    assert_eq!(a.len(), 10);
    let p2 = dir.path().join("m2.tsv");
    write_manifest(&p2, &a).unwrap();
    let b = load_manifest(&p2, LoadOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].chunk_spans.len(), 2);
}

#[test]
fn missing_audio_names_the_id() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tsv");
    fs::write(&p, "ghost\tnope.feat\t-\t1.0\thi\n").unwrap();
    match load_manifest(&p, LoadOptions::default()) {
        Err(Error::Ingestion { id, .. }) => assert_eq!(id, "ghost"),
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn malformed_lines_fail_fast_or_skip() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_utt(dir.path(), "ok", 10, false, "fine");
    let p = dir.path().join("m.tsv");
    fs::write(&p, format!("{good}\nonly\ttwo\n{good}x\n")).unwrap();
    match load_manifest(&p, LoadOptions::default()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
    // Line 3 repeats id "ok" and is dropped too.
    let recs = load_manifest(&p, LoadOptions { skip_invalid: true }).unwrap();
    assert_eq!(recs.len(), 1);
}

#[test]
fn duration_must_match_frames() {
    let dir = tempfile::tempdir().unwrap();
    write_utt(dir.path(), "d", 100, false, "x");
    let p = dir.path().join("m.tsv");
    fs::write(&p, "d\td.feat\t-\t1.005\tx\n").unwrap();
    assert!(load_manifest(&p, LoadOptions::default()).is_ok());
    fs::write(&p, "d\td.feat\t-\t1.2\tx\n").unwrap();
    assert!(matches!(load_manifest(&p, LoadOptions::default()), Err(Error::Ingestion { .. })));
}

#[test]
fn overlapping_spans_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let l = write_utt(dir.path(), "o", 30, false, "a b");
    let p = dir.path().join("m.tsv");
    fs::write(&p, format!("{l}\t0:15:a|10:30:b\n")).unwrap();
    assert!(load_manifest(&p, LoadOptions::default()).is_err());

    let mut u = utt("o", 30, "a b");
    u.chunk_spans = vec![
        ChunkSpan { start: 0, end: 15, text: "a".into() },
        ChunkSpan { start: 10, end: 30, text: "b".into() },
    ];
    assert!(chunk_records(&[u]).is_err());
}

#[test]
fn filter_boundary_is_inclusive() {
    let items: Vec<Utterance> = [5.0, 14.9, 15.0, 15.1]
        .iter()
        .enumerate()
        .map(|(i, &d)| Utterance { duration_s: d, ..utt(&i.to_string(), 2, "x") })
        .collect();
    let (kept, report) = filter_long(&items, 15.0);
    let ids: Vec<&str> = kept.iter().map(|u| u.id.as_str()).collect();
    assert_eq!(ids, ["0", "1", "2"]);
    assert_eq!(report.kept, 3);
    assert_eq!(report.total, 4);
    let hand = (5.0 + 14.9 + 15.0) / (5.0 + 14.9 + 15.0 + 15.1);
    assert!((report.retained_fraction() - hand).abs() < 1e-15);

    let (all, r) = filter_long(&items, f64::INFINITY);
    assert_eq!(all, items);
    assert_eq!(r.retained_fraction(), 1.0);
}

#[test]
fn whole_span_chunk_is_the_original() {
    let mut u = utt("w", 25, "all of it");
    u.chunk_spans = vec![ChunkSpan { start: 0, end: 25, text: "all of it".into() }];
    let out = chunk_records(std::slice::from_ref(&u)).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].audio, u.audio);
    assert_eq!(out[0].transcript, u.transcript);
    assert_eq!(out[0].video, u.video);
    assert!((out[0].duration_s - u.duration_s).abs() < 1e-12);
}

#[test]
fn chunks_are_row_slices_of_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let l = write_utt(dir.path(), "c", 40, true, "one two three");
    let p = dir.path().join("m.tsv");
    fs::write(&p, format!("{l}\t2:12:one|12:20:two|25:40:three\n")).unwrap();
    let recs = load_manifest(&p, LoadOptions::default()).unwrap();
    let utts = load_utterances(&recs).unwrap();
    let chunks = chunk_records(&utts).unwrap();
    assert_eq!(chunks.len(), 3);
    let (_, original) = read_features(&dir.path().join("c.feat")).unwrap();
    for (c, (s, e)) in chunks.iter().zip([(2, 12), (12, 20), (25, 40)]) {
        let direct: Vec<Real> = original.data()[s * 43..e * 43].to_vec();
        assert_eq!(c.audio.data(), direct.as_slice());
        assert!(c.id.starts_with("c-c"));
    }
    let total: usize = chunks.iter().map(Utterance::rows).sum();
    assert!(total <= 40);
    let texts: Vec<&str> = chunks.iter().map(|c| c.transcript.as_str()).collect();
    assert_eq!(texts, ["one", "two", "three"]);
}

#[test]
fn stacking_examples() {
    let t = random_features(8, 43, 3);
    assert_eq!(stack_frames(&t, 1).unwrap(), t);
    let s = stack_frames(&t, 4).unwrap();
    assert_eq!(s.shape(), &[2, 172]);
    assert_eq!(&s.data()[..172], &t.data()[..172]);

    let t = random_features(10, 43, 4);
    let s = stack_frames(&t, 4).unwrap();
    assert_eq!(s.shape(), &[3, 172]);
    let last = &s.data()[2 * 172..];
    assert_eq!(&last[..2 * 43], &t.data()[8 * 43..]);
    assert!(last[2 * 43..].iter().all(|&x| x == 0.0));
}

#[test]
fn pipeline_threads_ids_and_transcripts() {
    let mut u = utt("p", 40, "alpha beta");
    u.chunk_spans = vec![
        ChunkSpan { start: 0, end: 18, text: "alpha".into() },
        ChunkSpan { start: 20, end: 40, text: "beta".into() },
    ];
    let chunks = chunk_records(&[u.clone(), utt("q", 12, "gamma")]).unwrap();
    let (kept, _) = filter_long(&chunks, 15.0);
    let stacked: Vec<Utterance> = kept.iter().map(|c| ensure_stacked(c.clone(), 4).unwrap()).collect();
    let pairs: Vec<(&str, &str)> = stacked.iter().map(|s| (s.id.as_str(), s.transcript.as_str())).collect();
    assert_eq!(pairs, [("p-c0", "alpha"), ("p-c1", "beta"), ("q", "gamma")]);
    assert_eq!(unstack_frames(&stacked[0].audio, 4, 18).unwrap(), u.audio.slice_rows(0, 18).unwrap());
}

#[test]
fn equal_lengths_make_one_unpadded_batch() {
    let tok = tokenizers(&["hello world", "good day"]);
    let utts = [utt("a", 10, "hello world"), utt("b", 10, "good day")];
    let opts = BatchOptions { frame_budget: 20, shuffle_seed: Some(1), video_dim: 3 };
    let batches = make_batches(&utts, &tok, &opts).unwrap();
    assert_eq!(batches.len(), 1);
    assert_eq!(batches[0].padded_frames(), 0);
    assert_eq!(batches[0].audio.shape(), &[2, 10, 4]);
}

#[test]
fn targets_are_framed_and_padded() {
    let tok = tokenizers(&["ab", "abab"]);
    let b = Batch::from_utterances(&[&utt("x", 3, "ab"), &utt("y", 3, "abab")], &tok, 3).unwrap();
    let t = &b.chars;
    assert_eq!(t.max_len, 6);
    assert_eq!(t.lens, [4, 6]);
    assert_eq!(t.tokens[0], BOS);
    assert_eq!(t.tokens[3], EOS);
    assert_eq!(&t.tokens[4..6], &[PAD, PAD]);
    assert_eq!(t.inputs().len(), 10);
    assert_eq!(t.outputs()[..3], t.tokens[1..4]);
    assert_eq!(t.output_mask(), [true, true, true, false, false, true, true, true, true, true]);
}

#[test]
fn over_budget_utterance_is_rejected() {
    let tok = tokenizers(&["x"]);
    let opts = BatchOptions { frame_budget: 9, shuffle_seed: None, video_dim: 3 };
    match make_batches(&[utt("big", 10, "x")], &tok, &opts) {
        Err(Error::Ingestion { id, .. }) => assert_eq!(id, "big"),
        other => panic!("expected rejection, got {other:?}"),
    }
}

#[test]
fn missing_video_is_zero_and_flagged() {
    let tok = tokenizers(&["x"]);
    let mut u = utt("n", 2, "x");
    u.video = None;
    let b = Batch::from_utterances(&[&u, &utt("m", 2, "x")], &tok, 3).unwrap();
    assert_eq!(b.video_present, [false, true]);
    assert_eq!(&b.video.data()[..3], &[0.0; 3]);
}

fn random_corpus(lens: &[usize]) -> Vec<Utterance> {
    lens.iter()
        .enumerate()
        .map(|(i, &l)| utt(&format!("u{i:02}"), l, if i % 2 == 0 { "hello" } else { "world" }))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stack_unstack_recovers_content(t in 1usize..30, d in 1usize..6, k in 1usize..6, seed in any::<u64>()) {
        let x = random_features(t, d, seed);
        let s = stack_frames(&x, k).unwrap();
        prop_assert_eq!(s.shape(), &[t.div_ceil(k), k * d]);
        prop_assert_eq!(unstack_frames(&s, k, t).unwrap(), x);
    }

    #[test]
    fn batching_conserves_frames(lens in proptest::collection::vec(1usize..40, 1..20), budget in 40usize..200, seed in any::<u64>()) {
        let tok = tokenizers(&["hello", "world"]);
        let utts = random_corpus(&lens);
        let opts = BatchOptions { frame_budget: budget, shuffle_seed: Some(seed), video_dim: 3 };
        let batches = make_batches(&utts, &tok, &opts).unwrap();
        let out: usize = batches.iter().map(Batch::real_frames).sum();
        prop_assert_eq!(out, lens.iter().sum::<usize>());
        let mut ids: Vec<String> = batches.iter().flat_map(|b| b.ids.clone()).collect();
        ids.sort();
        prop_assert_eq!(ids, utts.iter().map(|u| u.id.clone()).collect::<Vec<_>>());
        for b in &batches {
            prop_assert!(b.len() * b.max_rows() <= budget);
        }
        let again = make_batches(&utts, &tok, &opts).unwrap();
        prop_assert_eq!(again, batches);
    }
}
