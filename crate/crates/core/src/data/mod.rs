//! Feature files, manifests, length strategies and batching.

mod batch;
mod features;
mod manifest;
mod preprocess;

pub use batch::{make_batches, Batch, BatchOptions, TargetBatch};
pub use features::{
    decode_features, encode_features, read_feature_header, read_features, write_features,
    FeatureHeader,
};
pub use manifest::{
    load_manifest, parse_manifest, serialize_manifest, validate_spans, write_manifest, ChunkSpan,
    LoadOptions, UtteranceRecord, FRAME_STEP_S,
};
pub use preprocess::{
    chunk_records, ensure_stacked, filter_long, load_utterances, save_split, stack_frames, stack_utterance,
    unstack_frames, FilterReport, Timed, Utterance,
};
