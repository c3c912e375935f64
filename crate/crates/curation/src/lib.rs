//! Data curation for talking-head clips: a six-stage filter funnel, scene
//! segmentation and chunking, structured caption assembly, and an atomic
//! work-claim store for distributed runs.

use thiserror::Error;

pub mod caption;
pub mod filters;
pub mod fixture;
pub mod pipeline;
pub mod scenes;
pub mod store;
pub mod types;

pub use caption::{assemble_caption, CaptionGateway, CaptionRecord, TemplateCaptioner};
pub use pipeline::{run_pipeline, run_pipeline_with, PipelineOutcome};
pub use scenes::{chunk_scene, extract_single_speaker_scenes, sample_training_segment};
pub use store::{DirStore, InMemoryStore, StoreError, TaskStore};
pub use types::{
    read_records, write_records, CurationRecord, FunnelReport, FunnelStage, SceneRange, Stage,
    TextBox, Thresholds, Verdict,
};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("range start {start} must lie below end {end} and both must be finite")]
    MalformedRange { start: f64, end: f64 },
    #[error("ranges overlap or are out of order: {first_end} then {second_start}")]
    UnsortedRanges { first_end: f64, second_start: f64 },
    #[error("scene of {len}s is below the minimum usable length")]
    SceneTooShort { len: f64 },
    #[error("cannot cut a {seg_len}s segment from a {clip_len}s clip")]
    BadSegmentRequest { clip_len: f64, seg_len: f64 },
    #[error("clip {clip}: duration {duration} is not a positive finite number")]
    BadDuration { clip: String, duration: f64 },
    #[error("clip {clip}: density frames disagree on length")]
    RaggedDensities { clip: String },
    #[error("clip {clip}: density {value} outside [0, 1]")]
    DensityRange { clip: String, value: f64 },
    #[error("clip {clip}: text box exceeds the {frame_w}x{frame_h} frame")]
    BoxOutOfBounds { clip: String, frame_w: u32, frame_h: u32 },
    #[error("clip {clip}: overlay score {value} outside [0, 1]")]
    OverlayRange { clip: String, value: f64 },
    #[error("thresholds are out of range or non-finite")]
    BadThresholds,
    #[error("density input has no frames or no positions")]
    EmptyDensities,
    #[error("cannot judge text coverage on a {frame_w}x{frame_h} frame")]
    DegenerateFrame { frame_w: u32, frame_h: u32 },
    #[error("caption field {field} is empty")]
    EmptyCaptionField { field: &'static str },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
