//! Record and report schemas shared across the pipeline.
//!
//! Every signal a filter consumes (packet sizes, edge densities, text boxes,
//! sync scores, overlay scores) arrives precomputed inside a
//! [`CurationRecord`]; this crate only judges them. Records travel as JSON
//! Lines, one record per line. Units: seconds for time, pixels for geometry.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CurationError;

/// Half-open interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneRange {
    pub start: f64,
    pub end: f64,
}

impl SceneRange {
    pub fn new(start: f64, end: f64) -> Result<Self, CurationError> {
        let r = Self { start, end };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        if !(self.start.is_finite() && self.end.is_finite() && self.end > self.start) {
            return Err(CurationError::MalformedRange {
                start: self.start,
                end: self.end,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Axis-aligned rectangle in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl TextBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }
}

/// Pipeline stages in execution order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    StaticFrame,
    ScreenSplit,
    Text,
    VideoAttributes,
    LipSync,
    GraphicOverlay,
}

impl Stage {
    pub const ORDER: [Stage; 6] = [
        Stage::StaticFrame,
        Stage::ScreenSplit,
        Stage::Text,
        Stage::VideoAttributes,
        Stage::LipSync,
        Stage::GraphicOverlay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::StaticFrame => "static_frame",
            Stage::ScreenSplit => "screen_split",
            Stage::Text => "text",
            Stage::VideoAttributes => "video_attributes",
            Stage::LipSync => "lip_sync",
            Stage::GraphicOverlay => "graphic_overlay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Reject,
}

/// One clip's precomputed features plus any verdicts already recorded.
/// Feature fields are optional; a record reaching a stage whose feature is
/// absent gets quarantined rather than judged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationRecord {
    pub clip_id: String,
    /// Clip length in seconds.
    pub duration: f64,
    /// Mean P-frame packet size in bytes.
    pub p_frame_mean_size: Option<f64>,
    /// Edge density per frame per pixel row, each value in [0,1].
    pub row_density: Option<Vec<Vec<f64>>>,
    /// Edge density per frame per pixel column.
    pub col_density: Option<Vec<Vec<f64>>>,
    pub frame_w: u32,
    pub frame_h: u32,
    /// Detected text rectangles, one list per frame.
    pub text_boxes: Option<Vec<Vec<TextBox>>>,
    /// Audio/video misalignment in frames.
    pub sync_offset: Option<i32>,
    pub sync_confidence: Option<f64>,
    /// Logo/graphic detector output in [0,1].
    pub overlay_score: Option<f64>,
    #[serde(default)]
    pub verdicts: BTreeMap<Stage, Verdict>,
    /// Stage at which the record was quarantined for missing features.
    #[serde(default)]
    pub quarantined_at: Option<Stage>,
    #[serde(default)]
    pub surviving: bool,
}

impl CurationRecord {
    /// Bare record with no features; fill in what the clip actually has.
    pub fn new(clip_id: impl Into<String>, duration: f64, frame_w: u32, frame_h: u32) -> Self {
        Self {
            clip_id: clip_id.into(),
            duration,
            p_frame_mean_size: None,
            row_density: None,
            col_density: None,
            frame_w,
            frame_h,
            text_boxes: None,
            sync_offset: None,
            sync_confidence: None,
            overlay_score: None,
            verdicts: BTreeMap::new(),
            quarantined_at: None,
            surviving: false,
        }
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(CurationError::BadDuration {
                clip: self.clip_id.clone(),
                duration: self.duration,
            });
        }
        for densities in [&self.row_density, &self.col_density].into_iter().flatten() {
            let width = densities.first().map(Vec::len);
            for frame in densities {
                if Some(frame.len()) != width {
                    return Err(CurationError::RaggedDensities {
                        clip: self.clip_id.clone(),
                    });
                }
                for &d in frame {
                    if !(0.0..=1.0).contains(&d) {
                        return Err(CurationError::DensityRange {
                            clip: self.clip_id.clone(),
                            value: d,
                        });
                    }
                }
            }
        }
        if let Some(frames) = &self.text_boxes {
            for boxes in frames {
                for b in boxes {
                    let fits = b.x.checked_add(b.w).is_some_and(|r| r <= self.frame_w)
                        && b.y.checked_add(b.h).is_some_and(|bo| bo <= self.frame_h);
                    if !fits {
                        return Err(CurationError::BoxOutOfBounds {
                            clip: self.clip_id.clone(),
                            frame_w: self.frame_w,
                            frame_h: self.frame_h,
                        });
                    }
                }
            }
        }
        if let Some(s) = self.overlay_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(CurationError::OverlayRange {
                    clip: self.clip_id.clone(),
                    value: s,
                });
            }
        }
        Ok(())
    }
}

/// Filter settings. Values lacking any published provenance live here as
/// plain configuration with documented defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Reject clips whose mean P-frame packet size is below this (strict).
    pub min_p_frame_bytes: f64,
    /// Edge density above which a row/column counts as a divider line.
    pub line_density: f64,
    /// Fraction of frames a line must persist in before rejection (strict).
    pub line_persistence: f64,
    /// Reject when text covers more than this fraction of any frame (strict).
    pub max_text_area_fraction: f64,
    /// Largest acceptable audio/video offset magnitude in frames.
    pub max_sync_offset_frames: i32,
    /// Smallest acceptable sync confidence.
    pub min_sync_confidence: f64,
    /// Reject when the overlay score exceeds this (strict).
    pub max_overlay_score: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_p_frame_bytes: 1024.0,
            line_density: 0.5,
            line_persistence: 0.5,
            max_text_area_fraction: 0.01,
            max_sync_offset_frames: 2,
            min_sync_confidence: 3.0,
            max_overlay_score: 0.5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), CurationError> {
        let ok = self.min_p_frame_bytes >= 0.0
            && (0.0..=1.0).contains(&self.line_density)
            && (0.0..=1.0).contains(&self.line_persistence)
            && (0.0..=1.0).contains(&self.max_text_area_fraction)
            && self.max_sync_offset_frames >= 0
            && self.min_sync_confidence.is_finite()
            && (0.0..=1.0).contains(&self.max_overlay_score);
        if !ok {
            return Err(CurationError::BadThresholds);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelStage {
    pub name: String,
    pub surviving: usize,
}

/// Stage-by-stage surviving counts, starting from the raw input count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub stages: Vec<FunnelStage>,
}

impl FunnelReport {
    pub fn is_monotone(&self) -> bool {
        self.stages.windows(2).all(|w| w[1].surviving <= w[0].surviving)
    }

    pub fn final_count(&self) -> usize {
        self.stages.last().map_or(0, |s| s.surviving)
    }
}

pub fn read_records(path: &Path) -> Result<Vec<CurationRecord>, CurationError> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CurationRecord =
            serde_json::from_str(&line).map_err(|e| CurationError::Parse {
                line: lineno + 1,
                source: e,
            })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[CurationRecord]) -> Result<(), CurationError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut file, record).map_err(|e| CurationError::Parse {
            line: 0,
            source: e,
        })?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}
