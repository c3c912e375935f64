//! The per-clip quality filters. Each verdict is a pure function of
//! precomputed features and a threshold; every comparison against a
//! threshold is strict, so a value exactly at the boundary is kept.

use crate::types::{TextBox, Verdict};
use crate::CurationError;

/// Low mean P-frame packet size means low motion energy.
pub fn static_frame_verdict(p_frame_mean_size: f64, min_bytes: f64) -> Verdict {
    if p_frame_mean_size < min_bytes {
        Verdict::Reject
    } else {
        Verdict::Keep
    }
}

fn persistent_line(per_frame: &[Vec<f64>], line_density: f64, persistence: f64) -> bool {
    let frames = per_frame.len();
    let width = per_frame[0].len();
    let limit = persistence * frames as f64;
    for idx in 0..width {
        let count = per_frame.iter().filter(|f| f[idx] > line_density).count();
        if count as f64 > limit {
            return true;
        }
    }
    false
}

/// A divider line shows up as one row or column index whose edge density
/// stays high across most frames.
pub fn screen_split_verdict(
    row_density: &[Vec<f64>],
    col_density: &[Vec<f64>],
    line_density: f64,
    persistence: f64,
) -> Result<Verdict, CurationError> {
    for d in [row_density, col_density] {
        if d.is_empty() || d[0].is_empty() {
            return Err(CurationError::EmptyDensities);
        }
    }
    let split = persistent_line(row_density, line_density, persistence)
        || persistent_line(col_density, line_density, persistence);
    Ok(if split { Verdict::Reject } else { Verdict::Keep })
}

/// Union area of axis-aligned boxes by plane sweep: cut the x axis at every
/// box edge, then inside each slab merge the y intervals of the boxes that
/// span it. Integer arithmetic throughout, so the result is exact.
pub fn union_area(boxes: &[TextBox]) -> u64 {
    let mut xs: Vec<u32> = boxes
        .iter()
        .filter(|b| b.w > 0 && b.h > 0)
        .flat_map(|b| [b.x, b.x + b.w])
        .collect();
    xs.sort_unstable();
    xs.dedup();

    let mut area = 0u64;
    for slab in xs.windows(2) {
        let (x0, x1) = (slab[0], slab[1]);
        let mut ys: Vec<(u32, u32)> = boxes
            .iter()
            .filter(|b| b.w > 0 && b.h > 0 && b.x <= x0 && x1 <= b.x + b.w)
            .map(|b| (b.y, b.y + b.h))
            .collect();
        ys.sort_unstable();
        let mut covered = 0u64;
        let mut reach: Option<u32> = None;
        for (y0, y1) in ys {
            match reach {
                Some(r) if y0 <= r => {
                    if y1 > r {
                        covered += (y1 - r) as u64;
                        reach = Some(y1);
                    }
                }
                _ => {
                    covered += (y1 - y0) as u64;
                    reach = Some(y1);
                }
            }
        }
        area += (x1 - x0) as u64 * covered;
    }
    area
}

/// Rejects when text boxes cover more than `max_fraction` of any frame.
pub fn text_area_verdict(
    boxes_per_frame: &[Vec<TextBox>],
    frame_w: u32,
    frame_h: u32,
    max_fraction: f64,
) -> Result<Verdict, CurationError> {
    if frame_w == 0 || frame_h == 0 {
        return Err(CurationError::DegenerateFrame { frame_w, frame_h });
    }
    let frame_area = frame_w as f64 * frame_h as f64;
    for boxes in boxes_per_frame {
        if union_area(boxes) as f64 > max_fraction * frame_area {
            return Ok(Verdict::Reject);
        }
    }
    Ok(Verdict::Keep)
}

/// Keeps a clip only when the offset is small AND the estimate is trusted;
/// a confident zero offset is necessary but not sufficient alone.
pub fn sync_verdict(
    offset_frames: i32,
    confidence: f64,
    max_offset: i32,
    min_confidence: f64,
) -> Verdict {
    if offset_frames.abs() <= max_offset && confidence >= min_confidence {
        Verdict::Keep
    } else {
        Verdict::Reject
    }
}

/// Logo/graphic detector score above the threshold rejects.
pub fn overlay_verdict(score: f64, max_score: f64) -> Verdict {
    if score > max_score {
        Verdict::Reject
    } else {
        Verdict::Keep
    }
}
