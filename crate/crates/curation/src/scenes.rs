//! Scene extraction and chunking ahead of the filter pipeline.

use rand::Rng;

use crate::types::SceneRange;
use crate::CurationError;

/// Scenes shorter than this are discarded everywhere.
pub const MIN_SCENE_SECONDS: f64 = 2.0;
/// Long scenes are cut into consecutive chunks of this length.
pub const CHUNK_SECONDS: f64 = 10.0;

fn validate_sorted_disjoint(ranges: &[SceneRange]) -> Result<(), CurationError> {
    for r in ranges {
        r.validate()?;
    }
    for w in ranges.windows(2) {
        if w[1].start < w[0].end {
            return Err(CurationError::UnsortedRanges {
                first_end: w[0].end,
                second_start: w[1].start,
            });
        }
    }
    Ok(())
}

/// Intersects single-face frame ranges with scene-boundary ranges, dropping
/// intersections shorter than [`MIN_SCENE_SECONDS`].
pub fn extract_single_speaker_scenes(
    face_ranges: &[SceneRange],
    scene_bounds: &[SceneRange],
) -> Result<Vec<SceneRange>, CurationError> {
    validate_sorted_disjoint(face_ranges)?;
    validate_sorted_disjoint(scene_bounds)?;

    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < face_ranges.len() && j < scene_bounds.len() {
        let a = face_ranges[i];
        let b = scene_bounds[j];
        let start = a.start.max(b.start);
        let end = a.end.min(b.end);
        if end - start >= MIN_SCENE_SECONDS {
            out.push(SceneRange { start, end });
        }
        // advance whichever interval finishes first
        if a.end <= b.end {
            i += 1;
        } else {
            j += 1;
        }
    }
    Ok(out)
}

/// Cuts one scene into consecutive [`CHUNK_SECONDS`] pieces measured from its
/// start. A final remainder is kept only when it is itself a valid scene
/// length; scenes no longer than one chunk come back whole.
pub fn chunk_scene(scene: &SceneRange) -> Result<Vec<SceneRange>, CurationError> {
    scene.validate()?;
    if scene.len() < MIN_SCENE_SECONDS {
        return Err(CurationError::SceneTooShort { len: scene.len() });
    }
    if scene.len() <= CHUNK_SECONDS {
        return Ok(vec![*scene]);
    }
    let mut out = Vec::new();
    let mut t = scene.start;
    while t + CHUNK_SECONDS <= scene.end {
        out.push(SceneRange {
            start: t,
            end: t + CHUNK_SECONDS,
        });
        t += CHUNK_SECONDS;
    }
    if scene.end - t >= MIN_SCENE_SECONDS {
        out.push(SceneRange {
            start: t,
            end: scene.end,
        });
    }
    Ok(out)
}

/// Picks the training window inside a surviving clip: the whole clip when it
/// fits, otherwise a uniformly placed `seg_len` segment.
pub fn sample_training_segment<R: Rng + ?Sized>(
    clip_len: f64,
    seg_len: f64,
    rng: &mut R,
) -> Result<SceneRange, CurationError> {
    if !(clip_len.is_finite() && clip_len > 0.0 && seg_len.is_finite() && seg_len > 0.0) {
        return Err(CurationError::BadSegmentRequest { clip_len, seg_len });
    }
    if clip_len <= seg_len {
        return Ok(SceneRange {
            start: 0.0,
            end: clip_len,
        });
    }
    let start = rng.gen::<f64>() * (clip_len - seg_len);
    Ok(SceneRange {
        start,
        end: start + seg_len,
    })
}
