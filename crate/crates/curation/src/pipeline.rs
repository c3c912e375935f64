//! Drives every record through the six filter stages in order.
//!
//! A record stops at its first rejection; later stages are never evaluated.
//! A record reaching a stage whose features are absent (or unusably empty)
//! is quarantined there rather than judged, and the run carries on. Stored
//! verdicts are reused, never recomputed, which makes reruns no-ops.

use crate::filters::{
    overlay_verdict, screen_split_verdict, static_frame_verdict, sync_verdict, text_area_verdict,
};
use crate::types::{CurationRecord, FunnelReport, FunnelStage, Stage, Thresholds, Verdict};
use crate::CurationError;

/// Hook for the attributes stage, whose concrete criteria are deployment
/// specific; the default accepts everything.
pub type AttributesPredicate<'a> = &'a dyn Fn(&CurationRecord) -> Verdict;

pub struct PipelineOutcome {
    /// Input records with verdicts, quarantine marks, and surviving flags.
    pub records: Vec<CurationRecord>,
    pub surviving_ids: Vec<String>,
    pub quarantined_ids: Vec<String>,
    pub report: FunnelReport,
}

/// `None` means the stage cannot judge this record and it gets quarantined.
fn evaluate(
    rec: &CurationRecord,
    stage: Stage,
    th: &Thresholds,
    attributes: AttributesPredicate,
) -> Option<Verdict> {
    match stage {
        Stage::StaticFrame => rec
            .p_frame_mean_size
            .map(|v| static_frame_verdict(v, th.min_p_frame_bytes)),
        Stage::ScreenSplit => match (&rec.row_density, &rec.col_density) {
            (Some(rows), Some(cols)) => {
                screen_split_verdict(rows, cols, th.line_density, th.line_persistence).ok()
            }
            _ => None,
        },
        Stage::Text => rec.text_boxes.as_ref().and_then(|frames| {
            text_area_verdict(frames, rec.frame_w, rec.frame_h, th.max_text_area_fraction).ok()
        }),
        Stage::VideoAttributes => Some(attributes(rec)),
        Stage::LipSync => match (rec.sync_offset, rec.sync_confidence) {
            (Some(offset), Some(conf)) => Some(sync_verdict(
                offset,
                conf,
                th.max_sync_offset_frames,
                th.min_sync_confidence,
            )),
            _ => None,
        },
        Stage::GraphicOverlay => rec
            .overlay_score
            .map(|s| overlay_verdict(s, th.max_overlay_score)),
    }
}

pub fn run_pipeline(
    records: Vec<CurationRecord>,
    th: &Thresholds,
) -> Result<PipelineOutcome, CurationError> {
    run_pipeline_with(records, th, &|_| Verdict::Keep)
}

pub fn run_pipeline_with(
    mut records: Vec<CurationRecord>,
    th: &Thresholds,
    attributes: AttributesPredicate,
) -> Result<PipelineOutcome, CurationError> {
    th.validate()?;
    for rec in &records {
        rec.validate()?;
    }

    let mut rejected_at = vec![0usize; Stage::ORDER.len()];
    let mut quarantined_at = vec![0usize; Stage::ORDER.len()];
    let mut surviving_ids = Vec::new();
    let mut quarantined_ids = Vec::new();

    for rec in records.iter_mut() {
        let mut fate = None;
        for (si, stage) in Stage::ORDER.into_iter().enumerate() {
            let verdict = match rec.verdicts.get(&stage) {
                Some(&stored) => stored,
                None => match evaluate(rec, stage, th, attributes) {
                    Some(v) => {
                        rec.verdicts.insert(stage, v);
                        v
                    }
                    None => {
                        rec.quarantined_at.get_or_insert(stage);
                        fate = Some(Err(si));
                        break;
                    }
                },
            };
            if verdict == Verdict::Reject {
                fate = Some(Ok(si));
                break;
            }
        }
        match fate {
            None => {
                rec.surviving = true;
                surviving_ids.push(rec.clip_id.clone());
            }
            Some(Ok(si)) => {
                rec.surviving = false;
                rejected_at[si] += 1;
            }
            Some(Err(si)) => {
                rec.surviving = false;
                quarantined_at[si] += 1;
                quarantined_ids.push(rec.clip_id.clone());
            }
        }
    }

    let mut stages = vec![FunnelStage {
        name: "input".into(),
        surviving: records.len(),
    }];
    let mut alive = records.len();
    for (si, stage) in Stage::ORDER.into_iter().enumerate() {
        alive -= rejected_at[si] + quarantined_at[si];
        stages.push(FunnelStage {
            name: stage.name().into(),
            surviving: alive,
        });
    }
    let report = FunnelReport { stages };
    debug_assert!(report.is_monotone());

    Ok(PipelineOutcome {
        records,
        surviving_ids,
        quarantined_ids,
        report,
    })
}
