//! Central-difference verification of the training gradients.
//!
//! Builds a deterministic two-item batch (one fully conditioned, one with
//! null conditioning so the learned placeholders get probed too), computes
//! analytic gradients, then nudges randomly chosen entries of every
//! parameter tensor and compares against `(L(p+h) − L(p−h)) / 2h`. Runs in
//! f64; a 32-bit difference quotient would drown in rounding noise.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::LatentVideo;
use crate::cond::{ConditioningSet, TextEmbedding, AUDIO_FEATURE_DIM, TEXT_CAP};
use crate::flow::{fm_loss, fm_loss_and_grad, FlowError, FlowItem};
use crate::mmdit::{ModelConfig, ModelParams};

#[derive(Debug, Clone)]
pub struct ProbeFailure {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: usize,
    pub probes: usize,
    pub worst_rel: f64,
    pub worst_tensor: String,
    pub failures: Vec<ProbeFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    // the floor sits above the difference quotient's own resolution,
    // ulp(loss)/2h, so near-zero gradients are not compared against noise
    let denom = a.abs().max(b.abs()).max(1e-5);
    (a - b).abs() / denom
}

fn mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>() * 2.0 - 1.0)
}

fn probe_batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Vec<FlowItem<f64>>, FlowError> {
    let grid = cfg.video_grid()?;
    let ref_grid = cfg.ref_grid()?;
    let (n, d) = (grid.token_count(), grid.token_dim());

    let ref_latent = LatentVideo::new(Array4::from_shape_fn(
        (
            ref_grid.channels,
            ref_grid.frames,
            ref_grid.height,
            ref_grid.width,
        ),
        |_| rng.gen::<f64>() * 2.0 - 1.0,
    ));
    let full = FlowItem {
        x0: mat(rng, n, d),
        x1: mat(rng, n, d),
        conds: ConditioningSet {
            ref_latent: Some(ref_latent),
            ref_time: -1.5,
            audio: Some(mat(rng, cfg.audio_len(), AUDIO_FEATURE_DIM)),
            text: Some(TextEmbedding {
                values: mat(rng, TEXT_CAP, cfg.d_text),
                valid_len: 7,
            }),
        },
        t: 0.7,
    };
    let blank = FlowItem {
        x0: mat(rng, n, d),
        x1: mat(rng, n, d),
        conds: ConditioningSet::null(),
        t: 0.3,
    };
    Ok(vec![full, blank])
}

/// Probes up to `probes_per_tensor` entries of every parameter tensor.
pub fn check_training_gradients(
    cfg: ModelConfig,
    seed: u64,
    probes_per_tensor: usize,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, FlowError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<f64>::init(cfg, seed)?;
    // gates and the output head initialize to zero; open them so every
    // parameter influences the loss. Kept small: the head is affine in the
    // stream, so wide-open gates inflate the loss scale and starve the
    // difference quotient of significant bits
    params.perturb(seed ^ 0x9e37, 0.05);
    let items = probe_batch(&cfg, &mut rng)?;

    let mut analytic = params.zeros_like();
    fm_loss_and_grad(&params, &items, &mut analytic)?;

    let tensor_count = params.named_tensors().len();
    let mut report = GradCheckReport {
        tensors: tensor_count,
        probes: 0,
        worst_rel: 0.0,
        worst_tensor: String::new(),
        failures: Vec::new(),
    };

    for ti in 0..tensor_count {
        let (name, len) = {
            let tensors = params.named_tensors();
            (tensors[ti].0.clone(), tensors[ti].1.len())
        };
        let indices: Vec<usize> = if len <= probes_per_tensor {
            (0..len).collect()
        } else {
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < probes_per_tensor {
                seen.insert(rng.gen_range(0..len));
            }
            seen.into_iter().collect()
        };

        for e in indices {
            let base = params.named_tensors()[ti].1.get(e);
            {
                let mut tensors = params.named_tensors_mut();
                tensors[ti].1.set(e, base + h);
            }
            let up = fm_loss(&params, &items)?;
            {
                let mut tensors = params.named_tensors_mut();
                tensors[ti].1.set(e, base - h);
            }
            let down = fm_loss(&params, &items)?;
            {
                let mut tensors = params.named_tensors_mut();
                tensors[ti].1.set(e, base);
            }

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.named_tensors()[ti].1.get(e);
            let rel = rel_err(a, numeric);
            report.probes += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_tensor = name.clone();
            }
            if rel > tol {
                report.failures.push(ProbeFailure {
                    tensor: name.clone(),
                    index: e,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}
