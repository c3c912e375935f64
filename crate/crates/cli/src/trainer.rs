//! Training loop over the synthetic scenes. Each step derives its own RNG
//! stream from (seed, step) with a fixed draw order, so a resumed run
//! replays the remaining steps bit for bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use mirage_core::flow::{
    condition_dropout, fm_loss_and_grad, linear_quadratic_schedule, sample_training_t, FlowItem,
};
use mirage_core::io::{load_checkpoint, save_checkpoint};
use mirage_core::mmdit::model::ModelParams;
use mirage_core::optim::AdamW;

use crate::config::RunConfig;
use crate::data::{derive_rng, prepare_scenes, SceneBundle};
use crate::CliError;

/// Keeps training streams disjoint from dataset streams of the same seed.
const TRAIN_STREAM_TAG: u64 = 0x7472_6169_6e00_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub first_loss: f64,
    pub final_loss: f64,
    pub start_step: u64,
    pub final_step: u64,
    pub checkpoint_dirs: Vec<PathBuf>,
}

fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join(format!("step-{step:06}"))
}

/// Highest-numbered `step-*` checkpoint directory, if any.
pub fn latest_checkpoint(out: &Path) -> Result<Option<(u64, PathBuf)>, CliError> {
    if !out.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(out)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(rest) = name.to_str().and_then(|n| n.strip_prefix("step-")) else {
            continue;
        };
        let Ok(step) = rest.parse::<u64>() else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best)
}

/// One batch worth of flow items. Draw order per slot is fixed: scene index,
/// timestep, reference frame, the four dropout draws, then the noise matrix.
fn draw_batch(
    cfg: &RunConfig,
    bundles: &[SceneBundle],
    ladder: &[f64],
    seed: u64,
    step: u64,
) -> Vec<FlowItem<f64>> {
    let mut rng = derive_rng(seed ^ TRAIN_STREAM_TAG, step);
    let ft = cfg.model.codec.temporal_factor;
    (0..cfg.train.batch_size)
        .map(|_| {
            let bundle = &bundles[rng.gen_range(0..bundles.len())];
            let (_, t) = sample_training_t(ladder, &mut rng);
            let ref_idx = rng.gen_range(0..bundle.ref_latents.len());
            let conds = bundle.conds_with_ref(ref_idx, ft);
            let conds = condition_dropout(&conds, &cfg.dropout, &mut rng);
            let shape = bundle.x1.raw_dim();
            let x0 = Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
            FlowItem {
                x0,
                x1: bundle.x1.clone(),
                conds,
                t,
            }
        })
        .collect()
}

/// Rescales `grads` so their global L2 norm is at most `clip`; 0 disables.
/// Adam's moment normalization absorbs uniform scaling, so this only bites
/// on spike steps.
fn clip_gradients(grads: &mut ModelParams<f64>, clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let mut sq = 0.0;
    for (_, t) in grads.named_tensors() {
        for e in 0..t.len() {
            let g = t.get(e);
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm <= clip {
        return;
    }
    let scale = clip / norm;
    for (_, mut t) in grads.named_tensors_mut() {
        for e in 0..t.len() {
            t.set(e, t.get(e) * scale);
        }
    }
}

/// Learning rate at a given step: linear warmup, then inverse-sqrt decay down
/// to a floor. A function of the step alone, never of the configured horizon,
/// so extending a finished run and rerunning from scratch stay bit-identical.
fn lr_at(cfg: &RunConfig, step: u64) -> f64 {
    let peak = cfg.optimizer.lr;
    let warmup = cfg.train.warmup_steps.max(1) as f64;
    let shape = (step as f64 / warmup).min((warmup / step as f64).sqrt());
    peak * shape.max(cfg.train.min_lr_fraction)
}

pub fn train(cfg: &RunConfig, seed: u64, resume: bool) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let bundles = prepare_scenes(cfg, seed)?;
    let ladder = linear_quadratic_schedule(&cfg.schedule)?;
    let out = &cfg.train.out_dir;
    fs::create_dir_all(out)?;

    let (mut params, mut opt, start_step) = if resume {
        let (step, dir) = latest_checkpoint(out)?
            .ok_or_else(|| CliError::MissingCheckpoint(out.clone()))?;
        let loaded = load_checkpoint::<f64>(&dir)?;
        let opt = loaded.optimizer.ok_or_else(|| {
            CliError::Config(format!("{} holds no optimizer state", dir.display()))
        })?;
        if loaded.params.cfg != cfg.model {
            return Err(CliError::Config(format!(
                "checkpoint at {} was trained with a different model config",
                dir.display()
            )));
        }
        (loaded.params, opt, step)
    } else {
        let params = ModelParams::init(cfg.model, seed)?;
        let opt = AdamW::new(&params, cfg.optimizer)?;
        (params, opt, 0)
    };

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .truncate(!resume)
        .write(true)
        .open(&metrics_path)?;

    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut checkpoint_dirs = Vec::new();
    for step in start_step + 1..=cfg.train.steps {
        let items = draw_batch(cfg, &bundles, &ladder, seed, step);
        let mut grads = params.zeros_like();
        let loss = fm_loss_and_grad(&params, &items, &mut grads)?;
        if !loss.is_finite() {
            // bail before touching params; checkpoints on disk stay valid
            return Err(CliError::NonFiniteLoss { step });
        }
        clip_gradients(&mut grads, cfg.train.clip_norm);
        opt.cfg.lr = lr_at(cfg, step);
        opt.step(&mut params, &grads);

        let line = serde_json::to_string(&StepMetrics { step, loss })?;
        writeln!(metrics, "{line}")?;

        if step == start_step + 1 {
            first_loss = loss;
        }
        final_loss = loss;
        if step % cfg.train.checkpoint_every == 0 || step == cfg.train.steps {
            let dir = checkpoint_dir(out, step);
            save_checkpoint(&dir, &params, step, Some(&opt))?;
            checkpoint_dirs.push(dir);
        }
    }
    metrics.flush()?;

    Ok(TrainSummary {
        first_loss,
        final_loss,
        start_step,
        final_step: cfg.train.steps,
        checkpoint_dirs,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, CliError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Shrunk setup so loop mechanics are testable in seconds.
    fn tiny_config(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 32;
        cfg.model.d_ff = 64;
        cfg.model.t_freq_dim = 16;
        cfg.model.d_text = 16;
        cfg.schedule.steps = 8;
        cfg.train.steps = 6;
        cfg.train.batch_size = 2;
        cfg.train.checkpoint_every = 3;
        cfg.train.out_dir = out.to_path_buf();
        cfg
    }

    #[test]
    fn metrics_and_checkpoints_land_where_promised() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("run"));
        let summary = train(&cfg, 1, false).unwrap();
        assert_eq!(summary.start_step, 0);
        assert_eq!(summary.final_step, 6);
        assert!(summary.first_loss.is_finite());
        let metrics = read_metrics(&cfg.train.out_dir.join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.len(), 6);
        assert_eq!(metrics[0].step, 1);
        assert_eq!(metrics[0].loss, summary.first_loss);
        assert_eq!(metrics[5].loss, summary.final_loss);
        // steps 3 and 6
        assert_eq!(summary.checkpoint_dirs.len(), 2);
        assert!(checkpoint_dir(&cfg.train.out_dir, 6).join("manifest.json").exists());
    }

    #[test]
    fn same_seed_trains_bitwise_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_a = tiny_config(&dir.path().join("a"));
        let cfg_b = tiny_config(&dir.path().join("b"));
        train(&cfg_a, 7, false).unwrap();
        train(&cfg_b, 7, false).unwrap();
        let a = load_checkpoint::<f64>(&checkpoint_dir(&cfg_a.train.out_dir, 6)).unwrap();
        let b = load_checkpoint::<f64>(&checkpoint_dir(&cfg_b.train.out_dir, 6)).unwrap();
        assert_eq!(a.params, b.params);
        let ma = fs::read(cfg_a.train.out_dir.join("metrics.jsonl")).unwrap();
        let mb = fs::read(cfg_b.train.out_dir.join("metrics.jsonl")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn resume_continues_the_metrics_sequence_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let full_cfg = tiny_config(&dir.path().join("full"));
        train(&full_cfg, 3, false).unwrap();

        let mut half_cfg = tiny_config(&dir.path().join("half"));
        half_cfg.train.steps = 3;
        train(&half_cfg, 3, false).unwrap();
        half_cfg.train.steps = 6;
        let resumed = train(&half_cfg, 3, true).unwrap();
        assert_eq!(resumed.start_step, 3);

        let full = fs::read(full_cfg.train.out_dir.join("metrics.jsonl")).unwrap();
        let half = fs::read(half_cfg.train.out_dir.join("metrics.jsonl")).unwrap();
        assert_eq!(full, half);

        let a = load_checkpoint::<f64>(&checkpoint_dir(&full_cfg.train.out_dir, 6)).unwrap();
        let b = load_checkpoint::<f64>(&checkpoint_dir(&half_cfg.train.out_dir, 6)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.optimizer.unwrap().m, b.optimizer.unwrap().m);
    }

    #[test]
    fn resume_without_checkpoints_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("none"));
        match train(&cfg, 1, true) {
            Err(CliError::MissingCheckpoint(_)) => {}
            other => panic!("expected MissingCheckpoint, got {other:?}"),
        }
    }

    #[test]
    fn lr_warms_up_then_decays_to_the_floor() {
        let mut cfg = RunConfig::default();
        cfg.optimizer.lr = 1.0;
        cfg.train.warmup_steps = 10;
        cfg.train.min_lr_fraction = 0.25;
        assert!((lr_at(&cfg, 5) - 0.5).abs() < 1e-12);
        assert!((lr_at(&cfg, 10) - 1.0).abs() < 1e-12);
        for step in 11..160 {
            assert!(lr_at(&cfg, step) <= lr_at(&cfg, step - 1));
        }
        assert!((lr_at(&cfg, 40) - 0.5).abs() < 1e-12);
        assert!((lr_at(&cfg, 1000) - 0.25).abs() < 1e-12);

        cfg.train.min_lr_fraction = 1.0;
        for step in [1, 50, 100] {
            assert!((lr_at(&cfg, step) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batches_draw_deterministically_and_vary_by_step() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let bundles = prepare_scenes(&cfg, 5).unwrap();
        let ladder = linear_quadratic_schedule(&cfg.schedule).unwrap();
        let a = draw_batch(&cfg, &bundles, &ladder, 5, 1);
        let b = draw_batch(&cfg, &bundles, &ladder, 5, 1);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].x0, b[0].x0);
        assert_eq!(a[0].t, b[0].t);
        let c = draw_batch(&cfg, &bundles, &ladder, 5, 2);
        assert_ne!(a[0].x0, c[0].x0);
    }
}
