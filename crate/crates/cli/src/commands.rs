//! Command definitions and their implementations. Every command returns its
//! printable output so tests can drive them in-process; `main` only parses
//! and prints.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;

use mirage_core::cp::bench_equivalence;
use mirage_core::flow::linear_quadratic_schedule;
use mirage_core::io::{load_checkpoint, save_array2, CheckpointManifest};
use mirage_core::sampler::{cached_sample, sample, SampleOutput};
use mirage_curation::{read_records, run_pipeline, write_records, DirStore, TaskStore, Thresholds};

use crate::config::{resolve_seed, RunConfig};
use crate::data::{dataset_from_config, derive_rng, prepare_scenes, save_dataset};
use crate::trainer::train;
use crate::CliError;

const SAMPLE_STREAM_TAG: u64 = 0x7361_6d70_6c00_0000;

#[derive(Debug, Parser)]
#[command(
    name = "mirage-mini",
    about = "Desk-scale audio-to-video diffusion: train, sample, curate, inspect",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed (and MIRAGE_MINI_SEED).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<(RunConfig, u64), CliError> {
        let cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let seed = resolve_seed(self.seed, cfg.seed)?;
        Ok((cfg, seed))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the synthetic scenes, writing metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Overrides train.out_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate video tokens from a checkpoint with guided sampling.
    Sample {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint directory produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene index whose audio/text condition the run.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Drop all conditioning.
        #[arg(long)]
        uncond: bool,
        /// Disable caching and run the plain sampling loop.
        #[arg(long)]
        vanilla: bool,
        /// Output stem; tokens land at <out>.json/.bin, the report at
        /// <out>.report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the filter funnel over a JSONL record file.
    Curate {
        /// One curation record per line.
        #[arg(long)]
        records: PathBuf,
        /// Where to write the annotated records; omit to skip.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Claim surviving clips in this lock directory before reporting.
        #[arg(long)]
        store_dir: Option<PathBuf>,
    },
    /// Summarize a checkpoint or a resolved configuration.
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check sharded attention against the dense oracle and report memory.
    BenchCp {
        #[arg(long, default_value_t = 240)]
        seq: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long = "d-head", default_value_t = 16)]
        d_head: usize,
        /// Comma-separated group sizes.
        #[arg(long, default_value = "1,2,4")]
        groups: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic dataset to disk.
    MakeData {
        #[command(flatten)]
        common: ConfigArgs,
        /// Overrides data.dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides data.scenes from the config.
        #[arg(long)]
        scenes: Option<usize>,
        /// Overrides data.coupling from the config.
        #[arg(long)]
        coupling: Option<f64>,
    },
}

pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Train { common, resume, out } => {
            let (mut cfg, seed) = common.load()?;
            if let Some(out) = out {
                cfg.train.out_dir = out;
            }
            let summary = train(&cfg, seed, resume)?;
            Ok(serde_json::to_string_pretty(&json!({
                "seed": seed,
                "start_step": summary.start_step,
                "final_step": summary.final_step,
                "first_loss": summary.first_loss,
                "final_loss": summary.final_loss,
                "out_dir": cfg.train.out_dir,
                "checkpoints": summary.checkpoint_dirs,
            }))?)
        }
        Command::Sample {
            common,
            checkpoint,
            scene,
            uncond,
            vanilla,
            out,
        } => {
            let (cfg, seed) = common.load()?;
            let output = run_sample(&cfg, seed, &checkpoint, scene, uncond, vanilla)?;
            save_array2(&out, "sample-tokens", &output.tokens)?;
            let report_path = out.with_extension("report.json");
            std::fs::write(&report_path, serde_json::to_string_pretty(&output.report)?)?;
            Ok(serde_json::to_string_pretty(&json!({
                "seed": seed,
                "scene": scene,
                "unconditional": uncond,
                "tokens": out.with_extension("json"),
                "report_file": report_path,
                "report": output.report,
            }))?)
        }
        Command::Curate {
            records,
            out,
            store_dir,
        } => {
            let recs = read_records(&records)?;
            let outcome = run_pipeline(recs, &Thresholds::default())?;
            let claims = match store_dir {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    let store = DirStore::new(dir);
                    let mut granted = Vec::new();
                    let mut held = Vec::new();
                    for id in &outcome.surviving_ids {
                        if store.try_claim(id)? {
                            granted.push(id.clone());
                        } else {
                            held.push(id.clone());
                        }
                    }
                    Some(json!({ "granted": granted, "already_held": held }))
                }
                None => None,
            };
            if let Some(out) = out {
                write_records(&out, &outcome.records)?;
            }
            Ok(serde_json::to_string_pretty(&json!({
                "funnel": outcome.report,
                "surviving": outcome.surviving_ids,
                "quarantined": outcome.quarantined_ids,
                "claims": claims,
            }))?)
        }
        Command::Inspect { checkpoint, config } => run_inspect(checkpoint, config),
        Command::BenchCp {
            seq,
            heads,
            d_head,
            groups,
            seed,
        } => {
            let groups = parse_groups(&groups)?;
            let rows = bench_equivalence(seq, heads, d_head, &groups, seed)?;
            let mut out = String::new();
            for row in &rows {
                out.push_str(&serde_json::to_string(row)?);
                out.push('\n');
            }
            Ok(out.trim_end().to_string())
        }
        Command::MakeData {
            common,
            out,
            scenes,
            coupling,
        } => {
            let (mut cfg, seed) = common.load()?;
            if let Some(n) = scenes {
                cfg.data.scenes = n;
            }
            if let Some(c) = coupling {
                cfg.data.coupling = c;
            }
            cfg.validate()?;
            let dir = out.unwrap_or_else(|| cfg.data.dir.clone());
            let dataset = dataset_from_config(&cfg, seed)?;
            save_dataset(&dir, &dataset, seed, &cfg.data)?;
            Ok(serde_json::to_string_pretty(&json!({
                "dir": dir,
                "scenes": dataset.len(),
                "seed": seed,
                "coupling": cfg.data.coupling,
                "frames_per_scene": cfg.data.scene_frames,
            }))?)
        }
    }
}

/// Loads the checkpoint, rebuilds scene conditioning, and runs the sampler.
pub fn run_sample(
    cfg: &RunConfig,
    seed: u64,
    checkpoint: &std::path::Path,
    scene: usize,
    uncond: bool,
    vanilla: bool,
) -> Result<SampleOutput<f64>, CliError> {
    cfg.validate()?;
    let loaded = load_checkpoint::<f64>(checkpoint)?;
    if loaded.params.cfg != cfg.model {
        return Err(CliError::Config(format!(
            "checkpoint at {} disagrees with the configured model",
            checkpoint.display()
        )));
    }
    let bundles = prepare_scenes(cfg, seed)?;
    if scene >= bundles.len() {
        return Err(CliError::Config(format!(
            "scene {scene} out of range; dataset has {}",
            bundles.len()
        )));
    }
    let conds = if uncond {
        mirage_core::cond::ConditioningSet::null()
    } else {
        bundles[scene].conds_no_ref()
    };
    let ladder = linear_quadratic_schedule(&cfg.schedule)?;
    let guidance = cfg.guidance.to_guidance::<f64>(cfg.model.d_text);
    let grid = cfg.model.video_grid()?;
    let mut rng = derive_rng(seed ^ SAMPLE_STREAM_TAG, scene as u64);
    let x_init = Array2::from_shape_fn((grid.token_count(), grid.token_dim()), |_| {
        rng.sample::<f64, _>(StandardNormal)
    });
    let output = if vanilla {
        sample(&loaded.params, &conds, &ladder, &guidance, x_init)?
    } else {
        cached_sample(&loaded.params, &conds, &ladder, &guidance, x_init)?
    };
    Ok(output)
}

fn parse_groups(raw: &str) -> Result<Vec<usize>, CliError> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("bad group size {s:?}")))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct CheckpointSummary {
    step: u64,
    dtype: String,
    tensor_count: usize,
    parameter_count: usize,
    has_optimizer: bool,
    model: serde_json::Value,
}

fn run_inspect(
    checkpoint: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<String, CliError> {
    match (checkpoint, config) {
        (Some(dir), None) => {
            let manifest: CheckpointManifest =
                serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
            let summary = CheckpointSummary {
                step: manifest.step,
                dtype: manifest.dtype.clone(),
                tensor_count: manifest.tensors.len(),
                parameter_count: manifest
                    .tensors
                    .iter()
                    .map(|t| t.shape.iter().product::<usize>())
                    .sum(),
                has_optimizer: manifest.optimizer.is_some(),
                model: serde_json::to_value(manifest.model)?,
            };
            Ok(serde_json::to_string_pretty(&summary)?)
        }
        (None, Some(path)) => {
            let cfg = RunConfig::load(&path)?;
            Ok(serde_json::to_string_pretty(&cfg)?)
        }
        _ => Err(CliError::Config(
            "inspect wants exactly one of --checkpoint or --config".into(),
        )),
    }
}
