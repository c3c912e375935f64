//! Guided ODE sampling along a descending timestep ladder.
//!
//! Each step combines a conditional forward, an unconditional (or negative)
//! forward, and optionally a skip-layer forward. Two caches cut the cost: the
//! conditional/unconditional residual is replayed after a configurable step,
//! and per-block attention outputs are reused between full steps.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cond::{ConditioningSet, TextEmbedding};
use crate::mmdit::{
    model_forward, model_infer, AttnCache, AttnCacheMode, InferOptions, MmditError, ModelParams,
};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("euler step needs descending time, got {t} -> {t_next}")]
    NonMonotone { t: f64, t_next: f64 },
    #[error("{what}: shapes {a:?} and {b:?} differ")]
    Shape {
        what: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("cosine anneal needs at least 2 steps, got {0}")]
    ShortSchedule(usize),
    #[error("schedule ladder must descend strictly")]
    BadLadder,
    #[error("guidance: {0}")]
    Config(String),
    #[error("cache policy references step {step}, schedule has {steps}")]
    CachePolicy { step: usize, steps: usize },
    #[error(transparent)]
    Model(#[from] MmditError),
}

/// Explicit Euler update descending the time axis.
pub fn euler_step<S: Scalar>(
    x: &Array2<S>,
    v: &Array2<S>,
    t: f64,
    t_next: f64,
) -> Result<Array2<S>, SamplerError> {
    if !(t > t_next) {
        return Err(SamplerError::NonMonotone { t, t_next });
    }
    if x.shape() != v.shape() {
        return Err(SamplerError::Shape {
            what: "euler step",
            a: x.shape().to_vec(),
            b: v.shape().to_vec(),
        });
    }
    Ok(x + &(v * S::from_f64(t - t_next)))
}

/// Classifier-free combination `v_uncond + w · (v_cond − v_uncond)`.
pub fn cfg_combine<S: Scalar>(
    v_cond: &Array2<S>,
    v_uncond: &Array2<S>,
    w: S,
) -> Result<Array2<S>, SamplerError> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(SamplerError::Shape {
            what: "cfg combine",
            a: v_cond.shape().to_vec(),
            b: v_uncond.shape().to_vec(),
        });
    }
    Ok(v_uncond + &((v_cond - v_uncond) * w))
}

/// Guidance scale annealed from `hi` at the first step to `lo` at the last.
pub fn cosine_cfg_scale(i: usize, k: usize, cfg_hi: f64, cfg_lo: f64) -> Result<f64, SamplerError> {
    if k < 2 {
        return Err(SamplerError::ShortSchedule(k));
    }
    debug_assert!(i < k);
    let phase = std::f64::consts::PI * i as f64 / (k - 1) as f64;
    Ok(cfg_lo + (cfg_hi - cfg_lo) * (1.0 + phase.cos()) / 2.0)
}

/// Forward pass with the given blocks evaluated as identity maps.
pub fn skip_layer_forward<S: Scalar>(
    params: &ModelParams<S>,
    x: &Array2<S>,
    conds: &ConditioningSet<S>,
    t: S,
    skip_set: &[usize],
) -> Result<Array2<S>, MmditError> {
    model_infer(
        params,
        x,
        conds,
        t,
        InferOptions {
            skip_blocks: skip_set,
            cache: AttnCacheMode::Off,
        },
    )
}

/// Inference-time reuse policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CachePolicy {
    pub enabled: bool,
    /// First step at which the unconditional forward is replaced by the
    /// cached conditional/unconditional residual.
    pub uncond_reuse_after: usize,
    /// Attention outputs recompute on steps where `i % stride == 0`.
    pub attn_reuse_stride: usize,
}

impl Default for CachePolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            uncond_reuse_after: 16,
            attn_reuse_stride: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig<S> {
    pub cfg_hi: f64,
    pub cfg_lo: f64,
    pub stg_weight: f64,
    pub stg_skip_layers: Vec<usize>,
    pub negative_text: Option<TextEmbedding<S>>,
    pub cache: CachePolicy,
}

impl<S: Scalar> Default for GuidanceConfig<S> {
    fn default() -> Self {
        Self {
            cfg_hi: 2.0,
            cfg_lo: 2.0,
            stg_weight: 0.0,
            stg_skip_layers: Vec::new(),
            negative_text: None,
            cache: CachePolicy::default(),
        }
    }
}

impl<S: Scalar> GuidanceConfig<S> {
    /// Checks everything except the cache policy; enough for uncached runs.
    pub fn validate_guidance(&self, depth: usize) -> Result<(), SamplerError> {
        if !(self.cfg_hi >= self.cfg_lo && self.cfg_lo >= 0.0) {
            return Err(SamplerError::Config(format!(
                "need cfg_hi >= cfg_lo >= 0, got hi {} lo {}",
                self.cfg_hi, self.cfg_lo
            )));
        }
        if !self.stg_weight.is_finite() {
            return Err(SamplerError::Config("stg weight must be finite".into()));
        }
        for &idx in &self.stg_skip_layers {
            if idx >= depth {
                return Err(SamplerError::Config(format!(
                    "skip layer {idx} out of range for depth {depth}"
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self, depth: usize, steps: usize) -> Result<(), SamplerError> {
        self.validate_guidance(depth)?;
        if self.cache.enabled {
            if self.cache.uncond_reuse_after >= steps {
                return Err(SamplerError::CachePolicy {
                    step: self.cache.uncond_reuse_after,
                    steps,
                });
            }
            if self.cache.attn_reuse_stride == 0 {
                return Err(SamplerError::Config("attention reuse stride must be >= 1".into()));
            }
        }
        Ok(())
    }

    fn uses_stg(&self) -> bool {
        self.stg_weight != 0.0
    }

    fn uncond_set(&self) -> ConditioningSet<S> {
        let mut c = ConditioningSet::null();
        if let Some(neg) = &self.negative_text {
            c.text = Some(neg.clone());
        }
        c
    }

    /// True when the unconditional branch would see byte-identical inputs to
    /// the conditional one, making its forward redundant.
    fn uncond_is_cond(&self, conds: &ConditioningSet<S>) -> bool {
        conds.is_null() && self.negative_text.is_none()
    }
}

/// One guidance evaluation from the three raw forwards.
pub fn guided_velocity<S: Scalar>(
    params: &ModelParams<S>,
    x: &Array2<S>,
    conds: &ConditioningSet<S>,
    t: S,
    g: &GuidanceConfig<S>,
    i: usize,
    steps: usize,
) -> Result<Array2<S>, SamplerError> {
    let w = cosine_cfg_scale(i, steps, g.cfg_hi, g.cfg_lo)?;
    let v_cond = model_forward(params, x, conds, t)?;
    let v_uncond = if g.uncond_is_cond(conds) {
        v_cond.clone()
    } else {
        model_forward(params, x, &g.uncond_set(), t)?
    };
    let mut v = cfg_combine(&v_cond, &v_uncond, S::from_f64(w))?;
    if g.uses_stg() {
        let v_skip = skip_layer_forward(params, x, conds, t, &g.stg_skip_layers)?;
        v = v + (&v_cond - &v_skip) * S::from_f64(g.stg_weight);
    }
    Ok(v)
}

/// Forward-count bookkeeping for one sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub steps: usize,
    pub cond_forwards: usize,
    pub uncond_forwards: usize,
    pub skip_forwards: usize,
    pub total_forwards: usize,
    /// Cost of the same run without any caching or input-identity shortcut.
    pub vanilla_forwards: usize,
    pub attn_full_steps: usize,
    pub attn_reused_steps: usize,
}

pub struct SampleOutput<S> {
    pub tokens: Array2<S>,
    pub report: SampleReport,
}

fn validate_ladder(ladder: &[f64]) -> Result<usize, SamplerError> {
    if ladder.len() < 2 {
        return Err(SamplerError::BadLadder);
    }
    for w in ladder.windows(2) {
        if !(w[1] < w[0]) {
            return Err(SamplerError::BadLadder);
        }
    }
    Ok(ladder.len() - 1)
}

/// Plain sampling loop: every branch recomputed at every step.
pub fn sample<S: Scalar>(
    params: &ModelParams<S>,
    conds: &ConditioningSet<S>,
    ladder: &[f64],
    g: &GuidanceConfig<S>,
    x_init: Array2<S>,
) -> Result<SampleOutput<S>, SamplerError> {
    let k = validate_ladder(ladder)?;
    g.validate_guidance(params.cfg.depth)?;
    let shortcut = g.uncond_is_cond(conds);
    let mut x = x_init;
    for i in 0..k {
        let t = S::from_f64(ladder[i]);
        let v = guided_velocity(params, &x, conds, t, g, i, k)?;
        x = euler_step(&x, &v, ladder[i], ladder[i + 1])?;
    }
    let per_step = 1 + usize::from(!shortcut) + usize::from(g.uses_stg());
    Ok(SampleOutput {
        tokens: x,
        report: SampleReport {
            steps: k,
            cond_forwards: k,
            uncond_forwards: if shortcut { 0 } else { k },
            skip_forwards: if g.uses_stg() { k } else { 0 },
            total_forwards: k * per_step,
            vanilla_forwards: k * (2 + usize::from(g.uses_stg())),
            attn_full_steps: k,
            attn_reused_steps: 0,
        },
    })
}

/// Sampling with residual reuse and attention-output reuse. With the policy
/// disabled this follows the exact arithmetic of [`sample`].
pub fn cached_sample<S: Scalar>(
    params: &ModelParams<S>,
    conds: &ConditioningSet<S>,
    ladder: &[f64],
    g: &GuidanceConfig<S>,
    x_init: Array2<S>,
) -> Result<SampleOutput<S>, SamplerError> {
    let k = validate_ladder(ladder)?;
    g.validate(params.cfg.depth, k)?;
    let depth = params.cfg.depth;
    let enabled = g.cache.enabled;
    let shortcut = g.uncond_is_cond(conds);
    let uncond_conds = g.uncond_set();

    let mut x = x_init;
    let mut residual: Option<Array2<S>> = None;
    let mut cond_cache = AttnCache::empty(depth);
    let mut uncond_cache = AttnCache::empty(depth);

    let mut report = SampleReport {
        steps: k,
        cond_forwards: 0,
        uncond_forwards: 0,
        skip_forwards: 0,
        total_forwards: 0,
        vanilla_forwards: k * (2 + usize::from(g.uses_stg())),
        attn_full_steps: 0,
        attn_reused_steps: 0,
    };

    for i in 0..k {
        let t = S::from_f64(ladder[i]);
        let full_attn = !enabled || i % g.cache.attn_reuse_stride == 0;
        if full_attn {
            report.attn_full_steps += 1;
        } else {
            report.attn_reused_steps += 1;
        }

        let v_cond = if enabled {
            if full_attn {
                cond_cache = AttnCache::empty(depth);
                model_infer(
                    params,
                    &x,
                    conds,
                    t,
                    InferOptions {
                        skip_blocks: &[],
                        cache: AttnCacheMode::Record(&mut cond_cache),
                    },
                )?
            } else {
                model_infer(
                    params,
                    &x,
                    conds,
                    t,
                    InferOptions {
                        skip_blocks: &[],
                        cache: AttnCacheMode::Reuse(&cond_cache),
                    },
                )?
            }
        } else {
            model_forward(params, &x, conds, t)?
        };
        report.cond_forwards += 1;

        let v_uncond = if shortcut {
            v_cond.clone()
        } else if enabled && i >= g.cache.uncond_reuse_after {
            let r = residual.as_ref().expect("residual recorded before reuse");
            &v_cond - r
        } else {
            let v_u = if enabled {
                if full_attn {
                    uncond_cache = AttnCache::empty(depth);
                    model_infer(
                        params,
                        &x,
                        &uncond_conds,
                        t,
                        InferOptions {
                            skip_blocks: &[],
                            cache: AttnCacheMode::Record(&mut uncond_cache),
                        },
                    )?
                } else {
                    model_infer(
                        params,
                        &x,
                        &uncond_conds,
                        t,
                        InferOptions {
                            skip_blocks: &[],
                            cache: AttnCacheMode::Reuse(&uncond_cache),
                        },
                    )?
                }
            } else {
                model_forward(params, &x, &uncond_conds, t)?
            };
            report.uncond_forwards += 1;
            residual = Some(&v_cond - &v_u);
            v_u
        };

        let w = cosine_cfg_scale(i, k, g.cfg_hi, g.cfg_lo)?;
        let mut v = cfg_combine(&v_cond, &v_uncond, S::from_f64(w))?;
        if g.uses_stg() {
            // the skip branch bypasses both caches
            let v_skip = skip_layer_forward(params, &x, conds, t, &g.stg_skip_layers)?;
            report.skip_forwards += 1;
            v = v + (&v_cond - &v_skip) * S::from_f64(g.stg_weight);
        }
        x = euler_step(&x, &v, ladder[i], ladder[i + 1])?;
    }

    report.total_forwards = report.cond_forwards + report.uncond_forwards + report.skip_forwards;
    Ok(SampleOutput { tokens: x, report })
}
