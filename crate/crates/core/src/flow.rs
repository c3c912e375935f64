//! Flow-matching training machinery: the interpolation path, velocity target,
//! timestep schedule, conditioning dropout, and the loss with its gradient.
//!
//! Convention throughout: `t = 0` is data, `t = 1` is noise, and the model
//! regresses the constant path velocity `x1 − x0`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cond::ConditioningSet;
use crate::mmdit::{model_backward, model_forward, model_forward_tape, MmditError, ModelParams};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("{what}: shapes {a:?} and {b:?} differ")]
    Shape {
        what: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("flow time {0} outside [0, 1]")]
    TimeRange(f64),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("dropout rate {0} outside [0, 1]")]
    Rate(f64),
    #[error(transparent)]
    Model(#[from] MmditError),
}

fn check_same_shape<S: Scalar>(
    what: &'static str,
    a: &Array2<S>,
    b: &Array2<S>,
) -> Result<(), FlowError> {
    if a.shape() != b.shape() {
        return Err(FlowError::Shape {
            what,
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_time<S: Scalar>(t: S) -> Result<(), FlowError> {
    let tf = t.to_f64();
    if !tf.is_finite() || !(0.0..=1.0).contains(&tf) {
        return Err(FlowError::TimeRange(tf));
    }
    Ok(())
}

/// Point on the straight path from data `x1` (t=0) to noise `x0` (t=1).
pub fn interpolate<S: Scalar>(
    x0: &Array2<S>,
    x1: &Array2<S>,
    t: S,
) -> Result<Array2<S>, FlowError> {
    check_same_shape("interpolate", x0, x1)?;
    check_time(t)?;
    Ok(x1 * (S::one() - t) + x0 * t)
}

/// Constant velocity of the straight path.
pub fn velocity_target<S: Scalar>(x0: &Array2<S>, x1: &Array2<S>) -> Result<Array2<S>, FlowError> {
    check_same_shape("velocity_target", x0, x1)?;
    Ok(x1 - x0)
}

/// One training sample with its precomputed interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample<S> {
    pub x0: Array2<S>,
    pub x1: Array2<S>,
    pub t: S,
    pub xt: Array2<S>,
}

impl<S: Scalar> FlowSample<S> {
    pub fn new(x0: Array2<S>, x1: Array2<S>, t: S) -> Result<Self, FlowError> {
        let xt = interpolate(&x0, &x1, t)?;
        Ok(Self { x0, x1, t, xt })
    }
}

/// Two-phase timestep ladder: linear from 1 down to `1 − c`, then a quadratic
/// tail to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub linear_fraction: f64,
    pub linear_extent: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 64,
            linear_fraction: 0.5,
            linear_extent: 0.5,
        }
    }
}

impl ScheduleSpec {
    /// Number of linear steps `m = round(K · fraction)`.
    pub fn linear_steps(&self) -> usize {
        (self.steps as f64 * self.linear_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let k = self.steps;
        let m = self.linear_steps();
        if k < 2 {
            return Err(FlowError::Schedule(format!(
                "steps {k} leaves no room for both phases"
            )));
        }
        if m < 1 || m >= k {
            return Err(FlowError::Schedule(format!(
                "linear fraction {} gives m={m}, need 1 <= m < {k}",
                self.linear_fraction
            )));
        }
        let c = self.linear_extent;
        if !(c > 0.0 && c < 1.0) {
            return Err(FlowError::Schedule(format!(
                "linear extent {c} outside (0, 1)"
            )));
        }
        Ok(())
    }
}

/// Ladder `[t_0 .. t_K]`, strictly decreasing from 1 to 0.
pub fn linear_quadratic_schedule(spec: &ScheduleSpec) -> Result<Vec<f64>, FlowError> {
    spec.validate()?;
    let k = spec.steps;
    let m = spec.linear_steps();
    let c = spec.linear_extent;
    let mut ladder = Vec::with_capacity(k + 1);
    for i in 0..=k {
        let t = if i <= m {
            1.0 - c * i as f64 / m as f64
        } else {
            let frac = (i - m) as f64 / (k - m) as f64;
            (1.0 - c) * (1.0 - frac * frac)
        };
        ladder.push(t);
    }
    Ok(ladder)
}

/// Uniform draw over the ladder's rungs with the `t = 0` endpoint removed.
/// At t = 0 the interpolant carries no trace of the noise sample, so the
/// velocity target there is pure irreducible variance.
pub fn sample_training_t<R: Rng + ?Sized>(ladder: &[f64], rng: &mut R) -> (usize, f64) {
    let k = ladder.len() - 1;
    assert!(k >= 2, "ladder needs an interior rung to train on");
    let i = rng.gen_range(1..k);
    (i, ladder[i])
}

/// Independent null-replacement rates per conditioning modality, plus a joint
/// rate that blanks all three at once so the fully unconditional branch is
/// trained for guidance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutSpec {
    pub ref_rate: f64,
    pub text_rate: f64,
    pub audio_rate: f64,
    pub joint_rate: f64,
}

impl Default for DropoutSpec {
    fn default() -> Self {
        Self {
            ref_rate: 0.1,
            text_rate: 0.1,
            audio_rate: 0.1,
            joint_rate: 0.1,
        }
    }
}

impl DropoutSpec {
    pub fn validate(&self) -> Result<(), FlowError> {
        for rate in [self.ref_rate, self.text_rate, self.audio_rate, self.joint_rate] {
            if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
                return Err(FlowError::Rate(rate));
            }
        }
        Ok(())
    }
}

/// Replaces conditioning modalities by their null embeddings. Always consumes
/// exactly four RNG draws (joint, ref, text, audio) so downstream draws stay
/// aligned regardless of outcomes.
pub fn condition_dropout<S: Scalar, R: Rng + ?Sized>(
    conds: &ConditioningSet<S>,
    spec: &DropoutSpec,
    rng: &mut R,
) -> ConditioningSet<S> {
    let joint = rng.gen::<f64>() < spec.joint_rate;
    let drop_ref = rng.gen::<f64>() < spec.ref_rate;
    let drop_text = rng.gen::<f64>() < spec.text_rate;
    let drop_audio = rng.gen::<f64>() < spec.audio_rate;
    let mut out = conds.clone();
    if joint || drop_ref {
        out.ref_latent = None;
        out.ref_time = S::zero();
    }
    if joint || drop_text {
        out.text = None;
    }
    if joint || drop_audio {
        out.audio = None;
    }
    out
}

/// One loss term: endpoints, conditioning, and the drawn timestep.
#[derive(Debug, Clone)]
pub struct FlowItem<S> {
    pub x0: Array2<S>,
    pub x1: Array2<S>,
    pub conds: ConditioningSet<S>,
    pub t: S,
}

/// Mean squared velocity error over every element of the batch.
pub fn fm_loss<S: Scalar>(params: &ModelParams<S>, items: &[FlowItem<S>]) -> Result<S, FlowError> {
    let mut total = S::zero();
    let mut count = 0usize;
    for item in items {
        let xt = interpolate(&item.x0, &item.x1, item.t)?;
        let target = velocity_target(&item.x0, &item.x1)?;
        let v = model_forward(params, &xt, &item.conds, item.t)?;
        for (&p, &q) in v.iter().zip(target.iter()) {
            let d = p - q;
            total = total + d * d;
        }
        count += v.len();
    }
    Ok(total / S::from_f64(count as f64))
}

/// Loss plus parameter gradients accumulated into `grads`.
pub fn fm_loss_and_grad<S: Scalar>(
    params: &ModelParams<S>,
    items: &[FlowItem<S>],
    grads: &mut ModelParams<S>,
) -> Result<S, FlowError> {
    let count: usize = items
        .iter()
        .map(|item| item.x1.len())
        .sum();
    let scale = S::from_f64(2.0 / count as f64);
    let mut total = S::zero();
    for item in items {
        let xt = interpolate(&item.x0, &item.x1, item.t)?;
        let target = velocity_target(&item.x0, &item.x1)?;
        let (v, tape) = model_forward_tape(params, &xt, &item.conds, item.t)?;
        let diff = &v - &target;
        for &d in diff.iter() {
            total = total + d * d;
        }
        let d_out = &diff * scale;
        model_backward(params, &tape, &d_out, grads);
    }
    Ok(total / S::from_f64(count as f64))
}
