//! Small dense-layer primitives with explicit backward passes.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::scalar::Scalar;

/// Dense layer, weight laid out `[d_in, d_out]` so `y = x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> Linear<S> {
    /// Weights drawn at `N(0, 1/d_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        let scale = S::from_f64(1.0 / (d_in as f64).sqrt());
        Self {
            weight: Array2::from_shape_fn((d_in, d_out), |_| S::standard_normal(rng) * scale),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<S>, dy: &Array2<S>, grad: &mut Linear<S>) -> Array2<S> {
        grad.weight = &grad.weight + &x.t().dot(dy);
        grad.bias = &grad.bias + &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub fn forward1(&self, x: &Array1<S>) -> Array1<S> {
        self.weight.t().dot(x) + &self.bias
    }

    pub fn backward1(&self, x: &Array1<S>, dy: &Array1<S>, grad: &mut Linear<S>) -> Array1<S> {
        let outer = x
            .view()
            .insert_axis(Axis(1))
            .dot(&dy.view().insert_axis(Axis(0)));
        grad.weight = &grad.weight + &outer;
        grad.bias = &grad.bias + dy;
        self.weight.dot(dy)
    }
}

pub const RMS_EPS: f64 = 1e-6;

/// Row-wise RMS normalization `y = x / sqrt(mean(x²) + eps)`.
/// Returns the normalized rows and the per-row reciprocal norms for backward.
pub fn rms_forward<S: Scalar>(x: &Array2<S>) -> (Array2<S>, Array1<S>) {
    let d = S::from_f64(x.shape()[1] as f64);
    let eps = S::from_f64(RMS_EPS);
    let inv_r: Array1<S> = x
        .rows()
        .into_iter()
        .map(|row| {
            let ms = row.iter().fold(S::zero(), |acc, &v| acc + v * v) / d;
            S::one() / (ms + eps).sqrt()
        })
        .collect();
    let y = x * &inv_r.view().insert_axis(Axis(1));
    (y, inv_r)
}

/// Backward of `rms_forward` given the original input and saved `inv_r`.
pub fn rms_backward<S: Scalar>(x: &Array2<S>, inv_r: &Array1<S>, dy: &Array2<S>) -> Array2<S> {
    let d = S::from_f64(x.shape()[1] as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    for i in 0..x.shape()[0] {
        let xr = x.row(i);
        let gr = dy.row(i);
        let ir = inv_r[i];
        let dot = xr
            .iter()
            .zip(gr.iter())
            .fold(S::zero(), |acc, (&xv, &gv)| acc + xv * gv);
        // dx = g/r − x · (g·x) / (d · r³)
        let coef = dot * ir * ir * ir / d;
        for j in 0..x.shape()[1] {
            dx[[i, j]] = gr[j] * ir - xr[j] * coef;
        }
    }
    dx
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

pub fn silu<S: Scalar>(v: S) -> S {
    v * sigmoid(v)
}

pub fn silu_prime<S: Scalar>(v: S) -> S {
    let s = sigmoid(v);
    s * (S::one() + v * (S::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::<f64>::init(&mut rng, 5, 4);
        let x = Array2::from_shape_fn((3, 5), |_| rng.gen::<f64>() - 0.5);
        let r = Array2::from_shape_fn((3, 4), |_| rng.gen::<f64>() - 0.5);
        let loss = |l: &Linear<f64>, x: &Array2<f64>| (&l.forward(x) * &r).sum();

        let mut grad = Linear::zeros(5, 4);
        let dx = lin.backward(&x, &r, &mut grad);

        let h = 1e-6;
        let mut lp = lin.clone();
        lp.weight[[2, 1]] += h;
        let fd = (loss(&lp, &x) - loss(&lin, &x)) / h;
        assert!((fd - grad.weight[[2, 1]]).abs() < 1e-6);

        let mut xp = x.clone();
        xp[[1, 3]] += h;
        let fd = (loss(&lin, &xp) - loss(&lin, &x)) / h;
        assert!((fd - dx[[1, 3]]).abs() < 1e-6);
    }

    #[test]
    fn rms_rows_have_unit_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((4, 16), |_| rng.gen::<f64>() * 3.0 - 1.5);
        let (y, _) = rms_forward(&x);
        for row in y.rows() {
            let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((ms - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn rms_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((3, 8), |_| rng.gen::<f64>() - 0.5);
        let r = Array2::from_shape_fn((3, 8), |_| rng.gen::<f64>() - 0.5);
        let loss = |x: &Array2<f64>| (&rms_forward(x).0 * &r).sum();

        let (_, inv_r) = rms_forward(&x);
        let dx = rms_backward(&x, &inv_r, &r);
        let h = 1e-6;
        for idx in [(0, 0), (1, 5), (2, 7)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "at {idx:?}: {fd} vs {}", dx[idx]);
        }
    }

    #[test]
    fn silu_prime_matches_finite_differences() {
        for v in [-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(v + h) - silu(v - h)) / (2.0 * h);
            assert!((fd - silu_prime(v)).abs() < 1e-8);
        }
    }
}
