//! Learnable rotary position embedding.
//!
//! Each attention head dimension pair `(2j, 2j+1)` owns one frequency and is
//! assigned to one position axis. Visual and audio parameter groups split the
//! pairs as one quarter height, one quarter width, the rest time; text keys all
//! pairs on its flat token index (axis 0). Frequencies start at the classic
//! geometric ladder and are trained like any other parameter.

use ndarray::{Array1, Array2, Array3};

use crate::scalar::Scalar;

pub const ROPE_BASE: f64 = 10000.0;

/// Position axis (column of the position table) for each frequency pair.
pub fn pair_axes(split_spatial: bool, n_pairs: usize) -> Vec<usize> {
    if !split_spatial {
        return vec![0; n_pairs];
    }
    let p_h = n_pairs / 4;
    let p_w = n_pairs / 4;
    let p_t = n_pairs - p_h - p_w;
    let mut axes = vec![0; p_t];
    axes.extend(std::iter::repeat(1).take(p_h));
    axes.extend(std::iter::repeat(2).take(p_w));
    axes
}

/// Initial frequencies: within each axis the pairs follow `base^(-k/len)`.
pub fn geometric_freqs<S: Scalar>(axes: &[usize]) -> Array1<S> {
    let mut out = Array1::zeros(axes.len());
    for axis in 0..3 {
        let members: Vec<usize> = (0..axes.len()).filter(|&j| axes[j] == axis).collect();
        let len = members.len();
        for (k, &j) in members.iter().enumerate() {
            out[j] = S::from_f64(ROPE_BASE.powf(-(k as f64) / len as f64));
        }
    }
    out
}

/// Rotates `[n, heads, d_head]` by per-pair angles `positions[i, axes[j]] · freqs[j]`.
pub fn apply_rope<S: Scalar>(
    x: &Array3<S>,
    positions: &Array2<S>,
    freqs: &Array1<S>,
    axes: &[usize],
) -> Array3<S> {
    let (n, heads, d_head) = x.dim();
    debug_assert_eq!(d_head, 2 * freqs.len());
    let mut out = Array3::zeros((n, heads, d_head));
    for i in 0..n {
        for (j, &axis) in axes.iter().enumerate() {
            let theta = positions[[i, axis]] * freqs[j];
            let (c, s) = (theta.cos(), theta.sin());
            for h in 0..heads {
                let a = x[[i, h, 2 * j]];
                let b = x[[i, h, 2 * j + 1]];
                out[[i, h, 2 * j]] = a * c - b * s;
                out[[i, h, 2 * j + 1]] = a * s + b * c;
            }
        }
    }
    out
}

/// Backward of [`apply_rope`]: returns `dL/dx` and accumulates `dL/dfreqs`.
pub fn rope_backward<S: Scalar>(
    x: &Array3<S>,
    positions: &Array2<S>,
    freqs: &Array1<S>,
    axes: &[usize],
    dy: &Array3<S>,
    d_freqs: &mut Array1<S>,
) -> Array3<S> {
    let (n, heads, _) = x.dim();
    let mut dx = Array3::zeros(x.raw_dim());
    for i in 0..n {
        for (j, &axis) in axes.iter().enumerate() {
            let pos = positions[[i, axis]];
            let theta = pos * freqs[j];
            let (c, s) = (theta.cos(), theta.sin());
            let mut d_theta = S::zero();
            for h in 0..heads {
                let a = x[[i, h, 2 * j]];
                let b = x[[i, h, 2 * j + 1]];
                let g1 = dy[[i, h, 2 * j]];
                let g2 = dy[[i, h, 2 * j + 1]];
                dx[[i, h, 2 * j]] = g1 * c + g2 * s;
                dx[[i, h, 2 * j + 1]] = -g1 * s + g2 * c;
                d_theta = d_theta + g1 * (-a * s - b * c) + g2 * (a * c - b * s);
            }
            d_freqs[j] = d_freqs[j] + pos * d_theta;
        }
    }
    dx
}
