//! Dense multi-head softmax attention over one joint sequence.

use ndarray::{Array2, Array3, Axis};

use crate::scalar::Scalar;

/// Per-head softmax probabilities saved for backward.
pub struct AttnTape<S> {
    pub probs: Vec<Array2<S>>,
}

fn softmax_rows_inplace<S: Scalar>(scores: &mut Array2<S>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// `q, k, v` are `[n, heads, d_head]`; output matches. `alpha = 1/sqrt(d_head)`.
pub fn attention_forward<S: Scalar>(
    q: &Array3<S>,
    k: &Array3<S>,
    v: &Array3<S>,
    keep_tape: bool,
) -> (Array3<S>, Option<AttnTape<S>>) {
    let (n, heads, d_head) = q.dim();
    let alpha = S::from_f64(1.0 / (d_head as f64).sqrt());
    let mut out = Array3::zeros((n, heads, d_head));
    let mut probs = Vec::new();
    for h in 0..heads {
        let qh = q.index_axis(Axis(1), h);
        let kh = k.index_axis(Axis(1), h);
        let vh = v.index_axis(Axis(1), h);
        let mut scores = qh.dot(&kh.t()) * alpha;
        softmax_rows_inplace(&mut scores);
        out.index_axis_mut(Axis(1), h).assign(&scores.dot(&vh));
        if keep_tape {
            probs.push(scores);
        }
    }
    (out, keep_tape.then_some(AttnTape { probs }))
}

/// Backward given saved probabilities and the rotated inputs.
pub fn attention_backward<S: Scalar>(
    q: &Array3<S>,
    k: &Array3<S>,
    v: &Array3<S>,
    tape: &AttnTape<S>,
    dy: &Array3<S>,
) -> (Array3<S>, Array3<S>, Array3<S>) {
    let (n, heads, d_head) = q.dim();
    let alpha = S::from_f64(1.0 / (d_head as f64).sqrt());
    let mut dq = Array3::zeros((n, heads, d_head));
    let mut dk = Array3::zeros((n, heads, d_head));
    let mut dv = Array3::zeros((n, heads, d_head));
    for h in 0..heads {
        let qh = q.index_axis(Axis(1), h);
        let kh = k.index_axis(Axis(1), h);
        let vh = v.index_axis(Axis(1), h);
        let gh = dy.index_axis(Axis(1), h);
        let p = &tape.probs[h];
        dv.index_axis_mut(Axis(1), h).assign(&p.t().dot(&gh));
        let dp = gh.dot(&vh.t());
        // softmax backward: ds = p ⊙ (dp − rowsum(dp ⊙ p))
        let rowsum = (&dp * p).sum_axis(Axis(1));
        let ds = p * &(&dp - &rowsum.insert_axis(Axis(1)));
        dq.index_axis_mut(Axis(1), h).assign(&(ds.dot(&kh) * alpha));
        dk.index_axis_mut(Axis(1), h)
            .assign(&(ds.t().dot(&qh) * alpha));
    }
    (dq, dk, dv)
}
