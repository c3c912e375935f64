//! Sequence parallelism over logical in-process workers.
//!
//! Attention over a long sequence is split by handing each worker a
//! contiguous token slice, resharding to full-sequence head slices with an
//! all-to-all exchange, attending locally, and resharding back. Workers talk
//! only through an explicit mailbox, so the layout contract is testable
//! without any real transport. All summations run in fixed ascending order;
//! the sharded path and the dense oracle share the same inner loops, which
//! makes their outputs identical in 64-bit arithmetic.

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum CpError {
    #[error("world size {world} must divide {what} {n}")]
    Divisibility {
        world: usize,
        what: &'static str,
        n: usize,
    },
    #[error("world size must be at least 1")]
    EmptyWorld,
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: [usize; 3],
        got: Vec<usize>,
    },
    #[error("expected {expected} shards, got {got}")]
    ShardCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShardSpec {
    pub world_size: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub d_head: usize,
}

impl ShardSpec {
    pub fn validate(&self) -> Result<(), CpError> {
        if self.world_size == 0 {
            return Err(CpError::EmptyWorld);
        }
        if !self.seq_len.is_multiple_of(self.world_size) {
            return Err(CpError::Divisibility {
                world: self.world_size,
                what: "sequence length",
                n: self.seq_len,
            });
        }
        if !self.n_heads.is_multiple_of(self.world_size) {
            return Err(CpError::Divisibility {
                world: self.world_size,
                what: "head count",
                n: self.n_heads,
            });
        }
        Ok(())
    }

    pub fn tokens_per_worker(&self) -> usize {
        self.seq_len / self.world_size
    }

    pub fn heads_per_worker(&self) -> usize {
        self.n_heads / self.world_size
    }
}

/// Which axis the per-worker tensors currently cover in full.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReshardDirection {
    /// Token slices in, full-sequence head slices out.
    SeqToHeads,
    /// Head slices in, token slices out.
    HeadsToSeq,
}

fn expect_shape<S: Scalar>(
    what: &'static str,
    t: &Array3<S>,
    expected: [usize; 3],
) -> Result<(), CpError> {
    if t.shape() != expected {
        return Err(CpError::Shape {
            what,
            expected,
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_shards<S: Scalar>(
    shards: &[Array3<S>],
    spec: &ShardSpec,
    direction: ReshardDirection,
    what: &'static str,
) -> Result<(), CpError> {
    if shards.len() != spec.world_size {
        return Err(CpError::ShardCount {
            expected: spec.world_size,
            got: shards.len(),
        });
    }
    let expected = match direction {
        ReshardDirection::SeqToHeads => {
            [spec.tokens_per_worker(), spec.n_heads, spec.d_head]
        }
        ReshardDirection::HeadsToSeq => [spec.seq_len, spec.heads_per_worker(), spec.d_head],
    };
    for shard in shards {
        expect_shape(what, shard, expected)?;
    }
    Ok(())
}

/// One exchange round. Every worker posts one block per peer into the
/// mailbox, then every worker assembles its g incoming blocks in rank order.
pub fn all_to_all_reshard<S: Scalar>(
    shards: &[Array3<S>],
    direction: ReshardDirection,
    spec: &ShardSpec,
) -> Result<Vec<Array3<S>>, CpError> {
    reshard_with_order(shards, direction, spec, None)
}

fn reshard_with_order<S: Scalar>(
    shards: &[Array3<S>],
    direction: ReshardDirection,
    spec: &ShardSpec,
    order: Option<&[usize]>,
) -> Result<Vec<Array3<S>>, CpError> {
    spec.validate()?;
    check_shards(shards, spec, direction, "reshard input")?;
    let g = spec.world_size;
    let sl = spec.tokens_per_worker();
    let hl = spec.heads_per_worker();

    let mut mailbox: Vec<Vec<Option<Array3<S>>>> = (0..g).map(|_| vec![None; g]).collect();

    let default_order: Vec<usize> = (0..g).collect();
    let send_order = order.unwrap_or(&default_order);
    for &src in send_order {
        for dst in 0..g {
            let block = match direction {
                // src owns tokens [src·sl, (src+1)·sl); ship dst's head range
                ReshardDirection::SeqToHeads => shards[src]
                    .slice(s![.., dst * hl..(dst + 1) * hl, ..])
                    .to_owned(),
                // src owns heads [src·hl, (src+1)·hl); ship dst's token range
                ReshardDirection::HeadsToSeq => shards[src]
                    .slice(s![dst * sl..(dst + 1) * sl, .., ..])
                    .to_owned(),
            };
            mailbox[dst][src] = Some(block);
        }
    }

    // the barrier: nothing is read until every block has landed
    let mut out = Vec::with_capacity(g);
    for dst in 0..g {
        let result = match direction {
            ReshardDirection::SeqToHeads => {
                let mut t = Array3::zeros((spec.seq_len, hl, spec.d_head));
                for src in 0..g {
                    let block = mailbox[dst][src].take().expect("mailbox slot filled");
                    t.slice_mut(s![src * sl..(src + 1) * sl, .., ..]).assign(&block);
                }
                t
            }
            ReshardDirection::HeadsToSeq => {
                let mut t = Array3::zeros((sl, spec.n_heads, spec.d_head));
                for src in 0..g {
                    let block = mailbox[dst][src].take().expect("mailbox slot filled");
                    t.slice_mut(s![.., src * hl..(src + 1) * hl, ..]).assign(&block);
                }
                t
            }
        };
        out.push(result);
    }
    Ok(out)
}

/// Scaled dot-product attention with every reduction written as an explicit
/// ascending-index loop. Both the sharded path and the dense oracle call
/// this, so results agree bit for bit whenever the per-head inputs agree.
pub fn attend_serial<S: Scalar>(q: &Array3<S>, k: &Array3<S>, v: &Array3<S>) -> Array3<S> {
    let (n, heads, dh) = q.dim();
    debug_assert_eq!(k.dim(), (n, heads, dh));
    debug_assert_eq!(v.dim(), (n, heads, dh));
    let alpha = S::one() / S::from_f64((dh as f64).sqrt());
    let mut out = Array3::zeros((n, heads, dh));
    let mut scores = vec![S::zero(); n];
    for hh in 0..heads {
        for i in 0..n {
            let mut row_max = S::neg_infinity();
            for (j, slot) in scores.iter_mut().enumerate() {
                let mut dot = S::zero();
                for c in 0..dh {
                    dot = dot + q[[i, hh, c]] * k[[j, hh, c]];
                }
                let sc = alpha * dot;
                *slot = sc;
                if sc > row_max {
                    row_max = sc;
                }
            }
            let mut denom = S::zero();
            for slot in scores.iter_mut() {
                *slot = (*slot - row_max).exp();
                denom = denom + *slot;
            }
            for c in 0..dh {
                let mut acc = S::zero();
                for (j, &p) in scores.iter().enumerate() {
                    acc = acc + p * v[[j, hh, c]];
                }
                out[[i, hh, c]] = acc / denom;
            }
        }
    }
    out
}

/// Attention over sequence-sharded q/k/v, returned in the same layout.
pub fn cp_attention<S: Scalar>(
    q: &[Array3<S>],
    k: &[Array3<S>],
    v: &[Array3<S>],
    spec: &ShardSpec,
) -> Result<Vec<Array3<S>>, CpError> {
    cp_attention_with_order(q, k, v, spec, None)
}

/// Same as [`cp_attention`] but drives workers in the given order; exposed so
/// tests can show the order is immaterial.
pub fn cp_attention_with_order<S: Scalar>(
    q: &[Array3<S>],
    k: &[Array3<S>],
    v: &[Array3<S>],
    spec: &ShardSpec,
    order: Option<&[usize]>,
) -> Result<Vec<Array3<S>>, CpError> {
    spec.validate()?;
    let g = spec.world_size;
    let qh = reshard_with_order(q, ReshardDirection::SeqToHeads, spec, order)?;
    let kh = reshard_with_order(k, ReshardDirection::SeqToHeads, spec, order)?;
    let vh = reshard_with_order(v, ReshardDirection::SeqToHeads, spec, order)?;

    let default_order: Vec<usize> = (0..g).collect();
    let work_order = order.unwrap_or(&default_order);
    let mut attended: Vec<Option<Array3<S>>> = (0..g).map(|_| None).collect();
    for &r in work_order {
        attended[r] = Some(attend_serial(&qh[r], &kh[r], &vh[r]));
    }
    let attended: Vec<Array3<S>> = attended
        .into_iter()
        .map(|t| t.expect("every worker attended"))
        .collect();
    reshard_with_order(&attended, ReshardDirection::HeadsToSeq, spec, order)
}

/// Splits a dense `[s, h, d_head]` tensor into per-worker token slices.
pub fn shard_by_seq<S: Scalar>(
    full: &Array3<S>,
    spec: &ShardSpec,
) -> Result<Vec<Array3<S>>, CpError> {
    spec.validate()?;
    expect_shape(
        "dense tensor",
        full,
        [spec.seq_len, spec.n_heads, spec.d_head],
    )?;
    let sl = spec.tokens_per_worker();
    Ok((0..spec.world_size)
        .map(|r| full.slice(s![r * sl..(r + 1) * sl, .., ..]).to_owned())
        .collect())
}

/// Reassembles token slices into the dense tensor.
pub fn gather_seq<S: Scalar>(
    shards: &[Array3<S>],
    spec: &ShardSpec,
) -> Result<Array3<S>, CpError> {
    spec.validate()?;
    check_shards(shards, spec, ReshardDirection::SeqToHeads, "gather input")?;
    let sl = spec.tokens_per_worker();
    let mut full = Array3::zeros((spec.seq_len, spec.n_heads, spec.d_head));
    for (r, shard) in shards.iter().enumerate() {
        full.slice_mut(s![r * sl..(r + 1) * sl, .., ..]).assign(shard);
    }
    Ok(full)
}

/// Per-worker cost model: resident q/k/v after the head reshard plus the
/// score matrix for the local heads. Both terms carry an exact 1/g factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpAccounting {
    pub world_size: usize,
    pub tokens_per_worker: usize,
    pub activation_elements_per_worker: usize,
    pub dense_activation_elements: usize,
}

pub fn accounting(spec: &ShardSpec) -> Result<CpAccounting, CpError> {
    spec.validate()?;
    let s = spec.seq_len;
    let h = spec.n_heads;
    let dh = spec.d_head;
    let g = spec.world_size;
    Ok(CpAccounting {
        world_size: g,
        tokens_per_worker: spec.tokens_per_worker(),
        activation_elements_per_worker: 3 * s * (h / g) * dh + s * s * (h / g),
        dense_activation_elements: 3 * s * h * dh + s * s * h,
    })
}

/// One row of the equivalence/memory table emitted by the CLI bench.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpBenchRow {
    pub world_size: usize,
    pub max_abs_err: f64,
    pub tokens_per_worker: usize,
    pub activation_elements_per_worker: usize,
}

/// Runs random-input equivalence checks against the dense oracle for each
/// group size and reports the observed error with the memory accounting.
pub fn bench_equivalence(
    seq_len: usize,
    n_heads: usize,
    d_head: usize,
    group_sizes: &[usize],
    seed: u64,
) -> Result<Vec<CpBenchRow>, CpError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = || Array3::from_shape_fn((seq_len, n_heads, d_head), |_| rng.gen::<f64>() - 0.5);
    let q = sample();
    let k = sample();
    let v = sample();
    let dense = attend_serial(&q, &k, &v);

    let mut rows = Vec::with_capacity(group_sizes.len());
    for &g in group_sizes {
        let spec = ShardSpec {
            world_size: g,
            seq_len,
            n_heads,
            d_head,
        };
        let out = cp_attention(
            &shard_by_seq(&q, &spec)?,
            &shard_by_seq(&k, &spec)?,
            &shard_by_seq(&v, &spec)?,
            &spec,
        )?;
        let gathered = gather_seq(&out, &spec)?;
        let max_abs_err = gathered
            .iter()
            .zip(dense.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let acct = accounting(&spec)?;
        rows.push(CpBenchRow {
            world_size: g,
            max_abs_err,
            tokens_per_worker: acct.tokens_per_worker,
            activation_elements_per_worker: acct.activation_elements_per_worker,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(g: usize) -> ShardSpec {
        ShardSpec {
            world_size: g,
            seq_len: 8,
            n_heads: 4,
            d_head: 6,
        }
    }

    fn random_dense(seed: u64, sp: &ShardSpec) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((sp.seq_len, sp.n_heads, sp.d_head), |_| {
            rng.gen::<f64>() * 2.0 - 1.0
        })
    }

    #[test]
    fn spec_rejects_bad_divisions() {
        assert!(matches!(
            ShardSpec { world_size: 0, seq_len: 8, n_heads: 4, d_head: 2 }.validate(),
            Err(CpError::EmptyWorld)
        ));
        assert!(matches!(
            ShardSpec { world_size: 3, seq_len: 8, n_heads: 6, d_head: 2 }.validate(),
            Err(CpError::Divisibility { what: "sequence length", .. })
        ));
        assert!(matches!(
            ShardSpec { world_size: 4, seq_len: 8, n_heads: 6, d_head: 2 }.validate(),
            Err(CpError::Divisibility { what: "head count", .. })
        ));
        assert!(spec(2).validate().is_ok());
    }

    #[test]
    fn single_worker_reshard_is_identity() {
        let sp = spec(1);
        let x = random_dense(1, &sp);
        let shards = shard_by_seq(&x, &sp).unwrap();
        let forth = all_to_all_reshard(&shards, ReshardDirection::SeqToHeads, &sp).unwrap();
        assert_eq!(forth[0], x);
        let back = all_to_all_reshard(&forth, ReshardDirection::HeadsToSeq, &sp).unwrap();
        assert_eq!(back[0], x);
    }

    #[test]
    fn reshard_roundtrip_is_bitwise_inverse() {
        for g in [1usize, 2, 4] {
            let sp = spec(g);
            let x = random_dense(2, &sp);
            let shards = shard_by_seq(&x, &sp).unwrap();
            let forth = all_to_all_reshard(&shards, ReshardDirection::SeqToHeads, &sp).unwrap();
            let back = all_to_all_reshard(&forth, ReshardDirection::HeadsToSeq, &sp).unwrap();
            assert_eq!(back, shards, "g={g}");
        }
    }

    #[test]
    fn reshard_preserves_the_scalar_multiset() {
        let sp = spec(4);
        let x = random_dense(3, &sp);
        let shards = shard_by_seq(&x, &sp).unwrap();
        let forth = all_to_all_reshard(&shards, ReshardDirection::SeqToHeads, &sp).unwrap();
        let mut before: Vec<u64> = shards
            .iter()
            .flat_map(|t| t.iter().map(|v| v.to_bits()))
            .collect();
        let mut after: Vec<u64> = forth
            .iter()
            .flat_map(|t| t.iter().map(|v| v.to_bits()))
            .collect();
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after);
    }

    #[test]
    fn head_shards_hold_the_full_sequence() {
        let sp = spec(2);
        let x = random_dense(4, &sp);
        let shards = shard_by_seq(&x, &sp).unwrap();
        let forth = all_to_all_reshard(&shards, ReshardDirection::SeqToHeads, &sp).unwrap();
        let hl = sp.heads_per_worker();
        for (r, shard) in forth.iter().enumerate() {
            let expect = x.slice(s![.., r * hl..(r + 1) * hl, ..]);
            assert_eq!(shard, &expect.to_owned(), "worker {r}");
        }
    }

    #[test]
    fn sharded_attention_matches_dense_bitwise() {
        for g in [1usize, 2, 4] {
            let sp = spec(g);
            let q = random_dense(10, &sp);
            let k = random_dense(11, &sp);
            let v = random_dense(12, &sp);
            let dense = attend_serial(&q, &k, &v);
            let out = cp_attention(
                &shard_by_seq(&q, &sp).unwrap(),
                &shard_by_seq(&k, &sp).unwrap(),
                &shard_by_seq(&v, &sp).unwrap(),
                &sp,
            )
            .unwrap();
            let gathered = gather_seq(&out, &sp).unwrap();
            assert_eq!(gathered, dense, "g={g}");
        }
    }

    #[test]
    fn worker_order_never_changes_the_answer() {
        let sp = spec(4);
        let q = random_dense(20, &sp);
        let k = random_dense(21, &sp);
        let v = random_dense(22, &sp);
        let qs = shard_by_seq(&q, &sp).unwrap();
        let ks = shard_by_seq(&k, &sp).unwrap();
        let vs = shard_by_seq(&v, &sp).unwrap();
        let base = cp_attention(&qs, &ks, &vs, &sp).unwrap();
        for order in [[3usize, 1, 0, 2], [2, 3, 0, 1], [1, 0, 3, 2]] {
            let permuted = cp_attention_with_order(&qs, &ks, &vs, &sp, Some(&order)).unwrap();
            assert_eq!(permuted, base, "order {order:?}");
        }
    }

    #[test]
    fn serial_attention_agrees_with_blas_path() {
        // same math as the model's attention kernel, different summation code
        let sp = spec(1);
        let q = random_dense(30, &sp);
        let k = random_dense(31, &sp);
        let v = random_dense(32, &sp);
        let serial = attend_serial(&q, &k, &v);
        let (fast, _) = crate::mmdit::attention::attention_forward(&q, &k, &v, false);
        let err = serial
            .iter()
            .zip(fast.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-12, "max abs err {err}");
    }

    #[test]
    fn accounting_scales_exactly_inversely_with_world_size() {
        let sp = ShardSpec {
            world_size: 8,
            seq_len: 72_000,
            n_heads: 16,
            d_head: 64,
        };
        let acct = accounting(&sp).unwrap();
        assert_eq!(acct.tokens_per_worker, 9_000);
        assert_eq!(
            acct.activation_elements_per_worker * sp.world_size,
            acct.dense_activation_elements
        );

        for g in [1usize, 2, 4] {
            let sp = spec(g);
            let acct = accounting(&sp).unwrap();
            assert_eq!(acct.tokens_per_worker, sp.seq_len / g);
            assert_eq!(
                acct.activation_elements_per_worker,
                (3 * sp.seq_len * sp.n_heads * sp.d_head + sp.seq_len * sp.seq_len * sp.n_heads)
                    / g
            );
        }
    }

    #[test]
    fn bench_rows_report_zero_error_in_f64() {
        let rows = bench_equivalence(8, 4, 6, &[1, 2, 4], 99).unwrap();
        assert_eq!(rows.len(), 3);
        for row in &rows {
            assert_eq!(row.max_abs_err, 0.0, "g={}", row.world_size);
        }
        assert_eq!(rows[2].tokens_per_worker, 2);
    }

    #[test]
    fn mismatched_shards_are_rejected() {
        let sp = spec(2);
        let x = random_dense(40, &sp);
        let shards = shard_by_seq(&x, &sp).unwrap();
        assert!(matches!(
            all_to_all_reshard(&shards[..1], ReshardDirection::SeqToHeads, &sp),
            Err(CpError::ShardCount { expected: 2, got: 1 })
        ));
        let wrong: Vec<Array3<f64>> = vec![Array3::zeros((3, 4, 6)), Array3::zeros((3, 4, 6))];
        assert!(matches!(
            all_to_all_reshard(&wrong, ReshardDirection::SeqToHeads, &sp),
            Err(CpError::Shape { .. })
        ));
    }
}
