//! Joint transformer block over the four token streams.
//!
//! Streams travel in the fixed order reference, text, audio, video, but share
//! three parameter groups: visual (reference and video), text, audio. Each
//! group owns its projections, MLP, rotary frequencies, and a timestep
//! modulation head whose gate slices start at zero so a fresh block is the
//! identity map.

use ndarray::{concatenate, Array1, Array2, Array3, Axis};
use rand::Rng;

use crate::scalar::Scalar;

use super::attention::{attention_backward, attention_forward, AttnTape};
use super::nn::{rms_backward, rms_forward, silu, silu_prime, Linear};
use super::rope::{apply_rope, geometric_freqs, pair_axes, rope_backward};
use super::{MmditError, Modality, ModalityStream};

/// Parameter group a stream is routed to. Reference frames reuse the video
/// group so identity cues and denoised frames live in one weight space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamModality {
    Visual,
    Text,
    Audio,
}

impl Modality {
    pub fn params(self) -> ParamModality {
        match self {
            Modality::Ref | Modality::Video => ParamModality::Visual,
            Modality::Text => ParamModality::Text,
            Modality::Audio => ParamModality::Audio,
        }
    }
}

pub const STREAM_ORDER: [Modality; 4] = [
    Modality::Ref,
    Modality::Text,
    Modality::Audio,
    Modality::Video,
];

/// Seed value for the spatial-pair query and key biases at init. Scaled by
/// the pair count and the logit divisor, it puts the zero-offset kernel peak
/// a couple of nats above unrelated positions.
const POSITION_PRIOR_BIAS: f64 = 0.7;

fn stream_params(s: usize) -> ParamModality {
    STREAM_ORDER[s].params()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBlockParams<S> {
    pub q: Linear<S>,
    pub k: Linear<S>,
    pub v: Linear<S>,
    pub o: Linear<S>,
    pub mlp_in: Linear<S>,
    pub mlp_out: Linear<S>,
    /// `d_model -> 6·d_model`, slice order scale/bias/gate for attention then MLP.
    pub adaln: Linear<S>,
    pub rope_freqs: Array1<S>,
}

impl<S: Scalar> ModalityBlockParams<S> {
    fn init<R: Rng + ?Sized>(
        rng: &mut R,
        d_model: usize,
        d_ff: usize,
        n_pairs: usize,
        split_spatial: bool,
    ) -> Self {
        let mut adaln = Linear::init(rng, d_model, 6 * d_model);
        // zero the gate columns so residual branches start closed
        adaln
            .weight
            .slice_mut(ndarray::s![.., 2 * d_model..3 * d_model])
            .fill(S::zero());
        adaln
            .weight
            .slice_mut(ndarray::s![.., 5 * d_model..6 * d_model])
            .fill(S::zero());
        let axes = pair_axes(split_spatial, n_pairs);
        let mut q = Linear::init(rng, d_model, d_model);
        let mut k = Linear::init(rng, d_model, d_model);
        // matching constants on the spatial rotary pairs of both biases: the
        // rotation turns their product into a relative-position kernel that
        // peaks at zero spatial offset, so attention starts out favoring the
        // same patch across frames and across the reference stream
        let d_head = 2 * n_pairs;
        for c in 0..d_model {
            if axes[(c % d_head) / 2] != 0 {
                q.bias[c] = S::from_f64(POSITION_PRIOR_BIAS);
                k.bias[c] = S::from_f64(POSITION_PRIOR_BIAS);
            }
        }
        Self {
            q,
            k,
            v: Linear::init(rng, d_model, d_model),
            o: Linear::init(rng, d_model, d_model),
            mlp_in: Linear::init(rng, d_model, d_ff),
            mlp_out: Linear::init(rng, d_ff, d_model),
            adaln,
            rope_freqs: geometric_freqs(&axes),
        }
    }

    fn zeros(d_model: usize, d_ff: usize, n_pairs: usize) -> Self {
        Self {
            q: Linear::zeros(d_model, d_model),
            k: Linear::zeros(d_model, d_model),
            v: Linear::zeros(d_model, d_model),
            o: Linear::zeros(d_model, d_model),
            mlp_in: Linear::zeros(d_model, d_ff),
            mlp_out: Linear::zeros(d_ff, d_model),
            adaln: Linear::zeros(d_model, 6 * d_model),
            rope_freqs: Array1::zeros(n_pairs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S> {
    pub visual: ModalityBlockParams<S>,
    pub text: ModalityBlockParams<S>,
    pub audio: ModalityBlockParams<S>,
}

impl<S: Scalar> BlockParams<S> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_model: usize, d_ff: usize, n_heads: usize) -> Self {
        let n_pairs = d_model / n_heads / 2;
        Self {
            visual: ModalityBlockParams::init(rng, d_model, d_ff, n_pairs, true),
            text: ModalityBlockParams::init(rng, d_model, d_ff, n_pairs, false),
            audio: ModalityBlockParams::init(rng, d_model, d_ff, n_pairs, true),
        }
    }

    pub fn zeros(d_model: usize, d_ff: usize, n_heads: usize) -> Self {
        let n_pairs = d_model / n_heads / 2;
        Self {
            visual: ModalityBlockParams::zeros(d_model, d_ff, n_pairs),
            text: ModalityBlockParams::zeros(d_model, d_ff, n_pairs),
            audio: ModalityBlockParams::zeros(d_model, d_ff, n_pairs),
        }
    }

    pub fn by_params(&self, m: ParamModality) -> &ModalityBlockParams<S> {
        match m {
            ParamModality::Visual => &self.visual,
            ParamModality::Text => &self.text,
            ParamModality::Audio => &self.audio,
        }
    }

    pub fn by_params_mut(&mut self, m: ParamModality) -> &mut ModalityBlockParams<S> {
        match m {
            ParamModality::Visual => &mut self.visual,
            ParamModality::Text => &mut self.text,
            ParamModality::Audio => &mut self.audio,
        }
    }
}

/// Timestep-conditioned modulation vectors for one parameter group.
#[derive(Debug, Clone)]
pub struct Modulation<S> {
    pub scale_a: Array1<S>,
    pub bias_a: Array1<S>,
    pub gate_a: Array1<S>,
    pub scale_m: Array1<S>,
    pub bias_m: Array1<S>,
    pub gate_m: Array1<S>,
}

impl<S: Scalar> Modulation<S> {
    fn zeros(d: usize) -> Self {
        Self {
            scale_a: Array1::zeros(d),
            bias_a: Array1::zeros(d),
            gate_a: Array1::zeros(d),
            scale_m: Array1::zeros(d),
            bias_m: Array1::zeros(d),
            gate_m: Array1::zeros(d),
        }
    }

    fn from_flat(flat: &Array1<S>) -> Self {
        let d = flat.len() / 6;
        let part = |i: usize| flat.slice(ndarray::s![i * d..(i + 1) * d]).to_owned();
        Self {
            scale_a: part(0),
            bias_a: part(1),
            gate_a: part(2),
            scale_m: part(3),
            bias_m: part(4),
            gate_m: part(5),
        }
    }

    fn to_flat(&self) -> Array1<S> {
        let views = [
            self.scale_a.view(),
            self.bias_a.view(),
            self.gate_a.view(),
            self.scale_m.view(),
            self.bias_m.view(),
            self.gate_m.view(),
        ];
        concatenate(Axis(0), &views).expect("modulation slices share length")
    }
}

fn modulation_from_u<S: Scalar>(u: &Array1<S>, p: &ModalityBlockParams<S>) -> Modulation<S> {
    Modulation::from_flat(&p.adaln.forward1(u))
}

/// Modulation for `modality`'s parameter group at activation `silu(t_emb)`.
pub fn adaln_parameters<S: Scalar>(
    t_emb: &Array1<S>,
    block: &BlockParams<S>,
    modality: Modality,
) -> Modulation<S> {
    let u = t_emb.mapv(silu);
    modulation_from_u(&u, block.by_params(modality.params()))
}

fn split_heads<S: Scalar>(x: &Array2<S>, heads: usize) -> Array3<S> {
    let (n, d) = x.dim();
    let dh = d / heads;
    Array3::from_shape_fn((n, heads, dh), |(i, h, c)| x[[i, h * dh + c]])
}

fn merge_heads<S: Scalar>(x: &Array3<S>) -> Array2<S> {
    let (n, heads, dh) = x.dim();
    Array2::from_shape_fn((n, heads * dh), |(i, j)| x[[i, j / dh, j % dh]])
}

fn modulate<S: Scalar>(xhat: &Array2<S>, scale: &Array1<S>, bias: &Array1<S>) -> Array2<S> {
    let one_plus = scale.mapv(|v| v + S::one());
    xhat * &one_plus + bias
}

fn gate_rows<S: Scalar>(x: &Array2<S>, gate: &Array1<S>) -> Array2<S> {
    x * gate
}

fn rowsum_product<S: Scalar>(a: &Array2<S>, b: &Array2<S>) -> Array1<S> {
    (a * b).sum_axis(Axis(0))
}

pub(crate) struct StreamTape<S> {
    x_in: Array2<S>,
    xhat_a: Array2<S>,
    inv_r_a: Array1<S>,
    mod_a: Array2<S>,
    q3: Array3<S>,
    k3: Array3<S>,
    attn_flat: Array2<S>,
    attn_out: Array2<S>,
    x_mid: Array2<S>,
    xhat_m: Array2<S>,
    inv_r_m: Array1<S>,
    mod_m: Array2<S>,
    h_pre: Array2<S>,
    h_act: Array2<S>,
    mlp_o: Array2<S>,
}

pub(crate) struct BlockTape<S> {
    mods: [Modulation<S>; 3],
    streams: [StreamTape<S>; 4],
    qr_all: Array3<S>,
    kr_all: Array3<S>,
    v_all: Array3<S>,
    attn: AttnTape<S>,
}

/// How the attention half of the block is evaluated.
pub(crate) enum AttnMode<'a, S> {
    /// Compute attention from scratch.
    Full,
    /// Compute and clone the per-stream post-projection outputs into the slot.
    Record(&'a mut Option<[Array2<S>; 4]>),
    /// Skip attention entirely and reuse previously recorded outputs.
    Reuse(&'a [Array2<S>; 4]),
}

pub(crate) fn block_apply<S: Scalar>(
    params: &BlockParams<S>,
    xs: &[Array2<S>; 4],
    positions: &[&Array2<S>; 4],
    u: &Array1<S>,
    heads: usize,
    mode: AttnMode<'_, S>,
    keep_tape: bool,
) -> ([Array2<S>; 4], Option<BlockTape<S>>) {
    let mods = [
        modulation_from_u(u, &params.visual),
        modulation_from_u(u, &params.text),
        modulation_from_u(u, &params.audio),
    ];
    let n_pairs = params.visual.rope_freqs.len();
    let axes_by_pm = [
        pair_axes(true, n_pairs),
        pair_axes(false, n_pairs),
        pair_axes(true, n_pairs),
    ];

    let reuse = matches!(mode, AttnMode::Reuse(_));
    debug_assert!(!(keep_tape && reuse), "training never reuses attention");

    // Per-stream values captured before attention: xhat, inv_r, mod_a, q3, k3.
    type Pre<S> = (Array2<S>, Array1<S>, Array2<S>, Array3<S>, Array3<S>);
    let mut pre: Vec<Pre<S>> = Vec::with_capacity(4);
    let mut qr_parts: Vec<Array3<S>> = Vec::with_capacity(4);
    let mut kr_parts: Vec<Array3<S>> = Vec::with_capacity(4);
    let mut v_parts: Vec<Array3<S>> = Vec::with_capacity(4);

    if !reuse {
        for s in 0..4 {
            let pm = stream_params(s);
            let p = params.by_params(pm);
            let m = &mods[pm as usize];
            let (xhat, inv_r) = rms_forward(&xs[s]);
            let mod_a = modulate(&xhat, &m.scale_a, &m.bias_a);
            let q3 = split_heads(&p.q.forward(&mod_a), heads);
            let k3 = split_heads(&p.k.forward(&mod_a), heads);
            let v3 = split_heads(&p.v.forward(&mod_a), heads);
            let axes = &axes_by_pm[pm as usize];
            qr_parts.push(apply_rope(&q3, positions[s], &p.rope_freqs, axes));
            kr_parts.push(apply_rope(&k3, positions[s], &p.rope_freqs, axes));
            v_parts.push(v3);
            pre.push((xhat, inv_r, mod_a, q3, k3));
        }
    }

    let mut flats: Vec<Array2<S>> = Vec::new();
    let (attn_outs, attn_ctx) = match mode {
        AttnMode::Reuse(cached) => (cached.clone(), None),
        AttnMode::Full | AttnMode::Record(_) => {
            let qr_all = concatenate(
                Axis(0),
                &qr_parts.iter().map(|a| a.view()).collect::<Vec<_>>(),
            )
            .expect("head dims agree");
            let kr_all = concatenate(
                Axis(0),
                &kr_parts.iter().map(|a| a.view()).collect::<Vec<_>>(),
            )
            .expect("head dims agree");
            let v_all = concatenate(
                Axis(0),
                &v_parts.iter().map(|a| a.view()).collect::<Vec<_>>(),
            )
            .expect("head dims agree");
            let (attn_all, attn_tape) = attention_forward(&qr_all, &kr_all, &v_all, keep_tape);

            let mut outs: Vec<Array2<S>> = Vec::with_capacity(4);
            let mut offset = 0;
            for s in 0..4 {
                let n_s = xs[s].shape()[0];
                let slab = attn_all
                    .slice(ndarray::s![offset..offset + n_s, .., ..])
                    .to_owned();
                let flat = merge_heads(&slab);
                let p = params.by_params(stream_params(s));
                outs.push(p.o.forward(&flat));
                flats.push(flat);
                offset += n_s;
            }
            let outs: [Array2<S>; 4] = outs.try_into().expect("four streams");
            if let AttnMode::Record(slot) = mode {
                *slot = Some(outs.clone());
            }
            (
                outs,
                attn_tape.map(|tape| (qr_all, kr_all, v_all, tape)),
            )
        }
    };

    let mut xs_out: Vec<Array2<S>> = Vec::with_capacity(4);
    let mut stream_tapes: Vec<StreamTape<S>> = Vec::with_capacity(4);
    for s in 0..4 {
        let pm = stream_params(s);
        let p = params.by_params(pm);
        let m = &mods[pm as usize];
        let x_mid = &xs[s] + &gate_rows(&attn_outs[s], &m.gate_a);
        let (xhat_m, inv_r_m) = rms_forward(&x_mid);
        let mod_m = modulate(&xhat_m, &m.scale_m, &m.bias_m);
        let h_pre = p.mlp_in.forward(&mod_m);
        let h_act = h_pre.mapv(silu);
        let mlp_o = p.mlp_out.forward(&h_act);
        let x_out = &x_mid + &gate_rows(&mlp_o, &m.gate_m);
        if keep_tape {
            let (xhat_a, inv_r_a, mod_a, q3, k3) = pre[s].clone();
            stream_tapes.push(StreamTape {
                x_in: xs[s].clone(),
                xhat_a,
                inv_r_a,
                mod_a,
                q3,
                k3,
                attn_flat: flats[s].clone(),
                attn_out: attn_outs[s].clone(),
                x_mid,
                xhat_m,
                inv_r_m,
                mod_m,
                h_pre,
                h_act,
                mlp_o,
            });
        }
        xs_out.push(x_out);
    }

    let tape = if keep_tape {
        let (qr_all, kr_all, v_all, attn) = attn_ctx.expect("tape requires full attention");
        Some(BlockTape {
            mods,
            streams: stream_tapes.try_into().ok().expect("four streams"),
            qr_all,
            kr_all,
            v_all,
            attn,
        })
    } else {
        None
    };
    (xs_out.try_into().expect("four streams"), tape)
}

/// Backward through one block. Accumulates parameter gradients into `grads`
/// and returns per-stream input gradients plus the gradient wrt `u = silu(t_emb)`.
pub(crate) fn block_backward<S: Scalar>(
    params: &BlockParams<S>,
    tape: &BlockTape<S>,
    positions: &[&Array2<S>; 4],
    u: &Array1<S>,
    d_out: &[Array2<S>; 4],
    grads: &mut BlockParams<S>,
) -> ([Array2<S>; 4], Array1<S>) {
    let d_model = u.len();
    let heads = tape.qr_all.shape()[1];
    let n_pairs = params.visual.rope_freqs.len();
    let axes_by_pm = [
        pair_axes(true, n_pairs),
        pair_axes(false, n_pairs),
        pair_axes(true, n_pairs),
    ];

    let mut mod_grads = [
        Modulation::zeros(d_model),
        Modulation::zeros(d_model),
        Modulation::zeros(d_model),
    ];
    let mut d_x_in: Vec<Array2<S>> = Vec::with_capacity(4);
    let mut d_attn3: Vec<Array3<S>> = Vec::with_capacity(4);

    for s in 0..4 {
        let pm = stream_params(s);
        let p = params.by_params(pm);
        let g = params.by_params(pm); // parameter view for backward shapes
        let _ = g;
        let st = &tape.streams[s];
        let m = &tape.mods[pm as usize];
        let gp = grads.by_params_mut(pm);
        let dy = &d_out[s];

        // MLP residual branch
        let d_mlp_o = gate_rows(dy, &m.gate_m);
        mod_grads[pm as usize].gate_m =
            &mod_grads[pm as usize].gate_m + &rowsum_product(dy, &st.mlp_o);
        let d_h_act = p.mlp_out.backward(&st.h_act, &d_mlp_o, &mut gp.mlp_out);
        let d_h_pre = &d_h_act * &st.h_pre.mapv(silu_prime);
        let d_mod_m = p.mlp_in.backward(&st.mod_m, &d_h_pre, &mut gp.mlp_in);
        mod_grads[pm as usize].scale_m =
            &mod_grads[pm as usize].scale_m + &rowsum_product(&d_mod_m, &st.xhat_m);
        mod_grads[pm as usize].bias_m =
            &mod_grads[pm as usize].bias_m + &d_mod_m.sum_axis(Axis(0));
        let d_xhat_m = &d_mod_m * &m.scale_m.mapv(|v| v + S::one());
        let d_x_mid = dy + &rms_backward(&st.x_mid, &st.inv_r_m, &d_xhat_m);

        // attention residual branch
        let d_attn_out = gate_rows(&d_x_mid, &m.gate_a);
        mod_grads[pm as usize].gate_a =
            &mod_grads[pm as usize].gate_a + &rowsum_product(&d_x_mid, &st.attn_out);
        let d_attn_flat = p.o.backward(&st.attn_flat, &d_attn_out, &mut gp.o);
        d_attn3.push(split_heads(&d_attn_flat, heads));
        d_x_in.push(d_x_mid);
    }

    let d_attn_all = concatenate(
        Axis(0),
        &d_attn3.iter().map(|a| a.view()).collect::<Vec<_>>(),
    )
    .expect("head dims agree");
    let (dqr_all, dkr_all, dv_all) = attention_backward(
        &tape.qr_all,
        &tape.kr_all,
        &tape.v_all,
        &tape.attn,
        &d_attn_all,
    );

    let mut offset = 0;
    for s in 0..4 {
        let pm = stream_params(s);
        let p = params.by_params(pm);
        let st = &tape.streams[s];
        let m = &tape.mods[pm as usize];
        let gp = grads.by_params_mut(pm);
        let axes = &axes_by_pm[pm as usize];
        let n_s = st.x_in.shape()[0];
        let take =
            |a: &Array3<S>| a.slice(ndarray::s![offset..offset + n_s, .., ..]).to_owned();

        let d_q3 = rope_backward(
            &st.q3,
            positions[s],
            &p.rope_freqs,
            axes,
            &take(&dqr_all),
            &mut gp.rope_freqs,
        );
        let d_k3 = rope_backward(
            &st.k3,
            positions[s],
            &p.rope_freqs,
            axes,
            &take(&dkr_all),
            &mut gp.rope_freqs,
        );
        let d_v3 = take(&dv_all);

        let mut d_mod_a = p.q.backward(&st.mod_a, &merge_heads(&d_q3), &mut gp.q);
        d_mod_a = d_mod_a + p.k.backward(&st.mod_a, &merge_heads(&d_k3), &mut gp.k);
        d_mod_a = d_mod_a + p.v.backward(&st.mod_a, &merge_heads(&d_v3), &mut gp.v);

        mod_grads[pm as usize].scale_a =
            &mod_grads[pm as usize].scale_a + &rowsum_product(&d_mod_a, &st.xhat_a);
        mod_grads[pm as usize].bias_a =
            &mod_grads[pm as usize].bias_a + &d_mod_a.sum_axis(Axis(0));
        let d_xhat_a = &d_mod_a * &m.scale_a.mapv(|v| v + S::one());
        d_x_in[s] = &d_x_in[s] + &rms_backward(&st.x_in, &st.inv_r_a, &d_xhat_a);
        offset += n_s;
    }

    let mut d_u = Array1::zeros(d_model);
    for pm in [ParamModality::Visual, ParamModality::Text, ParamModality::Audio] {
        let g6 = mod_grads[pm as usize].to_flat();
        let p = params.by_params(pm);
        let gp = grads.by_params_mut(pm);
        d_u = d_u + p.adaln.backward1(u, &g6, &mut gp.adaln);
    }

    (d_x_in.try_into().expect("four streams"), d_u)
}

/// One block applied to the four streams in canonical order. Positions ride
/// along unchanged; only token contents are transformed.
pub fn joint_block_forward<S: Scalar>(
    streams: &[ModalityStream<S>],
    t_emb: &Array1<S>,
    block: &BlockParams<S>,
    n_heads: usize,
) -> Result<Vec<ModalityStream<S>>, MmditError> {
    if streams.len() != 4 {
        return Err(MmditError::StreamOrder);
    }
    for (s, stream) in streams.iter().enumerate() {
        if stream.modality != STREAM_ORDER[s] {
            return Err(MmditError::StreamOrder);
        }
    }
    let xs: [Array2<S>; 4] = std::array::from_fn(|s| streams[s].tokens.clone());
    let positions: [&Array2<S>; 4] = std::array::from_fn(|s| &streams[s].positions);
    let u = t_emb.mapv(silu);
    let (out, _) = block_apply(block, &xs, &positions, &u, n_heads, AttnMode::Full, false);
    Ok(out
        .into_iter()
        .zip(streams)
        .map(|(tokens, src)| ModalityStream {
            tokens,
            modality: src.modality,
            positions: src.positions.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;
    const HEADS: usize = 2;
    const FF: usize = 12;
    const LENS: [usize; 4] = [3, 4, 2, 5];

    fn fixture(seed: u64) -> (BlockParams<f64>, [Array2<f64>; 4], [Array2<f64>; 4], Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = BlockParams::init(&mut rng, D, FF, HEADS);
        let xs = std::array::from_fn(|s| {
            Array2::from_shape_fn((LENS[s], D), |_| rng.gen::<f64>() - 0.5)
        });
        let positions = std::array::from_fn(|s| {
            Array2::from_shape_fn((LENS[s], 3), |_| rng.gen_range(0..6) as f64)
        });
        let u = Array1::from_shape_fn(D, |_| rng.gen::<f64>() - 0.5);
        (params, xs, positions, u)
    }

    #[test]
    fn fresh_block_is_identity() {
        let (params, xs, positions, u) = fixture(21);
        let pos_refs: [&Array2<f64>; 4] = std::array::from_fn(|s| &positions[s]);
        let (out, _) = block_apply(&params, &xs, &pos_refs, &u, HEADS, AttnMode::Full, false);
        for s in 0..4 {
            assert_eq!(out[s], xs[s], "stream {s} changed at init");
        }
    }

    #[test]
    fn gate_columns_start_at_zero() {
        let (params, _, _, u) = fixture(22);
        let mods = modulation_from_u(&u, &params.visual);
        assert!(mods.gate_a.iter().all(|&v| v == 0.0));
        assert!(mods.gate_m.iter().all(|&v| v == 0.0));
        assert!(mods.scale_a.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn adaln_wrapper_matches_internal_path() {
        let (params, _, _, _) = fixture(23);
        let t_emb = Array1::from_shape_fn(D, |i| (i as f64) * 0.1 - 0.3);
        let via_wrapper = adaln_parameters(&t_emb, &params, Modality::Video);
        let via_internal = modulation_from_u(&t_emb.mapv(silu), &params.visual);
        assert_eq!(via_wrapper.scale_a, via_internal.scale_a);
        assert_eq!(via_wrapper.gate_m, via_internal.gate_m);
    }

    #[test]
    fn record_then_reuse_is_bitwise_when_inputs_repeat() {
        let (mut params, xs, positions, u) = fixture(24);
        scramble_gates(&mut params);
        let pos_refs: [&Array2<f64>; 4] = std::array::from_fn(|s| &positions[s]);
        let mut slot = None;
        let (full, _) = block_apply(
            &params,
            &xs,
            &pos_refs,
            &u,
            HEADS,
            AttnMode::Record(&mut slot),
            false,
        );
        let cached = slot.expect("recorded");
        let (reused, _) = block_apply(
            &params,
            &xs,
            &pos_refs,
            &u,
            HEADS,
            AttnMode::Reuse(&cached),
            false,
        );
        for s in 0..4 {
            assert_eq!(full[s], reused[s]);
        }
    }

    #[test]
    fn stream_order_is_enforced() {
        let (params, xs, positions, u) = fixture(25);
        let mut streams: Vec<ModalityStream<f64>> = (0..4)
            .map(|s| ModalityStream {
                tokens: xs[s].clone(),
                modality: STREAM_ORDER[s],
                positions: positions[s].clone(),
            })
            .collect();
        let t_emb = u.clone();
        assert!(joint_block_forward(&streams, &t_emb, &params, HEADS).is_ok());
        streams.swap(0, 3);
        assert!(matches!(
            joint_block_forward(&streams, &t_emb, &params, HEADS),
            Err(MmditError::StreamOrder)
        ));
    }

    fn scramble_gates(params: &mut BlockParams<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for pm in [ParamModality::Visual, ParamModality::Text, ParamModality::Audio] {
            let p = params.by_params_mut(pm);
            p.adaln.weight.mapv_inplace(|v| {
                if v == 0.0 {
                    (rng.gen::<f64>() - 0.5) * 0.4
                } else {
                    v
                }
            });
            p.adaln.bias.mapv_inplace(|_| (rng.gen::<f64>() - 0.5) * 0.2);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (mut params, xs, positions, u) = fixture(26);
        scramble_gates(&mut params);
        let pos_refs: [&Array2<f64>; 4] = std::array::from_fn(|s| &positions[s]);
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let weights: [Array2<f64>; 4] = std::array::from_fn(|s| {
            Array2::from_shape_fn((LENS[s], D), |_| rng.gen::<f64>() - 0.5)
        });

        let loss = |p: &BlockParams<f64>, xs: &[Array2<f64>; 4], u: &Array1<f64>| -> f64 {
            let (out, _) = block_apply(p, xs, &pos_refs, u, HEADS, AttnMode::Full, false);
            (0..4).map(|s| (&out[s] * &weights[s]).sum()).sum()
        };

        let (out, tape) = block_apply(&params, &xs, &pos_refs, &u, HEADS, AttnMode::Full, true);
        let _ = out;
        let tape = tape.unwrap();
        let mut grads = BlockParams::zeros(D, FF, HEADS);
        let (d_xs, d_u) =
            block_backward(&params, &tape, &pos_refs, &u, &weights, &mut grads);

        let h = 1e-6;
        let tol = 2e-5;
        let base = loss(&params, &xs, &u);

        for s in 0..4 {
            let idx = (s % LENS[s], s % D);
            let mut xp = xs.clone();
            xp[s][idx] += h;
            let fd = (loss(&params, &xp, &u) - base) / h;
            assert!(
                (fd - d_xs[s][idx]).abs() < tol,
                "d_x stream {s}: fd {fd} analytic {}",
                d_xs[s][idx]
            );
        }

        for i in 0..D {
            let mut up = u.clone();
            up[i] += h;
            let fd = (loss(&params, &xs, &up) - base) / h;
            assert!((fd - d_u[i]).abs() < tol, "d_u[{i}]: fd {fd} vs {}", d_u[i]);
        }

        // probe one entry in every parameter tensor of every group
        for pm in [ParamModality::Visual, ParamModality::Text, ParamModality::Audio] {
            for which in 0..8 {
                let mut pp = params.clone();
                let (got, idx_label): (f64, String) = {
                    let tweak = pp.by_params_mut(pm);
                    let gp = grads.by_params(pm);
                    match which {
                        0 => {
                            tweak.q.weight[[1, 2]] += h;
                            (gp.q.weight[[1, 2]], "q.w".into())
                        }
                        1 => {
                            tweak.k.bias[3] += h;
                            (gp.k.bias[3], "k.b".into())
                        }
                        2 => {
                            tweak.v.weight[[0, 5]] += h;
                            (gp.v.weight[[0, 5]], "v.w".into())
                        }
                        3 => {
                            tweak.o.weight[[4, 1]] += h;
                            (gp.o.weight[[4, 1]], "o.w".into())
                        }
                        4 => {
                            tweak.mlp_in.weight[[2, 7]] += h;
                            (gp.mlp_in.weight[[2, 7]], "mlp_in.w".into())
                        }
                        5 => {
                            tweak.mlp_out.weight[[9, 3]] += h;
                            (gp.mlp_out.weight[[9, 3]], "mlp_out.w".into())
                        }
                        6 => {
                            tweak.adaln.weight[[2, 2 * D + 1]] += h;
                            (gp.adaln.weight[[2, 2 * D + 1]], "adaln.gate_col".into())
                        }
                        _ => {
                            tweak.rope_freqs[0] += h;
                            (gp.rope_freqs[0], "rope".into())
                        }
                    }
                };
                let fd = (loss(&pp, &xs, &u) - base) / h;
                assert!(
                    (fd - got).abs() < tol,
                    "{pm:?} {idx_label}: fd {fd} analytic {got}"
                );
            }
        }
    }
}
