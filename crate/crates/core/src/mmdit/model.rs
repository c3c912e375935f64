//! Full velocity-field model: stream embedding, timestep conditioning, the
//! block stack, and the zero-initialized output head.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecSpec, PatchGrid};
use crate::cond::{ConditioningSet, AUDIO_FEATURE_DIM, REF_REPLICA_FRAMES, TEXT_CAP};
use crate::scalar::Scalar;

use super::block::{block_apply, block_backward, AttnMode, BlockParams, BlockTape};
use super::nn::{silu, silu_prime, Linear};
use super::MmditError;

/// Pixel extent of the clip a single forward pass denoises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub d_ff: usize,
    pub d_text: usize,
    pub t_freq_dim: usize,
    pub codec: CodecSpec,
    pub window: WindowSpec,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), MmditError> {
        if self.depth == 0 {
            return Err(MmditError::Config("depth must be at least 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(MmditError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return Err(MmditError::Config(format!(
                "head dim {} must be even for rotary pairs",
                self.d_model / self.n_heads
            )));
        }
        if self.t_freq_dim < 2 || !self.t_freq_dim.is_multiple_of(2) {
            return Err(MmditError::Config(format!(
                "t_freq_dim {} must be even and at least 2",
                self.t_freq_dim
            )));
        }
        if self.d_ff == 0 || self.d_text == 0 {
            return Err(MmditError::Config("d_ff and d_text must be positive".into()));
        }
        self.video_grid()?;
        self.ref_grid()?;
        Ok(())
    }

    pub fn video_grid(&self) -> Result<PatchGrid, MmditError> {
        let (c, t, h, w) = self
            .codec
            .video_latent_shape(self.window.frames, self.window.height, self.window.width)?;
        PatchGrid::new(c, t, h, w, self.codec.patch_size).map_err(MmditError::from)
    }

    pub fn ref_grid(&self) -> Result<PatchGrid, MmditError> {
        let (c, t, h, w) = self.codec.chunk_latent_shape(
            REF_REPLICA_FRAMES,
            self.window.height,
            self.window.width,
        )?;
        PatchGrid::new(c, t, h, w, self.codec.patch_size).map_err(MmditError::from)
    }

    pub fn token_dim(&self) -> usize {
        self.codec.token_dim()
    }

    pub fn audio_len(&self) -> usize {
        self.window.frames
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimestepEmbedder<S> {
    pub lin1: Linear<S>,
    pub lin2: Linear<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub cfg: ModelConfig,
    /// Shared by the reference and video streams.
    pub video_in: Linear<S>,
    pub text_in: Linear<S>,
    /// Learned audio projection, matrix only.
    pub audio_in: Array2<S>,
    pub t_embed: TimestepEmbedder<S>,
    /// Folds the mean text token into the timestep embedding.
    pub text_pool: Linear<S>,
    pub null_ref: Array1<S>,
    pub null_text: Array1<S>,
    pub null_audio: Array1<S>,
    pub blocks: Vec<BlockParams<S>>,
    /// Final-norm scale and bias, `d_model -> 2·d_model`, zero at init.
    pub head_mod: Linear<S>,
    /// Output projection, zero at init so a fresh model predicts zero velocity.
    pub head: Linear<S>,
}

/// Borrowed view of one parameter tensor, used for IO and the optimizer.
pub enum TensorRef<'a, S> {
    D1(&'a Array1<S>),
    D2(&'a Array2<S>),
}

pub enum TensorMut<'a, S> {
    D1(&'a mut Array1<S>),
    D2(&'a mut Array2<S>),
}

impl<'a, S: Scalar> TensorRef<'a, S> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::D1(a) => vec![a.len()],
            TensorRef::D2(a) => a.shape().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorRef::D1(a) => a.len(),
            TensorRef::D2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> S {
        match self {
            TensorRef::D1(a) => a.as_slice().expect("contiguous")[i],
            TensorRef::D2(a) => a.as_slice().expect("contiguous")[i],
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = &S> + '_> {
        match self {
            TensorRef::D1(a) => Box::new(a.iter()),
            TensorRef::D2(a) => Box::new(a.iter()),
        }
    }
}

impl<'a, S: Scalar> TensorMut<'a, S> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorMut::D1(a) => vec![a.len()],
            TensorMut::D2(a) => a.shape().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorMut::D1(a) => a.len(),
            TensorMut::D2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> S {
        match self {
            TensorMut::D1(a) => a.as_slice().expect("contiguous")[i],
            TensorMut::D2(a) => a.as_slice().expect("contiguous")[i],
        }
    }

    pub fn set(&mut self, i: usize, v: S) {
        match self {
            TensorMut::D1(a) => a.as_slice_mut().expect("contiguous")[i] = v,
            TensorMut::D2(a) => a.as_slice_mut().expect("contiguous")[i] = v,
        }
    }

    pub fn fill_from<I: Iterator<Item = S>>(&mut self, mut values: I) {
        let apply = |slice: &mut [S], values: &mut I| {
            for slot in slice.iter_mut() {
                *slot = values.next().expect("enough values");
            }
        };
        match self {
            TensorMut::D1(a) => apply(a.as_slice_mut().expect("contiguous"), &mut values),
            TensorMut::D2(a) => apply(a.as_slice_mut().expect("contiguous"), &mut values),
        }
    }
}

macro_rules! push_linear {
    ($out:ident, $prefix:expr, $lin:expr, $wrap:ident) => {{
        $out.push((format!("{}.weight", $prefix), $wrap::D2(&$lin.weight)));
        $out.push((format!("{}.bias", $prefix), $wrap::D1(&$lin.bias)));
    }};
}

macro_rules! push_linear_mut {
    ($out:ident, $prefix:expr, $lin:expr, $wrap:ident) => {{
        $out.push((format!("{}.weight", $prefix), $wrap::D2(&mut $lin.weight)));
        $out.push((format!("{}.bias", $prefix), $wrap::D1(&mut $lin.bias)));
    }};
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, MmditError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let d_tok = cfg.token_dim();
        let audio_scale = S::from_f64(1.0 / (AUDIO_FEATURE_DIM as f64).sqrt());
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams::init(&mut rng, d, cfg.d_ff, cfg.n_heads))
            .collect();
        Ok(Self {
            video_in: Linear::init(&mut rng, d_tok, d),
            text_in: Linear::init(&mut rng, cfg.d_text, d),
            audio_in: Array2::from_shape_fn((AUDIO_FEATURE_DIM, d), |_| {
                S::standard_normal(&mut rng) * audio_scale
            }),
            t_embed: TimestepEmbedder {
                lin1: Linear::init(&mut rng, cfg.t_freq_dim, d),
                lin2: Linear::init(&mut rng, d, d),
            },
            text_pool: Linear::init(&mut rng, d, d),
            null_ref: Array1::from_shape_fn(d, |_| S::standard_normal(&mut rng)),
            null_text: Array1::from_shape_fn(d, |_| S::standard_normal(&mut rng)),
            null_audio: Array1::from_shape_fn(d, |_| S::standard_normal(&mut rng)),
            blocks,
            head_mod: Linear::zeros(d, 2 * d),
            head: Linear::zeros(d, d_tok),
            cfg,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let cfg = self.cfg.clone();
        let d = cfg.d_model;
        Self {
            video_in: Linear::zeros(cfg.token_dim(), d),
            text_in: Linear::zeros(cfg.d_text, d),
            audio_in: Array2::zeros((AUDIO_FEATURE_DIM, d)),
            t_embed: TimestepEmbedder {
                lin1: Linear::zeros(cfg.t_freq_dim, d),
                lin2: Linear::zeros(d, d),
            },
            text_pool: Linear::zeros(d, d),
            null_ref: Array1::zeros(d),
            null_text: Array1::zeros(d),
            null_audio: Array1::zeros(d),
            blocks: (0..cfg.depth)
                .map(|_| BlockParams::zeros(d, cfg.d_ff, cfg.n_heads))
                .collect(),
            head_mod: Linear::zeros(d, 2 * d),
            head: Linear::zeros(d, cfg.token_dim()),
            cfg,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, TensorRef<'_, S>)> {
        let mut out: Vec<(String, TensorRef<'_, S>)> = Vec::new();
        push_linear!(out, "video_in", self.video_in, TensorRef);
        push_linear!(out, "text_in", self.text_in, TensorRef);
        out.push(("audio_in".into(), TensorRef::D2(&self.audio_in)));
        push_linear!(out, "t_embed.lin1", self.t_embed.lin1, TensorRef);
        push_linear!(out, "t_embed.lin2", self.t_embed.lin2, TensorRef);
        push_linear!(out, "text_pool", self.text_pool, TensorRef);
        out.push(("null.ref".into(), TensorRef::D1(&self.null_ref)));
        out.push(("null.text".into(), TensorRef::D1(&self.null_text)));
        out.push(("null.audio".into(), TensorRef::D1(&self.null_audio)));
        for (l, b) in self.blocks.iter().enumerate() {
            for (tag, g) in [("visual", &b.visual), ("text", &b.text), ("audio", &b.audio)] {
                let p = format!("blocks.{l}.{tag}");
                push_linear!(out, format!("{p}.q"), g.q, TensorRef);
                push_linear!(out, format!("{p}.k"), g.k, TensorRef);
                push_linear!(out, format!("{p}.v"), g.v, TensorRef);
                push_linear!(out, format!("{p}.o"), g.o, TensorRef);
                push_linear!(out, format!("{p}.mlp_in"), g.mlp_in, TensorRef);
                push_linear!(out, format!("{p}.mlp_out"), g.mlp_out, TensorRef);
                push_linear!(out, format!("{p}.adaln"), g.adaln, TensorRef);
                out.push((format!("{p}.rope_freqs"), TensorRef::D1(&g.rope_freqs)));
            }
        }
        push_linear!(out, "head_mod", self.head_mod, TensorRef);
        push_linear!(out, "head", self.head, TensorRef);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, TensorMut<'_, S>)> {
        let mut out: Vec<(String, TensorMut<'_, S>)> = Vec::new();
        push_linear_mut!(out, "video_in", self.video_in, TensorMut);
        push_linear_mut!(out, "text_in", self.text_in, TensorMut);
        out.push(("audio_in".into(), TensorMut::D2(&mut self.audio_in)));
        push_linear_mut!(out, "t_embed.lin1", self.t_embed.lin1, TensorMut);
        push_linear_mut!(out, "t_embed.lin2", self.t_embed.lin2, TensorMut);
        push_linear_mut!(out, "text_pool", self.text_pool, TensorMut);
        out.push(("null.ref".into(), TensorMut::D1(&mut self.null_ref)));
        out.push(("null.text".into(), TensorMut::D1(&mut self.null_text)));
        out.push(("null.audio".into(), TensorMut::D1(&mut self.null_audio)));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (tag, g) in [
                ("visual", &mut b.visual),
                ("text", &mut b.text),
                ("audio", &mut b.audio),
            ] {
                let p = format!("blocks.{l}.{tag}");
                push_linear_mut!(out, format!("{p}.q"), g.q, TensorMut);
                push_linear_mut!(out, format!("{p}.k"), g.k, TensorMut);
                push_linear_mut!(out, format!("{p}.v"), g.v, TensorMut);
                push_linear_mut!(out, format!("{p}.o"), g.o, TensorMut);
                push_linear_mut!(out, format!("{p}.mlp_in"), g.mlp_in, TensorMut);
                push_linear_mut!(out, format!("{p}.mlp_out"), g.mlp_out, TensorMut);
                push_linear_mut!(out, format!("{p}.adaln"), g.adaln, TensorMut);
                out.push((format!("{p}.rope_freqs"), TensorMut::D1(&mut g.rope_freqs)));
            }
        }
        push_linear_mut!(out, "head_mod", self.head_mod, TensorMut);
        push_linear_mut!(out, "head", self.head, TensorMut);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Adds seeded noise to every tensor. Opens the zero-initialized gates and
    /// head, which tests and synthetic benchmarks need.
    pub fn perturb(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = S::from_f64(scale);
        for (_, mut t) in self.named_tensors_mut() {
            let n = t.len();
            for i in 0..n {
                let v = t.get(i) + S::standard_normal(&mut rng) * s;
                t.set(i, v);
            }
        }
    }
}

/// Sinusoidal features of a scalar time in `[0, 1]`, frequencies spanning
/// three decades geometrically.
pub fn timestep_features<S: Scalar>(t: S, dim: usize) -> Array1<S> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let exp = if half > 1 {
            3.0 * k as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = S::from_f64(10f64.powf(exp));
        out[k] = (t * freq).sin();
        out[half + k] = (t * freq).cos();
    }
    out
}

struct EmbedOut<S> {
    xs: [Array2<S>; 4],
    positions: [Array2<S>; 4],
    ref_tokens: Option<Array2<S>>,
    audio_feats: Option<Array2<S>>,
    text_values: Option<Array2<S>>,
}

fn broadcast_null<S: Scalar>(v: &Array1<S>, rows: usize) -> Array2<S> {
    let mut out = Array2::zeros((rows, v.len()));
    for mut row in out.rows_mut() {
        row.assign(v);
    }
    out
}

fn index_positions<S: Scalar>(rows: usize) -> Array2<S> {
    let mut out = Array2::zeros((rows, 3));
    for i in 0..rows {
        out[[i, 0]] = S::from_f64(i as f64);
    }
    out
}

fn embed_streams<S: Scalar>(
    params: &ModelParams<S>,
    video_tokens: &Array2<S>,
    conds: &ConditioningSet<S>,
) -> Result<EmbedOut<S>, MmditError> {
    let cfg = &params.cfg;
    let video_grid = cfg.video_grid()?;
    let ref_grid = cfg.ref_grid()?;
    let d_tok = cfg.token_dim();

    if video_tokens.dim() != (video_grid.token_count(), d_tok) {
        return Err(MmditError::Shape {
            what: "video tokens",
            expected: format!("[{}, {}]", video_grid.token_count(), d_tok),
            got: format!("{:?}", video_tokens.shape()),
        });
    }

    // reference stream: patch tokens through the shared video projection
    let (ref_x, ref_tokens) = match &conds.ref_latent {
        Some(lat) => {
            let expected = (
                ref_grid.channels,
                ref_grid.frames,
                ref_grid.height,
                ref_grid.width,
            );
            if lat.dims() != expected {
                return Err(MmditError::Shape {
                    what: "reference latent",
                    expected: format!("{expected:?}"),
                    got: format!("{:?}", lat.dims()),
                });
            }
            let patches = crate::codec::patchify(lat, cfg.codec.patch_size)?;
            let x = params.video_in.forward(&patches.values);
            (x, Some(patches.values))
        }
        None => (
            broadcast_null(&params.null_ref, ref_grid.token_count()),
            None,
        ),
    };
    let mut ref_pos = ref_grid.positions::<S>();
    for i in 0..ref_pos.shape()[0] {
        ref_pos[[i, 0]] = conds.ref_time;
    }

    // text stream: only the valid rows join the sequence, so padding never
    // soaks up attention mass; a dropped caption leaves one null token
    let (text_x, text_values) = match &conds.text {
        Some(emb) => {
            if emb.values.dim() != (TEXT_CAP, cfg.d_text) {
                return Err(MmditError::Shape {
                    what: "text embedding",
                    expected: format!("[{}, {}]", TEXT_CAP, cfg.d_text),
                    got: format!("{:?}", emb.values.shape()),
                });
            }
            let used = emb
                .values
                .slice(ndarray::s![0..emb.valid_len.clamp(1, TEXT_CAP), ..])
                .to_owned();
            (params.text_in.forward(&used), Some(used))
        }
        None => (broadcast_null(&params.null_text, 1), None),
    };

    // audio stream: raw feature rows through the learned projection
    let (audio_x, audio_feats) = match &conds.audio {
        Some(feats) => {
            if feats.dim() != (cfg.audio_len(), AUDIO_FEATURE_DIM) {
                return Err(MmditError::Shape {
                    what: "audio features",
                    expected: format!("[{}, {}]", cfg.audio_len(), AUDIO_FEATURE_DIM),
                    got: format!("{:?}", feats.shape()),
                });
            }
            (feats.dot(&params.audio_in), Some(feats.clone()))
        }
        None => (
            broadcast_null(&params.null_audio, cfg.audio_len()),
            None,
        ),
    };

    let video_x = params.video_in.forward(video_tokens);

    let text_len = text_x.shape()[0];
    Ok(EmbedOut {
        xs: [ref_x, text_x, audio_x, video_x],
        positions: [
            ref_pos,
            index_positions::<S>(text_len),
            index_positions::<S>(cfg.audio_len()),
            video_grid.positions::<S>(),
        ],
        ref_tokens,
        audio_feats,
        text_values,
    })
}

struct TimeEmbedOut<S> {
    feats: Array1<S>,
    t1_pre: Array1<S>,
    t1_act: Array1<S>,
    pooled: Array1<S>,
    t_emb: Array1<S>,
    u: Array1<S>,
}

fn time_embed<S: Scalar>(params: &ModelParams<S>, t: S, text_x: &Array2<S>) -> TimeEmbedOut<S> {
    let feats = timestep_features(t, params.cfg.t_freq_dim);
    let t1_pre = params.t_embed.lin1.forward1(&feats);
    let t1_act = t1_pre.mapv(silu);
    let e_t = params.t_embed.lin2.forward1(&t1_act);
    let pooled = text_x.sum_axis(Axis(0)) * S::from_f64(1.0 / text_x.shape()[0] as f64);
    let t_emb = e_t + params.text_pool.forward1(&pooled);
    let u = t_emb.mapv(silu);
    TimeEmbedOut {
        feats,
        t1_pre,
        t1_act,
        pooled,
        t_emb,
        u,
    }
}

fn check_finite<S: Scalar>(xs: &[Array2<S>; 4], block: usize) -> Result<(), MmditError> {
    for x in xs {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MmditError::NonFinite { block });
        }
    }
    Ok(())
}

fn validate_time<S: Scalar>(t: S) -> Result<(), MmditError> {
    let tf = t.to_f64();
    if !(0.0..=1.0).contains(&tf) || !tf.is_finite() {
        return Err(MmditError::TimeRange(tf));
    }
    Ok(())
}

/// No normalization here: the head stays affine in the video stream, so
/// per-token magnitude survives to the velocity output.
fn head_forward<S: Scalar>(
    params: &ModelParams<S>,
    video: &Array2<S>,
    u: &Array1<S>,
) -> (Array2<S>, (Array1<S>, Array2<S>)) {
    let d = params.cfg.d_model;
    let flat = params.head_mod.forward1(u);
    let scale = flat.slice(ndarray::s![0..d]).to_owned();
    let bias = flat.slice(ndarray::s![d..2 * d]).to_owned();
    let one_plus = scale.mapv(|v| v + S::one());
    let modded = video * &one_plus + &bias;
    let out = params.head.forward(&modded);
    (out, (scale, modded))
}

/// Attention outputs cached per block and stream, recorded on full steps and
/// replayed on reuse steps.
#[derive(Debug, Clone)]
pub struct AttnCache<S> {
    pub blocks: Vec<Option<[Array2<S>; 4]>>,
}

impl<S> AttnCache<S> {
    pub fn empty(depth: usize) -> Self {
        Self {
            blocks: (0..depth).map(|_| None).collect(),
        }
    }
}

pub enum AttnCacheMode<'a, S> {
    Off,
    Record(&'a mut AttnCache<S>),
    Reuse(&'a AttnCache<S>),
}

impl<S> Default for AttnCacheMode<'_, S> {
    fn default() -> Self {
        AttnCacheMode::Off
    }
}

pub struct InferOptions<'a, S> {
    /// Blocks evaluated as the identity map.
    pub skip_blocks: &'a [usize],
    pub cache: AttnCacheMode<'a, S>,
}

impl<S> Default for InferOptions<'_, S> {
    fn default() -> Self {
        Self {
            skip_blocks: &[],
            cache: AttnCacheMode::Off,
        }
    }
}

/// Inference forward pass with optional block skipping and attention caching.
pub fn model_infer<S: Scalar>(
    params: &ModelParams<S>,
    video_tokens: &Array2<S>,
    conds: &ConditioningSet<S>,
    t: S,
    mut opts: InferOptions<'_, S>,
) -> Result<Array2<S>, MmditError> {
    validate_time(t)?;
    let depth = params.cfg.depth;
    for &idx in opts.skip_blocks {
        if idx >= depth {
            return Err(MmditError::SkipIndex { idx, depth });
        }
    }
    let cache_len = match &opts.cache {
        AttnCacheMode::Off => None,
        AttnCacheMode::Record(c) => Some(c.blocks.len()),
        AttnCacheMode::Reuse(c) => Some(c.blocks.len()),
    };
    if let Some(len) = cache_len {
        if len != depth {
            return Err(MmditError::Config(format!(
                "attention cache holds {len} blocks, model has {depth}"
            )));
        }
    }

    let embed = embed_streams(params, video_tokens, conds)?;
    let time = time_embed(params, t, &embed.xs[1]);
    let positions: [&Array2<S>; 4] = std::array::from_fn(|s| &embed.positions[s]);

    let mut xs = embed.xs;
    for l in 0..depth {
        if opts.skip_blocks.contains(&l) {
            continue;
        }
        let mode = match &mut opts.cache {
            AttnCacheMode::Off => AttnMode::Full,
            AttnCacheMode::Record(c) => AttnMode::Record(&mut c.blocks[l]),
            AttnCacheMode::Reuse(c) => match &c.blocks[l] {
                Some(entry) => AttnMode::Reuse(entry),
                None => AttnMode::Full,
            },
        };
        let (next, _) = block_apply(
            &params.blocks[l],
            &xs,
            &positions,
            &time.u,
            params.cfg.n_heads,
            mode,
            false,
        );
        xs = next;
        check_finite(&xs, l)?;
    }

    let (out, _) = head_forward(params, &xs[3], &time.u);
    Ok(out)
}

/// Plain forward pass: full depth, no caching.
pub fn model_forward<S: Scalar>(
    params: &ModelParams<S>,
    video_tokens: &Array2<S>,
    conds: &ConditioningSet<S>,
    t: S,
) -> Result<Array2<S>, MmditError> {
    model_infer(params, video_tokens, conds, t, InferOptions::default())
}

pub struct ModelTape<S> {
    video_tokens: Array2<S>,
    ref_tokens: Option<Array2<S>>,
    audio_feats: Option<Array2<S>>,
    text_values: Option<Array2<S>>,
    positions: [Array2<S>; 4],
    time: TimeEmbedOut<S>,
    block_tapes: Vec<BlockTape<S>>,
    final_video: Array2<S>,
    head_scale: Array1<S>,
    head_modded: Array2<S>,
}

impl<S: Scalar> ModelTape<S> {
    /// Video-stream activations entering the head.
    pub fn final_video(&self) -> &Array2<S> {
        &self.final_video
    }
}

/// Training forward pass that records everything backward needs.
pub fn model_forward_tape<S: Scalar>(
    params: &ModelParams<S>,
    video_tokens: &Array2<S>,
    conds: &ConditioningSet<S>,
    t: S,
) -> Result<(Array2<S>, ModelTape<S>), MmditError> {
    validate_time(t)?;
    let embed = embed_streams(params, video_tokens, conds)?;
    let time = time_embed(params, t, &embed.xs[1]);
    let positions_owned = embed.positions;
    let positions: [&Array2<S>; 4] = std::array::from_fn(|s| &positions_owned[s]);

    let mut xs = embed.xs;
    let mut block_tapes = Vec::with_capacity(params.cfg.depth);
    for l in 0..params.cfg.depth {
        let (next, tape) = block_apply(
            &params.blocks[l],
            &xs,
            &positions,
            &time.u,
            params.cfg.n_heads,
            AttnMode::Full,
            true,
        );
        xs = next;
        check_finite(&xs, l)?;
        block_tapes.push(tape.expect("tape requested"));
    }

    let final_video = xs[3].clone();
    let (out, (head_scale, head_modded)) = head_forward(params, &final_video, &time.u);

    Ok((
        out,
        ModelTape {
            video_tokens: video_tokens.clone(),
            ref_tokens: embed.ref_tokens,
            audio_feats: embed.audio_feats,
            text_values: embed.text_values,
            positions: positions_owned,
            time,
            block_tapes,
            final_video,
            head_scale,
            head_modded,
        },
    ))
}

/// Backward through the whole model. Accumulates into `grads` and returns the
/// gradient wrt the noisy video tokens.
pub fn model_backward<S: Scalar>(
    params: &ModelParams<S>,
    tape: &ModelTape<S>,
    d_out: &Array2<S>,
    grads: &mut ModelParams<S>,
) -> Array2<S> {
    let d = params.cfg.d_model;
    let positions: [&Array2<S>; 4] = std::array::from_fn(|s| &tape.positions[s]);

    // head
    let d_modded = params.head.backward(&tape.head_modded, d_out, &mut grads.head);
    let d_scale = (&d_modded * &tape.final_video).sum_axis(Axis(0));
    let d_bias = d_modded.sum_axis(Axis(0));
    let one_plus = tape.head_scale.mapv(|v| v + S::one());
    let d_final = &d_modded * &one_plus;
    let d_flat = ndarray::concatenate(Axis(0), &[d_scale.view(), d_bias.view()])
        .expect("halves share length");
    let mut d_u = params
        .head_mod
        .backward1(&tape.time.u, &d_flat, &mut grads.head_mod);

    // block stack in reverse
    let mut d_xs: [Array2<S>; 4] = std::array::from_fn(|s| {
        if s == 3 {
            d_final.clone()
        } else {
            Array2::zeros((tape.positions[s].shape()[0], d))
        }
    });
    for l in (0..params.cfg.depth).rev() {
        let (d_prev, du_l) = block_backward(
            &params.blocks[l],
            &tape.block_tapes[l],
            &positions,
            &tape.time.u,
            &d_xs,
            &mut grads.blocks[l],
        );
        d_xs = d_prev;
        d_u = d_u + du_l;
    }

    // u = silu(t_emb)
    let d_t_emb = &d_u * &tape.time.t_emb.mapv(silu_prime);

    // pooled-text branch of the timestep embedding
    let d_pooled = params
        .text_pool
        .backward1(&tape.time.pooled, &d_t_emb, &mut grads.text_pool);
    let inv_len = S::from_f64(1.0 / d_xs[1].shape()[0] as f64);
    for mut row in d_xs[1].rows_mut() {
        for (slot, &g) in row.iter_mut().zip(d_pooled.iter()) {
            *slot = *slot + g * inv_len;
        }
    }

    // timestep MLP
    let d_t1_act = params
        .t_embed
        .lin2
        .backward1(&tape.time.t1_act, &d_t_emb, &mut grads.t_embed.lin2);
    let d_t1_pre = &d_t1_act * &tape.time.t1_pre.mapv(silu_prime);
    let _d_feats = params
        .t_embed
        .lin1
        .backward1(&tape.time.feats, &d_t1_pre, &mut grads.t_embed.lin1);

    // stream embeddings
    match &tape.ref_tokens {
        Some(toks) => {
            params.video_in.backward(toks, &d_xs[0], &mut grads.video_in);
        }
        None => {
            grads.null_ref = &grads.null_ref + &d_xs[0].sum_axis(Axis(0));
        }
    }
    match &tape.text_values {
        Some(vals) => {
            params.text_in.backward(vals, &d_xs[1], &mut grads.text_in);
        }
        None => {
            grads.null_text = &grads.null_text + &d_xs[1].sum_axis(Axis(0));
        }
    }
    match &tape.audio_feats {
        Some(feats) => {
            grads.audio_in = &grads.audio_in + &feats.t().dot(&d_xs[2]);
        }
        None => {
            grads.null_audio = &grads.null_audio + &d_xs[2].sum_axis(Axis(0));
        }
    }
    params
        .video_in
        .backward(&tape.video_tokens, &d_xs[3], &mut grads.video_in)
}
