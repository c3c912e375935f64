//! Condition encoders: audio feature resampling/cropping, a deterministic
//! text-embedding stand-in, and reference-image encoding.
//!
//! Real speech and text encoders are out of scope; audio features arrive
//! precomputed at 1024 dims and text is embedded by a seeded hash table so the
//! downstream transformer sees stable dense streams.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{encode_chunk, CodecError, CodecSpec, LatentVideo, PixelChunk};
use crate::mmdit::{Modality, ModalityStream};
use crate::scalar::Scalar;

/// Feature width of the external speech encoder.
pub const AUDIO_FEATURE_DIM: usize = 1024;
/// Text embeddings are always padded or truncated to this many rows.
pub const TEXT_CAP: usize = 256;
/// Reference images are replicated to this many frames before encoding.
pub const REF_REPLICA_FRAMES: usize = 7;

#[derive(Debug, Error)]
pub enum CondError {
    #[error("need at least 2 feature rows to interpolate, got {rows}")]
    InsufficientFeatures { rows: usize },
    #[error("crop range [{start}, {end}) invalid for {rows} rows")]
    CropRange {
        start: usize,
        end: usize,
        rows: usize,
    },
    #[error("expected {what} {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("row count {rows} inconsistent with {rate} Hz over {duration} s")]
    RowCount { rows: usize, rate: f64, duration: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("target fps must be positive, got {0}")]
    BadRate(f64),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Precomputed speech-encoder output: `[n, 1024]` rows at `source_rate` Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures<S> {
    pub values: Array2<S>,
    pub source_rate: f64,
    pub duration: f64,
}

impl<S: Scalar> AudioFeatures<S> {
    pub fn new(values: Array2<S>, source_rate: f64, duration: f64) -> Result<Self, CondError> {
        let rows = values.shape()[0];
        if values.shape()[1] != AUDIO_FEATURE_DIM {
            return Err(CondError::Dim {
                what: "audio feature dim",
                expected: AUDIO_FEATURE_DIM,
                got: values.shape()[1],
            });
        }
        // Row count must be consistent with the advertised rate, ± one row.
        let expected = (source_rate * duration).round();
        if (rows as f64 - expected).abs() > 1.0 {
            return Err(CondError::RowCount {
                rows,
                rate: source_rate,
                duration,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CondError::NonFinite("audio features"));
        }
        Ok(Self {
            values,
            source_rate,
            duration,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Linear-in-time resampling onto a fixed frame grid: output row `i` carries
/// the source features at time `i / target_fps`, clamped at the ends.
pub fn resample_audio_features<S: Scalar>(
    feats: &AudioFeatures<S>,
    target_fps: f64,
    frame_count: usize,
) -> Result<Array2<S>, CondError> {
    let n = feats.rows();
    if n < 2 {
        return Err(CondError::InsufficientFeatures { rows: n });
    }
    if target_fps <= 0.0 {
        return Err(CondError::BadRate(target_fps));
    }
    let mut out = Array2::zeros((frame_count, AUDIO_FEATURE_DIM));
    for i in 0..frame_count {
        let u = (i as f64 / target_fps * feats.source_rate).clamp(0.0, (n - 1) as f64);
        let j0 = u.floor() as usize;
        let j1 = (j0 + 1).min(n - 1);
        let frac = S::from_f64(u - j0 as f64);
        let one = S::one();
        for d in 0..AUDIO_FEATURE_DIM {
            out[[i, d]] = (one - frac) * feats.values[[j0, d]] + frac * feats.values[[j1, d]];
        }
    }
    Ok(out)
}

/// Keeps rows `[start, end)` of a resampled feature array.
pub fn crop_audio_to_scene<S: Scalar>(
    feats: &Array2<S>,
    start: usize,
    end: usize,
) -> Result<Array2<S>, CondError> {
    let rows = feats.shape()[0];
    if start >= end || end > rows {
        return Err(CondError::CropRange { start, end, rows });
    }
    Ok(feats.slice(ndarray::s![start..end, ..]).to_owned())
}

/// Applies the learned `[1024, d_model]` projection and attaches temporal
/// positions `0..m−1` (height/width coordinates stay zero).
pub fn project_audio<S: Scalar>(
    feats: &Array2<S>,
    proj: &Array2<S>,
) -> Result<ModalityStream<S>, CondError> {
    if feats.shape()[1] != proj.shape()[0] {
        return Err(CondError::Dim {
            what: "projection input dim",
            expected: feats.shape()[1],
            got: proj.shape()[0],
        });
    }
    let tokens = feats.dot(proj);
    let m = tokens.shape()[0];
    let mut positions = Array2::zeros((m, 3));
    for i in 0..m {
        positions[[i, 0]] = S::from_f64(i as f64);
    }
    Ok(ModalityStream {
        tokens,
        modality: Modality::Audio,
        positions,
    })
}

/// Text stream for the transformer: exactly [`TEXT_CAP`] rows, the tail being
/// the all-zero pad vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding<S> {
    pub values: Array2<S>,
    pub valid_len: usize,
}

impl<S: Scalar> TextEmbedding<S> {
    pub fn d_text(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Stable 64-bit FNV-1a, used by the whitespace tokenizer.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The documented stub tokenizer: split on Unicode whitespace, hash each word.
pub fn tokenize_whitespace(text: &str) -> Vec<u64> {
    text.split_whitespace()
        .map(|w| fnv1a64(w.as_bytes()))
        .collect()
}

/// Deterministic per-id embedding rows: a seeded generator yields unit-variance
/// entries, so the same id always maps to the same vector.
pub fn embed_text_stub<S: Scalar>(token_ids: &[u64], d_text: usize) -> TextEmbedding<S> {
    let valid_len = token_ids.len().min(TEXT_CAP);
    let mut values = Array2::zeros((TEXT_CAP, d_text));
    for (row, &id) in token_ids.iter().take(valid_len).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(id);
        for d in 0..d_text {
            values[[row, d]] = S::standard_normal(&mut rng);
        }
    }
    TextEmbedding { values, valid_len }
}

/// Encodes a still image by replicating it to a [`REF_REPLICA_FRAMES`]-frame
/// chunk; at the default temporal factor this yields 2 latent frames.
pub fn encode_reference_image<S: Scalar>(
    img: &Array3<S>,
    spec: &CodecSpec,
) -> Result<LatentVideo<S>, CondError> {
    let &[h, w, c] = img.shape() else {
        unreachable!()
    };
    let mut frames = Array4::zeros((REF_REPLICA_FRAMES, h, w, c));
    for mut frame in frames.axis_iter_mut(Axis(0)) {
        frame.assign(img);
    }
    Ok(encode_chunk(&PixelChunk::new(frames), spec)?)
}

/// Signed offset of the reference frame from the training window start, in
/// latent-frame units. Attached as the time coordinate of every ref token.
pub fn reference_time_position<S: Scalar>(ref_frame: i64, window_start: i64, ft: usize) -> S {
    S::from_f64((ref_frame - window_start) as f64 / ft as f64)
}

/// The optional conditioning inputs of one sample. Absent entries are rendered
/// as learned null tokens by the model, so the sequence layout never changes.
///
/// `audio` holds resampled rows aligned to the pixel-frame window, before the
/// learned projection; keeping the projection inside the model lets the
/// training loss reach it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSet<S> {
    pub ref_latent: Option<LatentVideo<S>>,
    /// Time coordinate for ref tokens; meaningful when `ref_latent` is set.
    pub ref_time: S,
    pub audio: Option<Array2<S>>,
    pub text: Option<TextEmbedding<S>>,
}

impl<S: Scalar> ConditioningSet<S> {
    pub fn null() -> Self {
        Self {
            ref_latent: None,
            ref_time: S::zero(),
            audio: None,
            text: None,
        }
    }

    pub fn is_null(&self) -> bool {
        self.ref_latent.is_none() && self.audio.is_none() && self.text.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn features_from_rows(rows: Vec<Array1<f64>>, rate: f64) -> AudioFeatures<f64> {
        let n = rows.len();
        let mut values = Array2::zeros((n, AUDIO_FEATURE_DIM));
        for (i, r) in rows.into_iter().enumerate() {
            values.row_mut(i).assign(&r);
        }
        AudioFeatures::new(values, rate, n as f64 / rate).unwrap()
    }

    #[test]
    fn resample_constant_sequence_is_fixed_point() {
        let row = Array1::from_elem(AUDIO_FEATURE_DIM, 0.7);
        let feats = features_from_rows(vec![row.clone(); 5], 50.0);
        let out = resample_audio_features(&feats, 25.0, 8).unwrap();
        for i in 0..8 {
            assert_eq!(out.row(i), row.view());
        }
    }

    #[test]
    fn resample_midpoint_of_linear_ramp() {
        let zero = Array1::from_elem(AUDIO_FEATURE_DIM, 0.0);
        let one = Array1::from_elem(AUDIO_FEATURE_DIM, 1.0);
        // Two rows at 1 Hz sit at times 0 s and 1 s; 2 fps queries 0 s and 0.5 s.
        let feats = features_from_rows(vec![zero, one], 1.0);
        let out = resample_audio_features(&feats, 2.0, 2).unwrap();
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[1, 0]], 0.5);
    }

    #[test]
    fn resample_counts_match_rate_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = Array2::from_shape_fn((200, AUDIO_FEATURE_DIM), |_| rng.gen::<f64>());
        let feats = AudioFeatures::new(values, 50.0, 4.0).unwrap();
        let out = resample_audio_features(&feats, 25.0, 100).unwrap();
        assert_eq!(out.shape(), &[100, AUDIO_FEATURE_DIM]);
    }

    #[test]
    fn resample_reproduces_affine_sequences() {
        // Rows affine in time survive linear interpolation exactly.
        let n = 40;
        let rate = 50.0;
        let rows: Vec<_> = (0..n)
            .map(|j| {
                let t = j as f64 / rate;
                Array1::from_shape_fn(AUDIO_FEATURE_DIM, |d| 0.3 * (d as f64 + 1.0) * t - 0.1)
            })
            .collect();
        let feats = features_from_rows(rows, rate);
        let out = resample_audio_features(&feats, 25.0, 15).unwrap();
        for i in 0..15 {
            let t = i as f64 / 25.0;
            for d in (0..AUDIO_FEATURE_DIM).step_by(97) {
                let want = 0.3 * (d as f64 + 1.0) * t - 0.1;
                assert!((out[[i, d]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resample_rejects_single_row() {
        let values = Array2::<f64>::zeros((1, AUDIO_FEATURE_DIM));
        let feats = AudioFeatures::new(values, 1.0, 1.0).unwrap();
        assert!(matches!(
            resample_audio_features(&feats, 25.0, 4),
            Err(CondError::InsufficientFeatures { rows: 1 })
        ));
    }

    #[test]
    fn feature_row_count_validated() {
        let values = Array2::<f64>::zeros((10, AUDIO_FEATURE_DIM));
        assert!(AudioFeatures::new(values, 50.0, 4.0).is_err());
    }

    #[test]
    fn crop_identity_single_row_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = Array2::from_shape_fn((12, AUDIO_FEATURE_DIM), |_| rng.gen::<f64>());
        assert_eq!(crop_audio_to_scene(&feats, 0, 12).unwrap(), feats);
        let single = crop_audio_to_scene(&feats, 7, 8).unwrap();
        assert_eq!(single.row(0), feats.row(7));
        let once = crop_audio_to_scene(&feats, 2, 10).unwrap();
        let twice = crop_audio_to_scene(&once, 3, 6).unwrap();
        assert_eq!(twice, crop_audio_to_scene(&feats, 5, 8).unwrap());
        assert!(crop_audio_to_scene(&feats, 5, 13).is_err());
        assert!(crop_audio_to_scene(&feats, 5, 5).is_err());
    }

    #[test]
    fn project_audio_identity_zero_and_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = Array2::from_shape_fn((3, AUDIO_FEATURE_DIM), |_| rng.gen::<f64>());
        let eye = Array2::from_shape_fn((AUDIO_FEATURE_DIM, AUDIO_FEATURE_DIM), |(i, j)| {
            if i == j {
                1.0
            } else {
                0.0
            }
        });
        let stream = project_audio(&feats, &eye).unwrap();
        assert_eq!(stream.tokens, feats);
        assert_eq!(stream.modality, Modality::Audio);
        assert_eq!(stream.positions[[2, 0]], 2.0);
        assert_eq!(stream.positions[[2, 1]], 0.0);

        let zero = Array2::<f64>::zeros((AUDIO_FEATURE_DIM, 8));
        let stream = project_audio(&feats, &zero).unwrap();
        assert!(stream.tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn project_audio_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = Array2::from_shape_fn((3, AUDIO_FEATURE_DIM), |_| rng.gen::<f64>() - 0.5);
        let mut proj = Array2::from_shape_fn((AUDIO_FEATURE_DIM, 8), |_| rng.gen::<f64>() - 0.5);
        let weights = Array2::from_shape_fn((3, 8), |_| rng.gen::<f64>() - 0.5);

        // loss = Σ weights ⊙ (feats · proj)  ⇒  d/dproj = featsᵀ · weights
        let analytic = feats.t().dot(&weights);
        let h = 1e-3;
        for _ in 0..24 {
            let i = rng.gen_range(0..AUDIO_FEATURE_DIM);
            let j = rng.gen_range(0..8);
            let orig = proj[[i, j]];
            proj[[i, j]] = orig + h;
            let up = (&feats.dot(&proj) * &weights).sum();
            proj[[i, j]] = orig - h;
            let down = (&feats.dot(&proj) * &weights).sum();
            proj[[i, j]] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic[[i, j]].abs()).max(1e-8);
            assert!(
                ((fd - analytic[[i, j]]) / denom).abs() < 1e-4,
                "entry ({i},{j}): fd {fd} vs analytic {}",
                analytic[[i, j]]
            );
        }
    }

    #[test]
    fn text_stub_caps_pads_and_repeats() {
        let ids: Vec<u64> = (0..300).collect();
        let emb = embed_text_stub::<f64>(&ids, 16);
        assert_eq!(emb.values.shape(), &[TEXT_CAP, 16]);
        assert_eq!(emb.valid_len, TEXT_CAP);

        let empty = embed_text_stub::<f64>(&[], 16);
        assert_eq!(empty.valid_len, 0);
        assert!(empty.values.iter().all(|&v| v == 0.0));

        let again = embed_text_stub::<f64>(&ids, 16);
        assert_eq!(emb.values, again.values);

        let short = embed_text_stub::<f64>(&ids[..3], 16);
        assert_eq!(short.valid_len, 3);
        assert_eq!(short.values.row(2), emb.values.row(2));
        assert!(short.values.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tokenizer_is_stable() {
        let a = tokenize_whitespace("a quick  brown\nfox");
        assert_eq!(a.len(), 4);
        assert_eq!(a, tokenize_whitespace("a quick brown fox"));
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn reference_image_replication() {
        let spec = CodecSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = Array3::from_shape_fn((16, 16, 3), |_| rng.gen::<f64>());
        let lat = encode_reference_image(&img, &spec).unwrap();
        assert_eq!(lat.dims(), (1152, 2, 2, 2));

        let decoded = crate::codec::decode_latents(&lat, &spec).unwrap();
        for f in 0..decoded.frames() {
            assert_eq!(decoded.values.index_axis(ndarray::Axis(0), f), img.view());
        }

        let zero = Array3::<f64>::zeros((16, 16, 3));
        let lat = encode_reference_image(&zero, &spec).unwrap();
        assert!(lat.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reference_time_position_examples() {
        assert_eq!(reference_time_position::<f64>(120, 120, 6), 0.0);
        assert_eq!(reference_time_position::<f64>(60, 120, 6), -10.0);
        assert_eq!(reference_time_position::<f64>(9, 0, 2), 4.5);
    }
}
