//! Space-to-depth latent codec with first-frame replication.
//!
//! Stands in for a learned video VAE: a chunk of `Tp ≡ 1 (mod ft)` pixel
//! frames becomes `1 + (Tp−1)/ft` latent frames, each latent cell packing its
//! `ft × fs × fs × Cp` pixel block into `C = Cp·ft·fs²` channels. The first
//! latent frame packs pixel frame 0 replicated `ft` times so decoding stays
//! causal. The rearrangement is linear and bitwise invertible.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Videos longer than this are encoded as consecutive chunks of this many
/// frames and concatenated on the latent time axis.
pub const CHUNK_FRAMES: usize = 25;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("chunk of {frames} frames must satisfy frames ≡ 1 (mod {ft})")]
    FrameDivisibility { frames: usize, ft: usize },
    #[error("{axis} extent {got} must be divisible by {divisor}")]
    Divisibility {
        axis: &'static str,
        got: usize,
        divisor: usize,
    },
    #[error("expected {what} {expected}, got {got}")]
    Extent {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("video of {frames} frames does not split into whole {chunk}-frame chunks")]
    ChunkCount { frames: usize, chunk: usize },
}

/// Downsampling factors of the rearrangement codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    /// Temporal packing factor `ft`.
    pub temporal_factor: usize,
    /// Spatial packing factor `fs` applied to both height and width.
    pub spatial_factor: usize,
    /// Patch edge `p` used when flattening latents to tokens.
    pub patch_size: usize,
    /// Pixel channels `Cp`.
    pub pixel_channels: usize,
}

impl Default for CodecSpec {
    /// Full-scale factors: 6× temporal, 8× spatial, 2×2 patches, RGB.
    fn default() -> Self {
        Self {
            temporal_factor: 6,
            spatial_factor: 8,
            patch_size: 2,
            pixel_channels: 3,
        }
    }
}

impl CodecSpec {
    /// Latent channel count `C = Cp · ft · fs²`.
    pub fn latent_channels(&self) -> usize {
        self.pixel_channels * self.temporal_factor * self.spatial_factor * self.spatial_factor
    }

    /// Token feature width after `p × p` patchification.
    pub fn token_dim(&self) -> usize {
        self.latent_channels() * self.patch_size * self.patch_size
    }

    /// Latent shape `(C, Tl, Hl, Wl)` for a single chunk, without materializing it.
    pub fn chunk_latent_shape(
        &self,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<(usize, usize, usize, usize), CodecError> {
        let tl = latent_frame_count(frames, self.temporal_factor)?;
        let fs = self.spatial_factor;
        for (axis, got) in [("height", height), ("width", width)] {
            if got == 0 || got % fs != 0 {
                return Err(CodecError::Divisibility {
                    axis,
                    got,
                    divisor: fs,
                });
            }
        }
        Ok((self.latent_channels(), tl, height / fs, width / fs))
    }

    /// Latent shape for a full video, split into `CHUNK_FRAMES` chunks when longer.
    pub fn video_latent_shape(
        &self,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<(usize, usize, usize, usize), CodecError> {
        if frames <= CHUNK_FRAMES {
            return self.chunk_latent_shape(frames, height, width);
        }
        if frames % CHUNK_FRAMES != 0 {
            return Err(CodecError::ChunkCount {
                frames,
                chunk: CHUNK_FRAMES,
            });
        }
        let (c, tl, hl, wl) = self.chunk_latent_shape(CHUNK_FRAMES, height, width)?;
        Ok((c, tl * (frames / CHUNK_FRAMES), hl, wl))
    }

    /// Token count for a full video after patchification.
    pub fn video_token_count(
        &self,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<usize, CodecError> {
        let (_, tl, hl, wl) = self.video_latent_shape(frames, height, width)?;
        let p = self.patch_size;
        for (axis, got) in [("latent height", hl), ("latent width", wl)] {
            if got % p != 0 {
                return Err(CodecError::Divisibility {
                    axis,
                    got,
                    divisor: p,
                });
            }
        }
        Ok(tl * (hl / p) * (wl / p))
    }
}

/// Number of latent frames produced by a chunk of `chunk_frames` pixel frames.
pub fn latent_frame_count(chunk_frames: usize, ft: usize) -> Result<usize, CodecError> {
    if chunk_frames == 0 || (chunk_frames - 1) % ft != 0 {
        return Err(CodecError::FrameDivisibility {
            frames: chunk_frames,
            ft,
        });
    }
    Ok(1 + (chunk_frames - 1) / ft)
}

/// Pixel frames, `[frames, height, width, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelChunk<S> {
    pub values: Array4<S>,
}

impl<S: Scalar> PixelChunk<S> {
    pub fn new(values: Array4<S>) -> Self {
        Self { values }
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    fn validate(&self, spec: &CodecSpec) -> Result<(), CodecError> {
        let &[t, h, w, c] = self.values.shape() else {
            unreachable!("Array4 always has 4 axes")
        };
        latent_frame_count(t, spec.temporal_factor)?;
        spec.chunk_latent_shape(t, h, w)?;
        if c != spec.pixel_channels {
            return Err(CodecError::Extent {
                what: "pixel channels",
                expected: spec.pixel_channels,
                got: c,
            });
        }
        Ok(())
    }
}

/// Latent frames, `[channels, frames, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo<S> {
    pub values: Array4<S>,
}

impl<S: Scalar> LatentVideo<S> {
    pub fn new(values: Array4<S>) -> Self {
        Self { values }
    }

    /// `(C, Tl, Hl, Wl)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2], s[3])
    }
}

// Packing order of one ft×fs×fs×Cp pixel block into the C latent channels.
// This codec's canonical order; decode relies on the same formula.
#[inline]
fn channel_index(spec: &CodecSpec, dt: usize, dh: usize, dw: usize, pc: usize) -> usize {
    let fs = spec.spatial_factor;
    ((dt * fs + dh) * fs + dw) * spec.pixel_channels + pc
}

/// Packs a pixel chunk into latent frames. Latent frame 0 holds pixel frame 0
/// replicated `ft` times; latent frame j ≥ 1 holds pixel frames
/// `1 + (j−1)·ft ..= j·ft`.
pub fn encode_chunk<S: Scalar>(
    chunk: &PixelChunk<S>,
    spec: &CodecSpec,
) -> Result<LatentVideo<S>, CodecError> {
    chunk.validate(spec)?;
    let &[tp, hp, wp, _] = chunk.values.shape() else {
        unreachable!()
    };
    let (c, tl, hl, wl) = spec.chunk_latent_shape(tp, hp, wp)?;
    let (ft, fs) = (spec.temporal_factor, spec.spatial_factor);

    let mut out = Array4::zeros((c, tl, hl, wl));
    for j in 0..tl {
        for dt in 0..ft {
            let src_frame = if j == 0 { 0 } else { 1 + (j - 1) * ft + dt };
            for y in 0..hl {
                for x in 0..wl {
                    for dh in 0..fs {
                        for dw in 0..fs {
                            for pc in 0..spec.pixel_channels {
                                let ch = channel_index(spec, dt, dh, dw, pc);
                                out[[ch, j, y, x]] =
                                    chunk.values[[src_frame, y * fs + dh, x * fs + dw, pc]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(LatentVideo::new(out))
}

/// Unpacks latent frames back to pixels. Total on any latent of consistent
/// shape; exact inverse of `encode_chunk` on its image (frame 0 comes from the
/// first packed slice, the replicas are ignored).
pub fn decode_latents<S: Scalar>(
    lat: &LatentVideo<S>,
    spec: &CodecSpec,
) -> Result<PixelChunk<S>, CodecError> {
    let (c, tl, hl, wl) = lat.dims();
    if c != spec.latent_channels() {
        return Err(CodecError::Extent {
            what: "latent channels",
            expected: spec.latent_channels(),
            got: c,
        });
    }
    let (ft, fs) = (spec.temporal_factor, spec.spatial_factor);
    let tp = 1 + (tl - 1) * ft;

    let mut out = Array4::zeros((tp, hl * fs, wl * fs, spec.pixel_channels));
    for j in 0..tl {
        let slices = if j == 0 { 1 } else { ft };
        for dt in 0..slices {
            let dst_frame = if j == 0 { 0 } else { 1 + (j - 1) * ft + dt };
            for y in 0..hl {
                for x in 0..wl {
                    for dh in 0..fs {
                        for dw in 0..fs {
                            for pc in 0..spec.pixel_channels {
                                let ch = channel_index(spec, dt, dh, dw, pc);
                                out[[dst_frame, y * fs + dh, x * fs + dw, pc]] =
                                    lat.values[[ch, j, y, x]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(PixelChunk::new(out))
}

/// Encodes a whole video, splitting into `CHUNK_FRAMES` chunks when longer
/// than one chunk and concatenating latents on the time axis.
pub fn encode_video<S: Scalar>(
    pixels: &PixelChunk<S>,
    spec: &CodecSpec,
) -> Result<LatentVideo<S>, CodecError> {
    let &[t, h, w, _] = pixels.values.shape() else {
        unreachable!()
    };
    if t <= CHUNK_FRAMES {
        return encode_chunk(pixels, spec);
    }
    let (c, tl, hl, wl) = spec.video_latent_shape(t, h, w)?;
    let mut out = Array4::zeros((c, tl, hl, wl));
    let per_chunk = tl / (t / CHUNK_FRAMES);
    for (idx, start) in (0..t).step_by(CHUNK_FRAMES).enumerate() {
        let chunk = PixelChunk::new(
            pixels
                .values
                .slice(ndarray::s![start..start + CHUNK_FRAMES, .., .., ..])
                .to_owned(),
        );
        let lat = encode_chunk(&chunk, spec)?;
        out.slice_mut(ndarray::s![
            ..,
            idx * per_chunk..(idx + 1) * per_chunk,
            ..,
            ..
        ])
        .assign(&lat.values);
    }
    Ok(LatentVideo::new(out))
}

/// Patch layout of a flattened latent: token order is time-major then
/// row-major spatial; features are channel-major within each `p × p` patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGrid {
    /// Validates that the patch size tiles the latent extent.
    pub fn new(
        channels: usize,
        frames: usize,
        height: usize,
        width: usize,
        patch: usize,
    ) -> Result<Self, CodecError> {
        for (axis, got) in [("latent height", height), ("latent width", width)] {
            if patch == 0 || got % patch != 0 {
                return Err(CodecError::Divisibility {
                    axis,
                    got,
                    divisor: patch.max(1),
                });
            }
        }
        Ok(Self {
            channels,
            frames,
            height,
            width,
            patch,
        })
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn token_count(&self) -> usize {
        self.frames * self.rows() * self.cols()
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// `(t, h, w)` coordinate triple per token, in latent-frame / patch units.
    pub fn positions<S: Scalar>(&self) -> Array2<S> {
        let mut pos = Array2::zeros((self.token_count(), 3));
        let mut n = 0;
        for t in 0..self.frames {
            for i in 0..self.rows() {
                for j in 0..self.cols() {
                    pos[[n, 0]] = S::from_f64(t as f64);
                    pos[[n, 1]] = S::from_f64(i as f64);
                    pos[[n, 2]] = S::from_f64(j as f64);
                    n += 1;
                }
            }
        }
        pos
    }
}

/// Latent flattened to tokens plus the grid needed to invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens<S> {
    pub values: Array2<S>,
    pub grid: PatchGrid,
}

/// Flattens a latent into `[N, C·p²]` tokens.
pub fn patchify<S: Scalar>(lat: &LatentVideo<S>, p: usize) -> Result<PatchTokens<S>, CodecError> {
    let (c, tl, hl, wl) = lat.dims();
    for (axis, got) in [("latent height", hl), ("latent width", wl)] {
        if p == 0 || got % p != 0 {
            return Err(CodecError::Divisibility {
                axis,
                got,
                divisor: p,
            });
        }
    }
    let grid = PatchGrid {
        channels: c,
        frames: tl,
        height: hl,
        width: wl,
        patch: p,
    };
    let mut out = Array2::zeros((grid.token_count(), grid.token_dim()));
    let mut n = 0;
    for t in 0..tl {
        for i in 0..grid.rows() {
            for j in 0..grid.cols() {
                for ch in 0..c {
                    for di in 0..p {
                        for dj in 0..p {
                            out[[n, (ch * p + di) * p + dj]] =
                                lat.values[[ch, t, i * p + di, j * p + dj]];
                        }
                    }
                }
                n += 1;
            }
        }
    }
    Ok(PatchTokens { values: out, grid })
}

/// Inverse of `patchify`.
pub fn unpatchify<S: Scalar>(
    tokens: &Array2<S>,
    grid: &PatchGrid,
) -> Result<LatentVideo<S>, CodecError> {
    let &[n, d] = tokens.shape() else {
        unreachable!()
    };
    if n != grid.token_count() {
        return Err(CodecError::Extent {
            what: "token count",
            expected: grid.token_count(),
            got: n,
        });
    }
    if d != grid.token_dim() {
        return Err(CodecError::Extent {
            what: "token dim",
            expected: grid.token_dim(),
            got: d,
        });
    }
    let p = grid.patch;
    let mut out = Array4::zeros((grid.channels, grid.frames, grid.height, grid.width));
    let mut idx = 0;
    for t in 0..grid.frames {
        for i in 0..grid.rows() {
            for j in 0..grid.cols() {
                for ch in 0..grid.channels {
                    for di in 0..p {
                        for dj in 0..p {
                            out[[ch, t, i * p + di, j * p + dj]] =
                                tokens[[idx, (ch * p + di) * p + dj]];
                        }
                    }
                }
                idx += 1;
            }
        }
    }
    Ok(LatentVideo::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_chunk(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, c: usize) -> PixelChunk<f64> {
        PixelChunk::new(Array4::from_shape_fn((t, h, w, c), |_| rng.gen::<f64>() - 0.5))
    }

    #[test]
    fn latent_frame_count_examples() {
        assert_eq!(latent_frame_count(25, 6).unwrap(), 5);
        assert_eq!(latent_frame_count(7, 6).unwrap(), 2);
        for ft in 1..9 {
            assert_eq!(latent_frame_count(1, ft).unwrap(), 1);
        }
        let err = latent_frame_count(24, 6).unwrap_err();
        assert_eq!(
            err,
            CodecError::FrameDivisibility { frames: 24, ft: 6 }
        );
        assert!(err.to_string().contains("24") && err.to_string().contains("6"));
    }

    #[test]
    fn full_scale_shape_arithmetic() {
        let spec = CodecSpec::default();
        assert_eq!(spec.latent_channels(), 1152);
        assert_eq!(
            spec.chunk_latent_shape(25, 1280, 720).unwrap(),
            (1152, 5, 160, 90)
        );
        assert_eq!(
            spec.video_latent_shape(100, 1280, 720).unwrap(),
            (1152, 20, 160, 90)
        );
        assert_eq!(spec.video_token_count(100, 1280, 720).unwrap(), 72000);
    }

    #[test]
    fn zero_chunk_encodes_to_zero() {
        let spec = CodecSpec::default();
        let chunk = PixelChunk::<f64>::new(Array4::zeros((7, 16, 16, 3)));
        let lat = encode_chunk(&chunk, &spec).unwrap();
        assert_eq!(lat.dims(), (1152, 2, 2, 2));
        assert!(lat.values.iter().all(|&v| v == 0.0));
        let pixels = decode_latents(&lat, &spec).unwrap();
        assert!(pixels.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(spec, t, h, w) in &[
            (CodecSpec::default(), 25, 16, 16),
            (CodecSpec::default(), 7, 24, 8),
            (
                CodecSpec {
                    temporal_factor: 2,
                    spatial_factor: 4,
                    patch_size: 2,
                    pixel_channels: 3,
                },
                5,
                16,
                16,
            ),
        ] {
            let chunk = random_chunk(&mut rng, t, h, w, spec.pixel_channels);
            let decoded = decode_latents(&encode_chunk(&chunk, &spec).unwrap(), &spec).unwrap();
            assert_eq!(decoded.values, chunk.values);
        }
    }

    #[test]
    fn encode_is_linear() {
        let spec = CodecSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_chunk(&mut rng, 7, 16, 16, 3);
        let b = random_chunk(&mut rng, 7, 16, 16, 3);
        let combo = PixelChunk::new(&a.values * 0.3 + &b.values * 1.7);
        let lhs = encode_chunk(&combo, &spec).unwrap();
        let rhs = &encode_chunk(&a, &spec).unwrap().values * 0.3
            + &encode_chunk(&b, &spec).unwrap().values * 1.7;
        let max = (&lhs.values - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12, "linearity deviation {max}");
    }

    #[test]
    fn decode_is_total_on_arbitrary_latents() {
        let spec = CodecSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lat = LatentVideo::new(Array4::from_shape_fn((1152, 3, 2, 2), |_| rng.gen::<f64>()));
        let pixels = decode_latents(&lat, &spec).unwrap();
        assert_eq!(pixels.values.shape(), &[13, 16, 16, 3]);
    }

    #[test]
    fn multi_chunk_video_concatenates_latents() {
        let spec = CodecSpec {
            temporal_factor: 2,
            spatial_factor: 2,
            patch_size: 2,
            pixel_channels: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let video = random_chunk(&mut rng, 50, 4, 4, 1);
        let lat = encode_video(&video, &spec).unwrap();
        // Two 25-frame chunks of 13 latent frames each.
        assert_eq!(lat.dims(), (8, 26, 2, 2));
        let first = PixelChunk::new(video.values.slice(ndarray::s![..25, .., .., ..]).to_owned());
        let lat_first = encode_chunk(&first, &spec).unwrap();
        assert_eq!(
            lat.values.slice(ndarray::s![.., ..13, .., ..]),
            lat_first.values
        );
    }

    #[test]
    fn patchify_token_arithmetic() {
        let grid = PatchGrid {
            channels: 1152,
            frames: 20,
            height: 160,
            width: 90,
            patch: 2,
        };
        assert_eq!(grid.token_count(), 72000);
        assert_eq!(grid.token_dim(), 4608);
    }

    #[test]
    fn patchify_roundtrip_and_positions() {
        let spec = CodecSpec {
            temporal_factor: 2,
            spatial_factor: 2,
            patch_size: 2,
            pixel_channels: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let chunk = random_chunk(&mut rng, 5, 8, 8, 3);
        let lat = encode_chunk(&chunk, &spec).unwrap();
        let tokens = patchify(&lat, spec.patch_size).unwrap();
        assert_eq!(tokens.values.shape(), &[3 * 2 * 2, 24 * 4]);
        let back = unpatchify(&tokens.values, &tokens.grid).unwrap();
        assert_eq!(back.values, lat.values);

        let pos = tokens.grid.positions::<f64>();
        assert_eq!(pos.row(0).to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(pos.row(1).to_vec(), vec![0.0, 0.0, 1.0]);
        assert_eq!(pos.row(4).to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_token_grid() {
        let spec = CodecSpec {
            temporal_factor: 2,
            spatial_factor: 1,
            patch_size: 2,
            pixel_channels: 1,
        };
        let chunk = PixelChunk::<f64>::new(Array4::zeros((1, 2, 2, 1)));
        let lat = encode_chunk(&chunk, &spec).unwrap();
        let tokens = patchify(&lat, 2).unwrap();
        assert_eq!(tokens.values.shape()[0], 1);
    }

    #[test]
    fn shape_errors_name_the_violation() {
        let spec = CodecSpec::default();
        let chunk = PixelChunk::<f64>::new(Array4::zeros((7, 15, 16, 3)));
        let err = encode_chunk(&chunk, &spec).unwrap_err();
        assert!(matches!(err, CodecError::Divisibility { axis: "height", .. }));
        let err = spec.video_latent_shape(60, 1280, 720).unwrap_err();
        assert!(matches!(err, CodecError::ChunkCount { frames: 60, .. }));
    }
}
