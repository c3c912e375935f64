//! Procedural stand-in for real footage: each scene is a smooth random
//! spatial pattern whose brightness is modulated over time by a driver
//! signal, with audio features generated from the same driver (or an
//! independent one, per the coupling knob). Conditioning on the audio is
//! therefore genuinely informative about the pixels.

use std::f64::consts::TAU;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use mirage_core::codec::{encode_video, patchify, LatentVideo, PixelChunk};
use mirage_core::cond::{
    crop_audio_to_scene, embed_text_stub, encode_reference_image, reference_time_position,
    resample_audio_features, tokenize_whitespace, AudioFeatures, ConditioningSet, TextEmbedding,
    AUDIO_FEATURE_DIM,
};
use mirage_curation::{assemble_caption, CaptionGateway, TemplateCaptioner};

use crate::config::{DataConfig, RunConfig};
use crate::CliError;

/// Independent deterministic stream per (seed, index) pair; scene `i` does
/// not depend on how many scenes are requested.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut z = seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub id: String,
    /// `[frames, height, width, 3]` pixel values.
    pub pixels: PixelChunk<f64>,
    pub audio: AudioFeatures<f64>,
    pub caption: String,
    pub coupling: f64,
    /// Driver behind the audio features, one value per pixel frame.
    pub audio_driver: Vec<f64>,
    /// Driver behind the pixel modulation.
    pub pixel_driver: Vec<f64>,
}

/// Mildly smoothed gaussian walk with near-unit stationary variance.
fn driver_walk(rng: &mut ChaCha8Rng, frames: usize) -> Vec<f64> {
    let alpha = 0.6_f64;
    let gain = (1.0 - alpha * alpha).sqrt();
    let mut out = Vec::with_capacity(frames);
    let mut state = 0.0;
    for _ in 0..frames {
        let n: f64 = rng.sample(StandardNormal);
        state = alpha * state + gain * n;
        out.push(state);
    }
    out
}

/// Sum of a few random low-frequency waves over the frame.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, amplitude: f64) -> Array3<f64> {
    let mut field = Array3::zeros((h, w, 3));
    for c in 0..3 {
        for _ in 0..3 {
            let fy: f64 = rng.gen_range(0.5..2.0);
            let fx: f64 = rng.gen_range(0.5..2.0);
            let phase: f64 = rng.gen_range(0.0..TAU);
            let a = amplitude * rng.gen_range(0.3..1.0);
            for y in 0..h {
                for x in 0..w {
                    let arg = TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase;
                    field[[y, x, c]] += a * arg.sin();
                }
            }
        }
    }
    field
}

/// Linear interpolation of a per-frame signal at fractional frame `u`.
fn interp_frames(signal: &[f64], u: f64) -> f64 {
    let u = u.clamp(0.0, (signal.len() - 1) as f64);
    let j0 = u.floor() as usize;
    let j1 = (j0 + 1).min(signal.len() - 1);
    let frac = u - j0 as f64;
    (1.0 - frac) * signal[j0] + frac * signal[j1]
}

fn build_scene(
    idx: usize,
    seed: u64,
    coupling: f64,
    frames: usize,
    height: usize,
    width: usize,
    fps: f64,
    audio_rate: f64,
) -> Result<SyntheticScene, CliError> {
    let mut rng = derive_rng(seed, idx as u64);
    let id = format!("scene-{idx:03}");

    let audio_driver = driver_walk(&mut rng, frames);
    let free_driver = driver_walk(&mut rng, frames);
    // coupling 1 must reproduce the audio driver bit for bit
    let pixel_driver: Vec<f64> = if coupling == 1.0 {
        audio_driver.clone()
    } else {
        audio_driver
            .iter()
            .zip(&free_driver)
            .map(|(a, f)| coupling * a + (1.0 - coupling) * f)
            .collect()
    };

    // scene content sits well above the unit-variance sampling noise, so
    // conditioning carries most of the information a short run must recover
    let base = smooth_field(&mut rng, height, width, 6.0);
    let modulation = smooth_field(&mut rng, height, width, 4.2);
    let mut pixels = Array4::zeros((frames, height, width, 3));
    for t in 0..frames {
        let d = pixel_driver[t];
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels[[t, y, x, c]] = base[[y, x, c]] + d * modulation[[y, x, c]];
                }
            }
        }
    }

    let duration = frames as f64 / fps;
    let rows = (audio_rate * duration).round().max(2.0) as usize;
    let w0: Vec<f64> = (0..AUDIO_FEATURE_DIM).map(|_| 0.6 * rng.sample::<f64, _>(StandardNormal)).collect();
    let w1: Vec<f64> = (0..AUDIO_FEATURE_DIM).map(|_| 0.6 * rng.sample::<f64, _>(StandardNormal)).collect();
    let w2: Vec<f64> = (0..AUDIO_FEATURE_DIM).map(|_| 0.6 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut feats = Array2::zeros((rows, AUDIO_FEATURE_DIM));
    for j in 0..rows {
        let a = interp_frames(&audio_driver, j as f64 / audio_rate * fps);
        for d in 0..AUDIO_FEATURE_DIM {
            feats[[j, d]] = w0[d] + w1[d] * a + w2[d] * a * a;
        }
    }
    let audio = AudioFeatures::new(feats, audio_rate, duration)?;

    let caption = assemble_caption(&TemplateCaptioner.describe(&id)?)?;

    Ok(SyntheticScene {
        id,
        pixels: PixelChunk::new(pixels),
        audio,
        caption,
        coupling,
        audio_driver,
        pixel_driver,
    })
}

pub fn make_synthetic_dataset(
    n: usize,
    seed: u64,
    coupling: f64,
    frames: usize,
    height: usize,
    width: usize,
    fps: f64,
    audio_rate: f64,
) -> Result<Vec<SyntheticScene>, CliError> {
    if n == 0 {
        return Err(CliError::Config("scene count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&coupling) || !coupling.is_finite() {
        return Err(CliError::Config(format!("coupling {coupling} outside [0, 1]")));
    }
    (0..n)
        .map(|i| build_scene(i, seed, coupling, frames, height, width, fps, audio_rate))
        .collect()
}

pub fn dataset_from_config(cfg: &RunConfig, seed: u64) -> Result<Vec<SyntheticScene>, CliError> {
    make_synthetic_dataset(
        cfg.data.scenes,
        seed,
        cfg.data.coupling,
        cfg.data.scene_frames,
        cfg.model.window.height,
        cfg.model.window.width,
        cfg.data.fps,
        cfg.data.audio_rate,
    )
}

/// A scene with everything the trainer needs precomputed: target tokens for
/// the leading window, audio rows over that window, the caption embedding,
/// and a reference latent per admissible reference frame.
pub struct SceneBundle {
    pub scene: SyntheticScene,
    pub x1: Array2<f64>,
    pub audio_window: Array2<f64>,
    pub text: TextEmbedding<f64>,
    /// `(source frame, encoded latent)`, frames beyond the training window.
    pub ref_latents: Vec<(usize, LatentVideo<f64>)>,
}

impl SceneBundle {
    /// Full conditioning with the given entry of `ref_latents`.
    pub fn conds_with_ref(&self, ref_idx: usize, ft: usize) -> ConditioningSet<f64> {
        let (frame, latent) = &self.ref_latents[ref_idx];
        ConditioningSet {
            ref_latent: Some(latent.clone()),
            ref_time: reference_time_position(*frame as i64, 0, ft),
            audio: Some(self.audio_window.clone()),
            text: Some(self.text.clone()),
        }
    }

    /// Audio and text only; the form used at sampling time.
    pub fn conds_no_ref(&self) -> ConditioningSet<f64> {
        ConditioningSet {
            ref_latent: None,
            ref_time: 0.0,
            audio: Some(self.audio_window.clone()),
            text: Some(self.text.clone()),
        }
    }
}

pub fn prepare_scenes(cfg: &RunConfig, seed: u64) -> Result<Vec<SceneBundle>, CliError> {
    let wf = cfg.model.window.frames;
    dataset_from_config(cfg, seed)?
        .into_iter()
        .map(|scene| {
            let window = scene
                .pixels
                .values
                .slice(ndarray::s![..wf, .., .., ..])
                .to_owned();
            let latent = encode_video(&PixelChunk::new(window), &cfg.model.codec)?;
            let x1 = patchify(&latent, cfg.model.codec.patch_size)?.values;

            let per_frame =
                resample_audio_features(&scene.audio, cfg.data.fps, cfg.data.scene_frames)?;
            let audio_window = crop_audio_to_scene(&per_frame, 0, wf)?;

            let ids = tokenize_whitespace(&scene.caption);
            let text = embed_text_stub(&ids, cfg.model.d_text);

            let ref_latents = (wf..cfg.data.scene_frames)
                .map(|frame| {
                    let img = scene.pixels.values.index_axis(Axis(0), frame).to_owned();
                    Ok((frame, encode_reference_image(&img, &cfg.model.codec)?))
                })
                .collect::<Result<Vec<_>, CliError>>()?;

            Ok(SceneBundle {
                scene,
                x1,
                audio_window,
                text,
                ref_latents,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetIndex {
    format: String,
    version: u32,
    scenes: usize,
    seed: u64,
    coupling: f64,
    fps: f64,
    audio_rate: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneMeta {
    id: String,
    caption: String,
    coupling: f64,
    audio_rate: f64,
    duration: f64,
    audio_driver: Vec<f64>,
    pixel_driver: Vec<f64>,
}

const DATASET_FORMAT: &str = "mirage-dataset";

pub fn save_dataset(
    dir: &Path,
    scenes: &[SyntheticScene],
    seed: u64,
    cfg: &DataConfig,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    for (i, scene) in scenes.iter().enumerate() {
        let stem = dir.join(format!("scene-{i:03}-pixels"));
        mirage_core::io::save_array4(&stem, "pixels", &scene.pixels.values)?;
        let stem = dir.join(format!("scene-{i:03}-audio"));
        mirage_core::io::save_array2(&stem, "audio-features", &scene.audio.values)?;
        let meta = SceneMeta {
            id: scene.id.clone(),
            caption: scene.caption.clone(),
            coupling: scene.coupling,
            audio_rate: scene.audio.source_rate,
            duration: scene.audio.duration,
            audio_driver: scene.audio_driver.clone(),
            pixel_driver: scene.pixel_driver.clone(),
        };
        let path = dir.join(format!("scene-{i:03}-meta.json"));
        std::fs::write(path, serde_json::to_string_pretty(&meta)?)?;
    }
    let index = DatasetIndex {
        format: DATASET_FORMAT.into(),
        version: 1,
        scenes: scenes.len(),
        seed,
        coupling: cfg.coupling,
        fps: cfg.fps,
        audio_rate: cfg.audio_rate,
    };
    std::fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SyntheticScene>, CliError> {
    let index: DatasetIndex =
        serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
    if index.format != DATASET_FORMAT || index.version != 1 {
        return Err(CliError::Config(format!(
            "{} is not a dataset directory",
            dir.display()
        )));
    }
    (0..index.scenes)
        .map(|i| {
            let pixels =
                mirage_core::io::load_array4(&dir.join(format!("scene-{i:03}-pixels")), "pixels")?;
            let audio = mirage_core::io::load_array2(
                &dir.join(format!("scene-{i:03}-audio")),
                "audio-features",
            )?;
            let meta: SceneMeta = serde_json::from_str(&std::fs::read_to_string(
                dir.join(format!("scene-{i:03}-meta.json")),
            )?)?;
            Ok(SyntheticScene {
                id: meta.id,
                pixels: PixelChunk::new(pixels),
                audio: AudioFeatures::new(audio, meta.audio_rate, meta.duration)?,
                caption: meta.caption,
                coupling: meta.coupling,
                audio_driver: meta.audio_driver,
                pixel_driver: meta.pixel_driver,
            })
        })
        .collect()
}

/// Sample correlation coefficient; NaN-free for nonconstant inputs.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Frame as an `[h, w, 3]` view for reference-image use.
pub fn frame_view(pixels: &PixelChunk<f64>, t: usize) -> ArrayView3<'_, f64> {
    pixels.values.index_axis(Axis(0), t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(n: usize, seed: u64, coupling: f64) -> Vec<SyntheticScene> {
        make_synthetic_dataset(n, seed, coupling, 15, 16, 16, 25.0, 50.0).unwrap()
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = quick(3, 5, 0.7);
        let b = quick(3, 5, 0.7);
        assert_eq!(a, b);
        let c = quick(3, 6, 0.7);
        assert_ne!(a, c);
    }

    #[test]
    fn scene_i_does_not_depend_on_scene_count() {
        let few = quick(2, 11, 0.5);
        let many = quick(5, 11, 0.5);
        assert_eq!(few[0], many[0]);
        assert_eq!(few[1], many[1]);
    }

    #[test]
    fn full_coupling_copies_the_driver_exactly() {
        for scene in quick(3, 2, 1.0) {
            assert_eq!(scene.audio_driver, scene.pixel_driver);
        }
    }

    #[test]
    fn zero_coupling_decorrelates_the_drivers() {
        let scenes = make_synthetic_dataset(1, 4, 0.0, 1000, 8, 8, 25.0, 50.0).unwrap();
        let r = pearson(&scenes[0].audio_driver, &scenes[0].pixel_driver);
        assert!(r.abs() < 0.1, "|r| = {}", r.abs());
    }

    #[test]
    fn invalid_requests_are_rejected() {
        assert!(make_synthetic_dataset(0, 1, 0.5, 15, 16, 16, 25.0, 50.0).is_err());
        assert!(make_synthetic_dataset(1, 1, 1.5, 15, 16, 16, 25.0, 50.0).is_err());
        assert!(make_synthetic_dataset(1, 1, -0.1, 15, 16, 16, 25.0, 50.0).is_err());
    }

    #[test]
    fn pixels_move_with_the_driver() {
        let scenes = quick(1, 9, 1.0);
        let s = &scenes[0];
        // pixel difference between frames is proportional to driver delta
        let d01 = s.pixel_driver[1] - s.pixel_driver[0];
        let d12 = s.pixel_driver[2] - s.pixel_driver[1];
        let p01 = &s.pixels.values.index_axis(Axis(0), 1).to_owned()
            - &s.pixels.values.index_axis(Axis(0), 0);
        let p12 = &s.pixels.values.index_axis(Axis(0), 2).to_owned()
            - &s.pixels.values.index_axis(Axis(0), 1);
        let ratio = p12[[3, 3, 0]] / p01[[3, 3, 0]];
        assert!((ratio - d12 / d01).abs() < 1e-9);
    }

    #[test]
    fn bundles_have_model_shaped_pieces() {
        let cfg = RunConfig::default();
        let bundles = prepare_scenes(&cfg, 0).unwrap();
        assert_eq!(bundles.len(), 4);
        let grid = cfg.model.video_grid().unwrap();
        for b in &bundles {
            assert_eq!(b.x1.shape(), [grid.token_count(), grid.token_dim()]);
            assert_eq!(b.audio_window.shape(), [5, AUDIO_FEATURE_DIM]);
            assert_eq!(b.ref_latents.len(), 10);
            let conds = b.conds_with_ref(0, cfg.model.codec.temporal_factor);
            // first admissible frame is 5, window starts at 0, ft = 2
            assert_eq!(conds.ref_time, 2.5);
            assert!(conds.ref_latent.is_some());
        }
    }

    #[test]
    fn dataset_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig::default();
        let scenes = quick(2, 3, 1.0);
        save_dataset(dir.path(), &scenes, 3, &cfg).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(scenes, back);
    }
}
