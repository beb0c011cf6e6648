//! Procedural contents, parameterized distortions and the programmatic
//! opinion score
//! `100·exp(−(w_b·σ_blur² + w_n·σ_noise² + w_c·(1 − contrast)² + w_k·block))`.

use std::sync::Arc;

use qfm_tensor::rng::{stream, StreamRng};
use qfm_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ImageSource, Manifest, ManifestMeta, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MosWeights {
    pub blur: f64,
    pub noise: f64,
    pub contrast: f64,
    pub block: f64,
}

impl Default for MosWeights {
    /// Each knob at its maximum costs the same 2.25 nats.
    fn default() -> Self {
        Self {
            blur: 0.25,
            noise: 25.0,
            contrast: 6.25,
            block: 2.25,
        }
    }
}

/// Distortion knobs; a zero-strength setting leaves the image unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    /// Gaussian blur σ in pixels, `[0, 3]`.
    pub blur_sigma: f64,
    /// Additive Gaussian noise σ, `[0, 0.3]`.
    pub noise_sigma: f64,
    /// Contrast factor around the mean, `[0.4, 1]`.
    pub contrast: f64,
    /// Blend weight toward 4×4 block means, `[0, 1]`.
    pub block: f64,
}

impl Default for Distortion {
    fn default() -> Self {
        Self {
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            contrast: 1.0,
            block: 0.0,
        }
    }
}

pub fn mos_proxy(d: &Distortion, w: &MosWeights) -> f64 {
    let e = w.blur * d.blur_sigma.powi(2)
        + w.noise * d.noise_sigma.powi(2)
        + w.contrast * (1.0 - d.contrast).powi(2)
        + w.block * d.block;
    100.0 * (-e).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub name: String,
    pub contents: usize,
    pub distortions_per_content: usize,
    pub seed: u64,
    pub image_size: usize,
    pub labeled: bool,
    pub weights: MosWeights,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            contents: 80,
            distortions_per_content: 16,
            seed: 0,
            image_size: 32,
            labeled: true,
            weights: MosWeights::default(),
        }
    }
}

const CHANNELS: usize = 3;
const BLOCK: usize = 4;

/// Base image for content `c`: a two-color gradient, a few flat shapes
/// and a fine texture, min-max stretched to `[0, 1]`.
pub fn render_content(seed: u64, content: usize, size: usize) -> Tensor {
    let mut r = stream(seed, &format!("content-{content}"));
    let plane = size * size;
    let mut img = vec![0.0f32; CHANNELS * plane];
    let c0: [f32; 3] = [r.random(), r.random(), r.random()];
    let c1: [f32; 3] = [r.random(), r.random(), r.random()];
    let angle: f32 = r.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let s = size as f32;
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy) + 0.75) / 1.5;
            for c in 0..CHANNELS {
                img[c * plane + y * size + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let shapes = r.random_range(2..=5);
    for _ in 0..shapes {
        let color: [f32; 3] = [r.random(), r.random(), r.random()];
        let cx = r.random_range(0.0..s);
        let cy = r.random_range(0.0..s);
        let rad = r.random_range(0.1 * s..0.35 * s);
        let circle = r.random::<bool>();
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = if circle {
                    px * px + py * py <= rad * rad
                } else {
                    px.abs() <= rad && py.abs() <= 0.6 * rad
                };
                if inside {
                    for c in 0..CHANNELS {
                        img[c * plane + y * size + x] = color[c];
                    }
                }
            }
        }
    }
    // fine grayscale texture shared by all channels: three gratings with
    // periods of 2.5 to 6 pixels
    let mut waves = Vec::with_capacity(3);
    for _ in 0..3 {
        let freq = r.random_range(1.05f32..2.5);
        let theta: f32 = r.random_range(0.0..std::f32::consts::PI);
        let phase = r.random_range(0.0..std::f32::consts::TAU);
        waves.push((freq * theta.cos(), freq * theta.sin(), phase));
    }
    let amp = r.random_range(0.06f32..0.1);
    for y in 0..size {
        for x in 0..size {
            let v: f32 = waves
                .iter()
                .map(|&(fx, fy, ph)| amp * (fx * x as f32 + fy * y as f32 + ph).sin())
                .sum();
            for c in 0..CHANNELS {
                img[c * plane + y * size + x] += v;
            }
        }
    }
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    for v in &mut img {
        *v = (*v - lo) / span;
    }
    Tensor::new(vec![CHANNELS, size, size], img).expect("finite")
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter().map(|v| (v / total) as f32).collect()
}

fn blur_plane(p: &mut [f32], size: usize, kernel: &[f32]) {
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0f32; p.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, &w)| w * p[y * size + clamp(x as isize + j as isize - r)])
                .sum();
        }
    }
    for y in 0..size {
        for x in 0..size {
            p[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, &w)| w * tmp[clamp(y as isize + j as isize - r) * size + x])
                .sum();
        }
    }
}

/// Applies `d` to a `C×S×S` image: blur, block artifacts, contrast, noise,
/// then clamps to `[0, 1]` and quantizes to 8-bit levels.
pub fn distort<R: Rng + ?Sized>(image: &Tensor, d: &Distortion, rng: &mut R) -> Tensor {
    let (c, size) = (image.shape()[0], image.shape()[1]);
    let plane = size * size;
    let mut out = image.data().to_vec();
    if d.blur_sigma > 0.0 {
        let k = gaussian_kernel(d.blur_sigma);
        for ch in 0..c {
            blur_plane(&mut out[ch * plane..(ch + 1) * plane], size, &k);
        }
    }
    if d.block > 0.0 {
        let b = d.block as f32;
        for ch in 0..c {
            let p = &mut out[ch * plane..(ch + 1) * plane];
            for by in (0..size).step_by(BLOCK) {
                for bx in (0..size).step_by(BLOCK) {
                    let ys = by..(by + BLOCK).min(size);
                    let xs = bx..(bx + BLOCK).min(size);
                    let n = (ys.len() * xs.len()) as f32;
                    let mean: f32 = ys
                        .clone()
                        .flat_map(|y| xs.clone().map(move |x| (y, x)))
                        .map(|(y, x)| p[y * size + x])
                        .sum::<f32>()
                        / n;
                    for y in ys {
                        for x in xs.clone() {
                            let v = &mut p[y * size + x];
                            *v = (1.0 - b) * *v + b * mean;
                        }
                    }
                }
            }
        }
    }
    if d.contrast != 1.0 {
        let mean = out.iter().sum::<f32>() / out.len() as f32;
        let k = d.contrast as f32;
        for v in &mut out {
            *v = mean + k * (*v - mean);
        }
    }
    if d.noise_sigma > 0.0 {
        let n = Normal::new(0.0f32, d.noise_sigma as f32).expect("positive sigma");
        for v in &mut out {
            *v += n.sample(rng);
        }
    }
    for v in &mut out {
        *v = super::ppm::quantize(*v) as f32 / 255.0;
    }
    Tensor::new(image.shape().to_vec(), out).expect("finite")
}

/// Knob settings for distortion `d` of content `c`: one distortion family
/// per sample (cycling blur, noise, contrast, block), strength uniform over
/// its range.
fn draw_distortion(seed: u64, c: usize, d: usize) -> (Distortion, StreamRng) {
    let mut r = stream(seed, &format!("distortion-{c}-{d}"));
    let mut dist = Distortion::default();
    match (c + d) % 4 {
        0 => dist.blur_sigma = r.random_range(0.0..=3.0),
        1 => dist.noise_sigma = r.random_range(0.0..=0.3),
        2 => dist.contrast = r.random_range(0.4..=1.0),
        _ => dist.block = r.random_range(0.0..=1.0),
    }
    (dist, r)
}

/// Renders `contents × distortions_per_content` samples in memory. Ids are
/// `<name>-c<content>-d<distortion>`; every sample of a content shares the
/// reference id `<name>-c<content>`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Manifest> {
    if cfg.contents == 0 || cfg.distortions_per_content == 0 || cfg.image_size == 0 {
        return Err(Error::Config("synthetic counts and image size must be positive".into()));
    }
    let per = cfg.distortions_per_content;
    let samples: Vec<Sample> = (0..cfg.contents)
        .into_par_iter()
        .flat_map_iter(|c| {
            let base = render_content(cfg.seed, c, cfg.image_size);
            (0..per)
                .map(|d| {
                    let (dist, mut r) = draw_distortion(cfg.seed, c, d);
                    let image = distort(&base, &dist, &mut r);
                    let score = mos_proxy(&dist, &cfg.weights) as f32;
                    Sample {
                        id: format!("{}-c{c}-d{d}", cfg.name),
                        image: ImageSource::Memory(Arc::new(image)),
                        score: cfg.labeled.then_some(score),
                        reference_id: Some(format!("{}-c{c}", cfg.name)),
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut meta = ManifestMeta::new(cfg.name.clone());
    meta.synthetic = true;
    meta.labeled = cfg.labeled;
    meta.label_range = Some((0.0, 100.0));
    let w = cfg.weights;
    for (k, v) in [
        ("mos_w_blur", w.blur),
        ("mos_w_noise", w.noise),
        ("mos_w_contrast", w.contrast),
        ("mos_w_block", w.block),
    ] {
        meta.extra.insert(k.into(), v.to_string());
    }
    meta.extra.insert("seed".into(), cfg.seed.to_string());
    meta.extra.insert("image_size".into(), cfg.image_size.to_string());
    Manifest::new(meta, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mos_examples() {
        let w = MosWeights::default();
        assert_eq!(mos_proxy(&Distortion::default(), &w), 100.0);
        let mut prev = f64::INFINITY;
        for i in 0..=30 {
            let d = Distortion {
                blur_sigma: i as f64 * 0.1,
                noise_sigma: 0.05,
                contrast: 0.9,
                block: 0.2,
            };
            let m = mos_proxy(&d, &w);
            assert!(m < prev && m > 0.0);
            prev = m;
        }
    }

    #[test]
    fn zero_distortion_is_identity_up_to_quantization() {
        let base = render_content(1, 0, 16);
        let mut r = stream(0, "x");
        let out = distort(&base, &Distortion::default(), &mut r);
        for (a, b) in base.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            contents: 3,
            distortions_per_content: 5,
            image_size: 16,
            seed: 11,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.len(), 15);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.score.map(f32::to_bits), y.score.map(f32::to_bits));
            assert!(x.load_image().unwrap().bit_eq(&y.load_image().unwrap()));
        }
        assert_eq!(a.samples[7].id, "synth-c1-d2");
        assert_eq!(a.samples[7].reference_id.as_deref(), Some("synth-c1"));
        let other = generate_synthetic(&SynthConfig { seed: 12, ..cfg }).unwrap();
        assert!(!other.samples[0].load_image().unwrap().bit_eq(&a.samples[0].load_image().unwrap()));
    }

    #[test]
    fn distortions_change_pixels() {
        let base = render_content(2, 1, 32);
        let mut r = stream(0, "y");
        for d in [
            Distortion { blur_sigma: 2.0, ..Distortion::default() },
            Distortion { noise_sigma: 0.2, ..Distortion::default() },
            Distortion { contrast: 0.5, ..Distortion::default() },
            Distortion { block: 1.0, ..Distortion::default() },
        ] {
            let out = distort(&base, &d, &mut r);
            let diff: f32 = base.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 1.0, "{d:?}");
        }
    }
}
