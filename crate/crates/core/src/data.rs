//! Image datasets: a byte-record file format and a synthetic generator.
//!
//! A record is one label byte followed by `c·h·w` pixel bytes in
//! channel-major order. Pixels are held as `byte / 255`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    BinaryFile,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub source: Source,
    /// `len · c · h · w` pixel values.
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `[b, c, h, w]` batch of the given records and their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("record {i} out of range")));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )?;
        Ok((t, labels))
    }

    /// Records per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

pub fn parse_binary_images(
    bytes: &[u8],
    c: usize,
    h: usize,
    w: usize,
    num_classes: usize,
) -> Result<Dataset> {
    let n = c * h * w;
    if n == 0 {
        return Err(Error::Config("image extent must be non-empty".into()));
    }
    let rec = 1 + n;
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / rec * n);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for (k, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[0] as usize;
        if label >= num_classes {
            return Err(Error::Data(format!(
                "record {k} has label {label}, but there are {num_classes} classes"
            )));
        }
        labels.push(label);
        pixels.extend(r[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset {
        channels: c,
        height: h,
        width: w,
        num_classes,
        source: Source::BinaryFile,
        pixels,
        labels,
    })
}

pub fn load_binary_images(
    path: &Path,
    c: usize,
    h: usize,
    w: usize,
    num_classes: usize,
) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_binary_images(&bytes, c, h, w, num_classes)
}

/// Serializes a dataset whose pixels lie in `[0, 1]`, quantized to bytes.
pub fn encode_binary_images(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.num_classes > 256 {
        return Err(Error::Data("labels must fit in one byte".into()));
    }
    let mut out = Vec::with_capacity(ds.len() * (1 + ds.image_len()));
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        for &p in ds.image(i) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Data(format!("pixel {p} outside [0, 1]")));
            }
            out.push((p * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_binary_images(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_binary_images(ds)?)?;
    Ok(())
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of `ds` (normally the training split). Channels with no
    /// spread get a unit deviation.
    pub fn fit(ds: &Dataset) -> Self {
        let plane = ds.height * ds.width;
        let mut mean = vec![0.0; ds.channels];
        let mut sq = vec![0.0; ds.channels];
        for i in 0..ds.len() {
            for (ch, p) in ds.image(i).chunks(plane).enumerate() {
                mean[ch] += p.iter().sum::<f64>();
                sq[ch] += p.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let count = (ds.len() * plane).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                let var = (s / count - *m * *m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if self.mean.len() != ds.channels || self.std.len() != ds.channels {
            return Err(Error::Dimension(format!(
                "normalization has {} channels, dataset {}",
                self.mean.len(),
                ds.channels
            )));
        }
        let plane = ds.height * ds.width;
        let mut out = ds.clone();
        for (k, v) in out.pixels.iter_mut().enumerate() {
            let ch = (k / plane) % ds.channels;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        Ok(out)
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Brightness of the class bar.
    pub bar_intensity: f64,
    /// Half thickness of the bar, in pixels.
    pub bar_half_width: f64,
    /// Maximum shift of the bar centre from the image centre, as a fraction
    /// of the image size.
    pub jitter: f64,
    /// Jitter of the bar orientation, in radians.
    pub angle_jitter: f64,
    /// Brightness of the class-independent blob.
    pub blob_intensity: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            bar_intensity: 0.45,
            bar_half_width: 1.0,
            jitter: 0.3,
            angle_jitter: 0.35,
            blob_intensity: 0.45,
            noise: 0.22,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Single-channel images of class-oriented bars over a random blob and
/// noise. Class `k` draws its bar at angle `kπ / num_classes`. Records are
/// interleaved by class; pixels are byte-quantized.
pub fn make_synthetic_with(
    cfg: &SyntheticConfig,
    num_classes: usize,
    n_per_class: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Config(
            "synthetic data needs at least two classes".into(),
        ));
    }
    if num_classes > 256 || h == 0 || w == 0 {
        return Err(Error::Config("unsupported synthetic extent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(num_classes * n_per_class * h * w);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    let (hf, wf) = (h as f64, w as f64);
    for _ in 0..n_per_class {
        for k in 0..num_classes {
            let angle =
                k as f64 * PI / num_classes as f64 + rng.gen_range(-1.0..=1.0) * cfg.angle_jitter;
            let (dy, dx) = angle.sin_cos();
            let cy = hf / 2.0 + rng.gen_range(-1.0..=1.0) * cfg.jitter * hf;
            let cx = wf / 2.0 + rng.gen_range(-1.0..=1.0) * cfg.jitter * wf;
            let by = rng.gen_range(0.0..hf);
            let bx = rng.gen_range(0.0..wf);
            let br = rng.gen_range(1.5..3.0);
            for y in 0..h {
                for x in 0..w {
                    let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    // Distance to the line through (cy, cx) along (dy, dx).
                    let d = (py * dx - px * dy).abs();
                    let bar = if d <= cfg.bar_half_width {
                        cfg.bar_intensity
                    } else {
                        0.0
                    };
                    let r2 = (y as f64 + 0.5 - by).powi(2) + (x as f64 + 0.5 - bx).powi(2);
                    let blob = cfg.blob_intensity * (-r2 / (2.0 * br * br)).exp();
                    let v = 0.2 + bar + blob + cfg.noise * gaussian(&mut rng);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
                }
            }
            labels.push(k);
        }
    }
    Ok(Dataset {
        channels: 1,
        height: h,
        width: w,
        num_classes,
        source: Source::Synthetic,
        pixels,
        labels,
    })
}

pub fn make_synthetic(
    num_classes: usize,
    n_per_class: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Dataset> {
    make_synthetic_with(
        &SyntheticConfig::default(),
        num_classes,
        n_per_class,
        h,
        w,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_scalar_records() {
        let ds = parse_binary_images(&[1, 255, 0, 51], 1, 1, 1, 2).unwrap();
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.pixels, vec![1.0, 0.2]);
    }

    #[test]
    fn truncated_is_format_error() {
        let r = parse_binary_images(&[1, 2, 3], 1, 1, 1, 2);
        assert!(matches!(r, Err(Error::Format(_))));
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let r = parse_binary_images(&[5, 0], 1, 1, 1, 2);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn zero_pixel_normalizes_to_minus_mean_over_std() {
        let ds = parse_binary_images(&[0, 0, 1, 255, 0, 51], 1, 1, 1, 2).unwrap();
        let norm = Normalization::fit(&ds);
        let out = norm.apply(&ds).unwrap();
        assert!((out.pixels[0] + norm.mean[0] / norm.std[0]).abs() < 1e-12);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(2, 5, 8, 8, 3).unwrap();
        let b = make_synthetic(2, 5, 8, 8, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic(2, 5, 8, 8, 4).unwrap());
        assert!(make_synthetic(2, 0, 8, 8, 3).unwrap().is_empty());
        assert!(make_synthetic(1, 5, 8, 8, 3).is_err());
    }
}
