//! NetPBM image I/O, full-image denoising, PSNR/SSIM and dataset reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autograd::{infer, GraphError};
use crate::model::NetworkModel;
use crate::tensor::{Scalar, Shape, Tensor};
use crate::training::{make_training_pair, NoiseMode};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a binary NetPBM image (magic {0:?}); only P5 and P6 are supported")]
    UnsupportedFormat(String),
    #[error("malformed NetPBM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0}; only 255 is supported")]
    UnsupportedMaxval(u32),
    #[error("truncated pixel data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("image must have 1 or 3 channels, got {0}")]
    Channels(usize),
    #[error("sample count {actual} does not match {width}x{height}x{channels}")]
    SampleCount {
        width: usize,
        height: usize,
        channels: usize,
        actual: usize,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric inputs differ in shape: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),
    #[error("image {h}x{w} is smaller than the {window}x{window} SSIM window")]
    TooSmall { h: usize, w: usize, window: usize },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// 8-bit interleaved image, 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<u8>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        if samples.len() != width * height * channels {
            return Err(ImageError::SampleCount {
                width,
                height,
                channels,
                actual: samples.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    /// Parse a binary P5 (gray) or P6 (RGB) image with maxval 255.
    pub fn decode(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)
            .ok_or_else(|| ImageError::MalformedHeader("missing magic number".into()))?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(ImageError::UnsupportedFormat(other.to_string())),
        };
        let mut field = |name: &str| -> Result<u32, ImageError> {
            let tok = next_token(bytes, &mut pos)
                .ok_or_else(|| ImageError::MalformedHeader(format!("missing {name}")))?;
            tok.parse::<u32>()
                .map_err(|_| ImageError::MalformedHeader(format!("bad {name} `{tok}`")))
        };
        let width = field("width")? as usize;
        let height = field("height")? as usize;
        let maxval = field("maxval")?;
        if width == 0 || height == 0 {
            return Err(ImageError::MalformedHeader("zero image dimension".into()));
        }
        if maxval != 255 {
            return Err(ImageError::UnsupportedMaxval(maxval));
        }
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(ImageError::MalformedHeader("no whitespace after maxval".into())),
        }
        let expected = width * height * channels;
        let payload = &bytes[pos..];
        if payload.len() < expected {
            return Err(ImageError::Truncated {
                expected,
                actual: payload.len(),
            });
        }
        Self::new(width, height, channels, payload[..expected].to_vec())
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }

    /// `(1, C, H, W)` tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let scale = T::one() / T::from_f64_lossy(255.0);
        let (w, c) = (self.width, self.channels);
        Tensor::from_fn(Shape::new(1, c, self.height, w), |_, ch, y, x| {
            T::from_f64_lossy(f64::from(self.samples[(y * w + x) * c + ch])) * scale
        })
    }

    /// Quantize sample 0 of `t` (values in `[0, 1]`, clipped) to 8 bits.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self, ImageError> {
        let s = t.shape();
        let mut samples = vec![0u8; s.h * s.w * s.c];
        for ch in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    samples[(y * s.w + x) * s.c + ch] = quantize(t.at(0, ch, y, x).as_f64());
                }
            }
        }
        Self::new(s.w, s.h, s.c, samples)
    }

    /// ITU-R 601 luma.
    pub fn to_gray(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let samples = self
            .samples
            .chunks_exact(3)
            .map(|p| {
                let l = 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
                l.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        Self {
            width: self.width,
            height: self.height,
            channels: 1,
            samples,
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ImageBuffer::decode(&bytes)
}

pub fn save_image(image: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    fs::write(path, image.encode()).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Every `.pgm`/`.ppm`/`.pnm` file in `dir`, sorted by file name.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, ImageBuffer)>, ImageError> {
    let dir = dir.as_ref();
    let io_err = |source| ImageError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("pgm" | "ppm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            load_image(&p).map(|img| (name, img))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Denoising

/// The network's noise estimate `R(y)`, computed with running BN statistics.
pub fn denoise_residual<T: Scalar>(model: &NetworkModel<T>, noisy: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
    infer(model, noisy)
}

/// `y − R(y)` without clipping.
pub fn denoise_unclipped<T: Scalar>(model: &NetworkModel<T>, noisy: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
    Ok(noisy.sub(&denoise_residual(model, noisy)?)?)
}

/// `clip(y − R(y), 0, 1)`.
pub fn denoise_image<T: Scalar>(model: &NetworkModel<T>, noisy: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
    Ok(clip_unit(&denoise_unclipped(model, noisy)?))
}

pub fn clip_unit<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()).min(T::one()))
}

// ---------------------------------------------------------------------------
// Metrics

/// `10·log10(max² / MSE)` over all elements; `+∞` when the inputs are equal.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, max_value: f64) -> Result<f64, MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape(), b.shape()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over the fully-covered ("valid") region.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// K1 = 0.01, K2 = 0.03 and dynamic range 1, averaged over every
/// (sample, channel) plane.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, MetricError> {
    let s = a.shape();
    if s != b.shape() {
        return Err(MetricError::ShapeMismatch(s, b.shape()));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            h: s.h,
            w: s.w,
            window: SSIM_WINDOW,
        });
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let k = gaussian_window();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let pa: Vec<f64> = a.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let pb: Vec<f64> = b.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
            let mu_a = filter_valid(&pa, s.h, s.w, &k);
            let mu_b = filter_valid(&pb, s.h, s.w, &k);
            let e_aa = filter_valid(&prod(&pa, &pa), s.h, s.w, &k);
            let e_bb = filter_valid(&prod(&pb, &pb), s.h, s.w, &k);
            let e_ab = filter_valid(&prod(&pa, &pb), s.h, s.w, &k);
            let mut plane_sum = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let var_a = e_aa[i] - ma * ma;
                let var_b = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                plane_sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            }
            total += plane_sum / mu_a.len() as f64;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

// ---------------------------------------------------------------------------
// Dataset evaluation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// PSNR of the clipped noisy input, for reference.
    pub input_psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub noise: String,
    pub images: Vec<ImageScore>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_input_psnr_db: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    /// `image,psnr_db,ssim`, one row per image.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr_db,ssim\n");
        for s in &self.images {
            let _ = writeln!(out, "{},{},{:.6}", s.name, fmt_db(s.psnr_db), s.ssim);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.images.iter().map(|s| s.name.len()).max().unwrap_or(5).max(7);
        let mut out = format!("model {}  noise {}\n", self.model, self.noise);
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>8}  {:>10}", "image", "PSNR (dB)", "SSIM", "noisy (dB)");
        for s in &self.images {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10}  {:>8.4}  {:>10}",
                s.name,
                fmt_db(s.psnr_db),
                s.ssim,
                fmt_db(s.input_psnr_db)
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>8.4}  {:>10}",
            "average",
            fmt_db(self.mean_psnr_db),
            self.mean_ssim,
            fmt_db(self.mean_input_psnr_db)
        );
        out
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    /// Round the denoised image to 8 bits before measuring.
    pub quantize: bool,
}

/// Per-image noise RNG: stream `index` of a ChaCha8 generator seeded with
/// `seed`, so results do not depend on evaluation order.
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Add noise to each clean image, denoise it and score it against the clean
/// image. SSIM is skipped (reported as NaN) for images smaller than the
/// SSIM window.
pub fn evaluate_dataset<T: Scalar>(
    model: &NetworkModel<T>,
    images: &[(String, Tensor<T>)],
    noise: NoiseMode,
    seed: u64,
    opts: EvalOptions,
) -> Result<EvalReport, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut scores = Vec::with_capacity(images.len());
    for (i, (name, clean)) in images.iter().enumerate() {
        let mut rng = image_rng(seed, i);
        let (noisy, _) = make_training_pair(clean, noise, &mut rng);
        let mut denoised = denoise_image(model, &noisy)?;
        if opts.quantize {
            denoised = denoised.map(|v| T::from_f64_lossy(f64::from(quantize(v.as_f64())) / 255.0));
        }
        let s = clean.shape();
        let ssim_value = if s.h >= SSIM_WINDOW && s.w >= SSIM_WINDOW {
            ssim(&denoised, clean)?
        } else {
            f64::NAN
        };
        scores.push(ImageScore {
            name: name.clone(),
            psnr_db: psnr(&denoised, clean, 1.0)?,
            ssim: ssim_value,
            input_psnr_db: psnr(&clip_unit(&noisy), clean, 1.0)?,
        });
    }
    Ok(EvalReport {
        model: model.arch().to_string(),
        noise: noise.to_string(),
        mean_psnr_db: mean(scores.iter().map(|s| s.psnr_db)),
        mean_ssim: mean(scores.iter().map(|s| s.ssim)),
        mean_input_psnr_db: mean(scores.iter().map(|s| s.input_psnr_db)),
        images: scores,
    })
}
