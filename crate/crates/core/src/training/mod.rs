//! Residual-learning training: noise synthesis, patch sampling, loss,
//! learning-rate schedule, the epoch loop and model persistence.

mod adam;
mod persist;

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

pub use adam::{adam_step, adam_update, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use persist::{decode_model, encode_model, load_model, save_model, PersistError, FORMAT_VERSION, MAGIC};

use crate::autograd::{backward_pass, forward_pass, GraphError};
use crate::evaluation::{evaluate_dataset, EvalError, EvalOptions};
use crate::model::NetworkModel;
use crate::tensor::{Mode, Scalar, Shape, Tensor, TensorError};

/// Noise level on the 0–255 intensity scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum NoiseMode {
    Fixed(f64),
    /// Blind training: sigma drawn uniformly from `[lo, hi]` for every patch.
    UniformRange(f64, f64),
}

impl NoiseMode {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            NoiseMode::Fixed(s) if !(s >= 0.0 && s.is_finite()) => Err(format!("sigma must be a finite value >= 0, got {s}")),
            NoiseMode::UniformRange(lo, hi) if !(lo >= 0.0 && lo <= hi && hi.is_finite()) => {
                Err(format!("noise range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"))
            }
            _ => Ok(()),
        }
    }

    pub fn draw_sigma(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            NoiseMode::Fixed(s) => s,
            NoiseMode::UniformRange(lo, hi) if lo == hi => lo,
            NoiseMode::UniformRange(lo, hi) => rng.gen_range(lo..=hi),
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseMode::Fixed(s) => write!(f, "sigma={s}"),
            NoiseMode::UniformRange(lo, hi) => write!(f, "sigma=U[{lo},{hi}]"),
        }
    }
}

/// `25` for a fixed level, `0-55` (or `0:55`) for a blind range.
impl FromStr for NoiseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad noise level `{s}`"));
        let mode = match s.split_once(['-', ':']) {
            Some((lo, hi)) if !lo.trim().is_empty() => NoiseMode::UniformRange(num(lo)?, num(hi)?),
            _ => NoiseMode::Fixed(num(s)?),
        };
        mode.validate()?;
        Ok(mode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub noise: NoiseMode,
    pub patch_size: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    /// Apply a random one of the 8 dihedral transforms to every patch.
    pub augment: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            noise: NoiseMode::Fixed(25.0),
            patch_size: 16,
            pairs_per_epoch: 2048,
            batch_size: 16,
            epochs: 30,
            lr_start: 1e-3,
            lr_end: 1e-5,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale recipe for a gray non-blind network: 128×1600 pairs per
    /// epoch in batches of 128 over 50 epochs. `patch_size` is 50 for the
    /// 4×5 lattice and 60 for the 4×6 lattice.
    pub fn full_scale_gray(sigma: f64, patch_size: usize) -> Self {
        Self {
            noise: NoiseMode::Fixed(sigma),
            patch_size,
            pairs_per_epoch: 128 * 1600,
            batch_size: 128,
            epochs: 50,
            ..Self::default()
        }
    }

    /// Full-scale recipe for the blind color network (4×10 lattice).
    pub fn full_scale_color_blind() -> Self {
        Self {
            noise: NoiseMode::UniformRange(0.0, 55.0),
            patch_size: 90,
            pairs_per_epoch: 128 * 3000,
            batch_size: 128,
            epochs: 40,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.noise.validate().map_err(TrainError::Config)?;
        if self.patch_size == 0 {
            return bad("patch_size must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.pairs_per_epoch == 0 {
            return bad("pairs_per_epoch must be at least 1".into());
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start.is_finite() && self.lr_end.is_finite()) {
            return bad(format!("learning rates must be positive, got {} and {}", self.lr_start, self.lr_end));
        }
        Ok(())
    }
}

/// Geometric decay from `lr_start` at epoch 0 to `lr_end` at epoch
/// `epochs − 1`. Fractional epochs interpolate; a single-epoch run uses
/// `lr_start`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: f64) -> f64 {
    if config.epochs <= 1 || epoch <= 0.0 {
        return config.lr_start;
    }
    let last = (config.epochs - 1) as f64;
    if epoch >= last {
        return config.lr_end;
    }
    config.lr_start * (config.lr_end / config.lr_start).powf(epoch / last)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("validation failed: {0}")]
    Eval(#[from] EvalError),
}

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("no training images")]
    NoImages,
    #[error("image {index} is {h}x{w}, smaller than the {patch}x{patch} patch")]
    Undersized { index: usize, h: usize, w: usize, patch: usize },
}

// ---------------------------------------------------------------------------
// Data

/// Sampled noise field `g ~ N(0, (sigma_255/255)²)`, same shape as `like`.
pub fn gaussian_noise<T: Scalar>(like: Shape, sigma_255: f64, rng: &mut impl Rng) -> Tensor<T> {
    let std = sigma_255 / 255.0;
    Tensor::from_fn(like, |_, _, _, _| {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64_lossy(std * z)
    })
}

/// `clean + g`, unclipped.
pub fn add_gaussian_noise<T: Scalar>(clean: &Tensor<T>, sigma_255: f64, rng: &mut impl Rng) -> Tensor<T> {
    let g = gaussian_noise(clean.shape(), sigma_255, rng);
    clean.add(&g).expect("same shape")
}

/// `(noisy input, residual target)` where the target is the added noise.
pub fn make_training_pair<T: Scalar>(clean: &Tensor<T>, noise: NoiseMode, rng: &mut impl Rng) -> (Tensor<T>, Tensor<T>) {
    let sigma = noise.draw_sigma(rng);
    let g = gaussian_noise(clean.shape(), sigma, rng);
    (clean.add(&g).expect("same shape"), g)
}

/// Source coordinates of output pixel `(y, x)` under dihedral transform
/// `t ∈ 0..8` of a `p × p` patch: `t % 4` quarter turns, mirrored when
/// `t ≥ 4`.
pub fn dihedral_source(t: usize, p: usize, y: usize, x: usize) -> (usize, usize) {
    let (y, x) = if t >= 4 { (y, p - 1 - x) } else { (y, x) };
    match t % 4 {
        0 => (y, x),
        1 => (p - 1 - x, y),
        2 => (p - 1 - y, p - 1 - x),
        _ => (x, p - 1 - y),
    }
}

/// `count` square patches, each from a uniformly chosen image at a
/// uniformly chosen top-left corner. Images are `(1, C, H, W)`.
pub fn sample_patches<T: Scalar>(
    images: &[Tensor<T>],
    patch_size: usize,
    count: usize,
    augment: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor<T>>, PatchError> {
    check_images(images, patch_size)?;
    let p = patch_size;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let img = &images[rng.gen_range(0..images.len())];
        let s = img.shape();
        let top = rng.gen_range(0..=s.h - p);
        let left = rng.gen_range(0..=s.w - p);
        let t = if augment { rng.gen_range(0..8) } else { 0 };
        out.push(Tensor::from_fn(Shape::new(1, s.c, p, p), |_, c, y, x| {
            let (sy, sx) = dihedral_source(t, p, y, x);
            img.at(0, c, top + sy, left + sx)
        }));
    }
    Ok(out)
}

fn check_images<T: Scalar>(images: &[Tensor<T>], patch_size: usize) -> Result<(), PatchError> {
    if images.is_empty() {
        return Err(PatchError::NoImages);
    }
    for (index, img) in images.iter().enumerate() {
        let s = img.shape();
        if s.h < patch_size || s.w < patch_size {
            return Err(PatchError::Undersized {
                index,
                h: s.h,
                w: s.w,
                patch: patch_size,
            });
        }
    }
    Ok(())
}

/// Element-mean squared error and its gradient `2(pred − target)/N`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>), TensorError> {
    pred.expect_shape(target.shape())?;
    let n = pred.len() as f64;
    let diff = pred.sub(target)?;
    let loss = diff.data().iter().map(|d| d.as_f64() * d.as_f64()).sum::<f64>() / n;
    Ok((loss, diff.scale(T::from_f64_lossy(2.0 / n))))
}

// ---------------------------------------------------------------------------
// Epoch loop

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_psnr_db: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,mean_loss,val_psnr_db`; the PSNR column is empty without
    /// validation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,val_psnr_db\n");
        for r in &self.records {
            let psnr = r.val_psnr_db.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.9e},{psnr}", r.epoch, r.mean_loss);
        }
        out
    }
}

/// Held-out clean images scored after every epoch.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a, T> {
    pub images: &'a [(String, Tensor<T>)],
    pub noise: NoiseMode,
    pub seed: u64,
}

/// Mean PSNR on the validation set with the model's current weights.
pub fn validation_psnr<T: Scalar>(model: &NetworkModel<T>, val: &Validation<'_, T>) -> Result<f64, EvalError> {
    Ok(evaluate_dataset(model, val.images, val.noise, val.seed, EvalOptions::default())?.mean_psnr_db)
}

/// Train `model` in place. Every epoch draws `pairs_per_epoch` fresh
/// noisy/residual pairs batch by batch from a generator seeded with
/// `config.seed`, so the data order depends only on the images and the
/// config. `progress` is called after each epoch.
pub fn train<T: Scalar>(
    model: &mut NetworkModel<T>,
    images: &[Tensor<T>],
    config: &TrainConfig,
    validation: Option<&Validation<'_, T>>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainHistory, TrainError> {
    config.validate()?;
    check_images(images, config.patch_size)?;
    let in_c = model.arch().in_channels();
    if let Some(bad) = images.iter().find(|i| i.shape().c != in_c) {
        return Err(GraphError::InputChannels {
            expected: in_c,
            actual: bad.shape().c,
        }
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model);
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch as f64);
        let mut remaining = config.pairs_per_epoch;
        let mut loss_sum = 0.0;
        let mut batch = 0;
        while remaining > 0 {
            let size = remaining.min(config.batch_size);
            remaining -= size;
            let patches = sample_patches(images, config.patch_size, size, config.augment, &mut rng)?;
            let (inputs, targets): (Vec<_>, Vec<_>) =
                patches.iter().map(|p| make_training_pair(p, config.noise, &mut rng)).unzip();
            let x = Tensor::stack(&inputs)?;
            let y = Tensor::stack(&targets)?;
            let (pred, trace) = forward_pass(model, &x, Mode::Train)?;
            let (loss, grad) = mse_loss(&pred, &y)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: batch + 1,
                    loss,
                });
            }
            let grads = backward_pass(model, &trace, &grad)?;
            model.update_running_stats(trace.bn_caches());
            adam_step(model, &grads, &mut adam, lr);
            loss_sum += loss * size as f64;
            batch += 1;
        }
        let val_psnr_db = validation.map(|v| validation_psnr(model, v)).transpose()?;
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / config.pairs_per_epoch as f64,
            val_psnr_db,
            lr,
        };
        progress(&record);
        history.records.push(record);
    }
    Ok(history)
}
