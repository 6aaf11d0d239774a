//! Variance-preserving noise schedule and the tensor ops built on it.
//!
//! The schedule stores `ᾱ_τ` for `τ = 0..=T` with `ᾱ_0 = 1`. Forward noising is
//! `z_τ = √ᾱ_τ z_0 + √(1 − ᾱ_τ) ε`. The warped condition is noised at a reduced
//! index (`⌊τ/3⌋` by default) and blended into the running latent with a weight
//! `γ β w_τ`, where `β` is the mask density of the warp.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{ImageFrame, Mask};
use crate::warp::mask_density;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("bad schedule parameters: {0}")]
    BadScheduleParams(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("blend weight γβw_τ = {0} is outside [0, 1]")]
    BlendWeightOutOfRange(f64),
    #[error("bad step order: τ = {tau}, τ_prev = {tau_prev}")]
    BadStepOrder { tau: usize, tau_prev: usize },
    #[error("timestep {tau} outside [0, {total}]")]
    StepOutOfRange { tau: usize, total: usize },
    #[error("denoiser failed: {0}")]
    Denoiser(String),
}

/// `ᾱ` table for a linear-β schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bar[tau]
    }

    pub fn table(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, tau: usize) -> Result<(), DiffusionError> {
        if tau > self.total_steps() {
            return Err(DiffusionError::StepOutOfRange {
                tau,
                total: self.total_steps(),
            });
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }
}

/// `ᾱ_τ = ∏_{i ≤ τ} (1 − β_i)` with `β_i` linearly spaced over `[beta_start, beta_end]`.
pub fn make_schedule(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    if total_steps < 1 {
        return Err(DiffusionError::BadScheduleParams("total_steps must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadScheduleParams(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(total_steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for i in 0..total_steps {
        let beta = if total_steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * i as f64 / (total_steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { alpha_bar })
}

/// Which table index the warped condition is noised at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionIndex {
    /// `⌊τ/3⌋`, the formula as written.
    #[default]
    Third,
    /// `min(3τ, T)`, for a noisier condition than the target latent.
    Triple,
}

impl ConditionIndex {
    pub fn index(self, tau: usize, total: usize) -> usize {
        match self {
            ConditionIndex::Third => tau / 3,
            ConditionIndex::Triple => (tau * 3).min(total),
        }
    }
}

/// Time weight `w_τ ∈ [0, 1]`, non-increasing in `τ`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeWeight {
    /// `1 − τ/T`.
    #[default]
    Linear,
    /// `cos(π τ / 2T)`.
    Cosine,
    Constant(f64),
}

impl TimeWeight {
    pub fn value(&self, tau: usize, total: usize) -> f64 {
        let r = tau as f64 / total.max(1) as f64;
        match self {
            TimeWeight::Linear => 1.0 - r,
            TimeWeight::Cosine => (std::f64::consts::FRAC_PI_2 * r).cos().max(0.0),
            TimeWeight::Constant(c) => c.clamp(0.0, 1.0),
        }
    }
}

/// `frames × channels × height × width` tensor, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl LatentTensor {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; frames * channels * height * width],
        }
    }

    pub fn from_data(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, DiffusionError> {
        if data.len() != frames * channels * height * width {
            return Err(DiffusionError::ShapeMismatch(format!(
                "{} values for shape {frames}x{channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.frames, self.channels, self.height, self.width)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn randn<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Self {
        let [n, c, h, w] = shape;
        let data = (0..n * c * h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self {
            frames: n,
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    fn check_same(&self, other: &LatentTensor, what: &str) -> Result<(), DiffusionError> {
        if self.shape() != other.shape() {
            return Err(DiffusionError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Packs HWC frames into NCHW.
    pub fn from_frames(frames: &[ImageFrame]) -> Result<Self, DiffusionError> {
        let first = frames
            .first()
            .ok_or_else(|| DiffusionError::ShapeMismatch("no frames".into()))?;
        let (w, h, c) = (first.width, first.height, first.channels);
        let mut out = Self::zeros(frames.len(), c, h, w);
        for (n, f) in frames.iter().enumerate() {
            if !f.same_shape(first) {
                return Err(DiffusionError::ShapeMismatch("frames differ in shape".into()));
            }
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out.data[((n * c + ch) * h + y) * w + x] = f.data[(y * w + x) * c + ch];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Unpacks into HWC frames without clamping.
    pub fn to_frames(&self) -> Vec<ImageFrame> {
        let (c, h, w) = (self.channels, self.height, self.width);
        (0..self.frames)
            .map(|n| {
                let mut data = vec![0.0; h * w * c];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            data[(y * w + x) * c + ch] = self.data[((n * c + ch) * h + y) * w + x];
                        }
                    }
                }
                ImageFrame {
                    width: w,
                    height: h,
                    channels: c,
                    data,
                }
            })
            .collect()
    }

    pub fn mean_squared_difference(&self, other: &LatentTensor) -> Result<f64, DiffusionError> {
        self.check_same(other, "mse")?;
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(s / self.data.len() as f64)
    }
}

fn noise_at(z0: &LatentTensor, eps: &LatentTensor, alpha_bar: f64) -> LatentTensor {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    let data = z0.data.iter().zip(&eps.data).map(|(z, e)| a * z + b * e).collect();
    LatentTensor { data, ..*z0 }
}

/// `z_τ = √ᾱ_τ z_0 + √(1 − ᾱ_τ) ε`.
pub fn add_noise(
    z0: &LatentTensor,
    tau: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor, DiffusionError> {
    sched.check(tau)?;
    z0.check_same(eps, "add_noise")?;
    if tau == 0 {
        return Ok(z0.clone());
    }
    Ok(noise_at(z0, eps, sched.alpha_bar(tau)))
}

/// Noised warp condition `x_τ` at index `⌊τ/3⌋`.
pub fn noised_condition(
    z_w: &LatentTensor,
    tau: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor, DiffusionError> {
    noised_condition_with(z_w, tau, eps, sched, ConditionIndex::Third)
}

pub fn noised_condition_with(
    z_w: &LatentTensor,
    tau: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
    mode: ConditionIndex,
) -> Result<LatentTensor, DiffusionError> {
    sched.check(tau)?;
    add_noise(z_w, mode.index(tau, sched.total_steps()), eps, sched)
}

/// Blended condition plus the latent-resolution mask channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTensor {
    pub blended: LatentTensor,
    /// `frames × height × width`, entries in `{0, 1}`.
    pub mask_channel: Vec<f64>,
    /// The applied `γβw_τ`.
    pub weight: f64,
}

impl ConditionTensor {
    /// The dropped (unconditional) condition.
    pub fn zeros_like(&self) -> Self {
        Self {
            blended: self.blended.zeros_like(),
            mask_channel: vec![0.0; self.mask_channel.len()],
            weight: 0.0,
        }
    }
}

/// `γ β w_τ`, rejecting values outside `[0, 1]`.
pub fn blend_weight(gamma: f64, beta: f64, w_tau: f64) -> Result<f64, DiffusionError> {
    let k = gamma * beta * w_tau;
    if !(0.0..=1.0).contains(&k) {
        return Err(DiffusionError::BlendWeightOutOfRange(k));
    }
    Ok(k)
}

/// Nearest-neighbour resampling of per-frame masks to `height × width`.
pub fn downsample_masks(masks: &[Mask], height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(masks.len() * height * width);
    for m in masks {
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * m.height as f64 / height as f64) as usize).min(m.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * m.width as f64 / width as f64) as usize).min(m.width - 1);
                out.push(if m.get(sx, sy) { 1.0 } else { 0.0 });
            }
        }
    }
    out
}

/// `c_τ = [γβw_τ x_τ + (1 − γβw_τ) z_τ ; M]` with `β` the density of `masks`.
pub fn blend_condition(
    x_tau: &LatentTensor,
    z_tau: &LatentTensor,
    masks: &[Mask],
    tau: usize,
    gamma: f64,
    w: &TimeWeight,
    sched: &NoiseSchedule,
) -> Result<ConditionTensor, DiffusionError> {
    sched.check(tau)?;
    let beta = mask_density(masks);
    let k = blend_weight(gamma, beta, w.value(tau, sched.total_steps()))?;
    blend_with_weight(x_tau, z_tau, masks, k)
}

/// Blend with an explicit weight `k ∈ [0, 1]`.
pub fn blend_with_weight(
    x_tau: &LatentTensor,
    z_tau: &LatentTensor,
    masks: &[Mask],
    k: f64,
) -> Result<ConditionTensor, DiffusionError> {
    x_tau.check_same(z_tau, "blend_condition")?;
    if !(0.0..=1.0).contains(&k) {
        return Err(DiffusionError::BlendWeightOutOfRange(k));
    }
    if masks.len() != x_tau.frames {
        return Err(DiffusionError::ShapeMismatch(format!(
            "{} masks for {} frames",
            masks.len(),
            x_tau.frames
        )));
    }
    let data = if k == 0.0 {
        z_tau.data.clone()
    } else if k == 1.0 {
        x_tau.data.clone()
    } else {
        x_tau
            .data
            .iter()
            .zip(&z_tau.data)
            .map(|(x, z)| k * x + (1.0 - k) * z)
            .collect()
    };
    Ok(ConditionTensor {
        blended: LatentTensor { data, ..*z_tau },
        mask_channel: downsample_masks(masks, x_tau.height, x_tau.width),
        weight: k,
    })
}

/// Noise predictor `ε_θ(z_τ, z_s, c_τ, τ)`.
pub trait NoisePredictor {
    fn predict(
        &self,
        z_tau: &LatentTensor,
        z_source: &LatentTensor,
        cond: &ConditionTensor,
        tau: usize,
    ) -> Result<LatentTensor, DiffusionError>;
}

/// `‖ε_θ(z_τ, z_s, c_τ, τ) − ε‖²` averaged over elements.
pub fn training_loss(
    denoiser: &dyn NoisePredictor,
    z0: &LatentTensor,
    z_source: &LatentTensor,
    cond: &ConditionTensor,
    tau: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<f64, DiffusionError> {
    let z_tau = add_noise(z0, tau, eps, sched)?;
    let pred = denoiser.predict(&z_tau, z_source, cond, tau)?;
    pred.mean_squared_difference(eps)
}

/// Parameters of one stochastic loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSampling {
    pub gamma: f64,
    pub weight: TimeWeight,
    pub condition_index: ConditionIndex,
    /// Probability of dropping `(c_τ, z_s)` for classifier-free guidance.
    pub cond_drop_prob: f64,
}

impl Default for LossSampling {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            weight: TimeWeight::Linear,
            condition_index: ConditionIndex::Third,
            cond_drop_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSample {
    pub tau: usize,
    pub dropped: bool,
    pub loss: f64,
}

/// Draws `τ`, `ε` and the condition noise, builds `c_τ` from the warp latent and
/// masks, optionally drops the visual conditions, and evaluates the loss.
#[allow(clippy::too_many_arguments)]
pub fn sample_training_loss<R: Rng + ?Sized>(
    denoiser: &dyn NoisePredictor,
    z0: &LatentTensor,
    z_source: &LatentTensor,
    z_warp: &LatentTensor,
    masks: &[Mask],
    sched: &NoiseSchedule,
    params: &LossSampling,
    rng: &mut R,
) -> Result<LossSample, DiffusionError> {
    let total = sched.total_steps();
    let tau = rng.random_range(1..=total);
    let eps = LatentTensor::randn(z0.shape(), rng);
    let eps_c = LatentTensor::randn(z_warp.shape(), rng);
    let dropped = rng.random::<f64>() < params.cond_drop_prob;
    let z_tau = add_noise(z0, tau, &eps, sched)?;
    let x_tau = noised_condition_with(z_warp, tau, &eps_c, sched, params.condition_index)?;
    let beta = mask_density(masks);
    let k = (params.gamma * beta * params.weight.value(tau, total)).clamp(0.0, 1.0);
    let mut cond = blend_with_weight(&x_tau, &z_tau, masks, k)?;
    let zs;
    let z_source = if dropped {
        cond = cond.zeros_like();
        zs = z_source.zeros_like();
        &zs
    } else {
        z_source
    };
    let pred = denoiser.predict(&z_tau, z_source, &cond, tau)?;
    Ok(LossSample {
        tau,
        dropped,
        loss: pred.mean_squared_difference(&eps)?,
    })
}

/// Deterministic (η = 0) DDIM update from `τ` to `τ_prev`.
pub fn ddim_step(
    z_tau: &LatentTensor,
    eps_pred: &LatentTensor,
    tau: usize,
    tau_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor, DiffusionError> {
    if tau <= tau_prev {
        return Err(DiffusionError::BadStepOrder { tau, tau_prev });
    }
    sched.check(tau)?;
    z_tau.check_same(eps_pred, "ddim_step")?;
    let a = sched.alpha_bar(tau);
    let a_prev = sched.alpha_bar(tau_prev);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    let (pa, pb) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    let data = z_tau
        .data
        .iter()
        .zip(&eps_pred.data)
        .map(|(z, e)| {
            let x0 = (z - sb * e) / sa;
            if tau_prev == 0 {
                x0
            } else {
                pa * x0 + pb * e
            }
        })
        .collect();
    Ok(LatentTensor { data, ..*z_tau })
}

/// `steps` descending timesteps spaced evenly from `T` down to `1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    if steps == 1 {
        return vec![total];
    }
    let mut out: Vec<usize> = (0..steps)
        .map(|i| {
            let t = total as f64 - (total - 1) as f64 * i as f64 / (steps - 1) as f64;
            t.round() as usize
        })
        .collect();
    out.dedup();
    out
}

/// `ε_uncond + s (ε_cond − ε_uncond)`.
pub fn cfg_combine(
    eps_cond: &LatentTensor,
    eps_uncond: &LatentTensor,
    scale: f64,
) -> Result<LatentTensor, DiffusionError> {
    eps_cond.check_same(eps_uncond, "cfg_combine")?;
    if !(scale >= 0.0) {
        return Err(DiffusionError::BadScheduleParams(format!("guidance scale {scale} < 0")));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    let data = eps_cond
        .data
        .iter()
        .zip(&eps_uncond.data)
        .map(|(c, u)| u + scale * (c - u))
        .collect();
    Ok(LatentTensor { data, ..*eps_cond })
}

/// Fixed image-to-latent mapping standing in for a VAE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMapping {
    #[default]
    Identity,
    /// 4×4 average pooling; decoding repeats each latent value over its block.
    #[serde(rename = "avgpool4")]
    AvgPool4,
}

impl LatentMapping {
    pub fn factor(self) -> usize {
        match self {
            LatentMapping::Identity => 1,
            LatentMapping::AvgPool4 => 4,
        }
    }

    pub fn encode(self, frames: &[ImageFrame]) -> Result<LatentTensor, DiffusionError> {
        let full = LatentTensor::from_frames(frames)?;
        let f = self.factor();
        if f == 1 {
            return Ok(full);
        }
        let (h, w) = (full.height.div_ceil(f), full.width.div_ceil(f));
        let mut out = LatentTensor::zeros(full.frames, full.channels, h, w);
        for nc in 0..full.frames * full.channels {
            for y in 0..h {
                for x in 0..w {
                    let (mut s, mut n) = (0.0, 0usize);
                    for yy in y * f..((y + 1) * f).min(full.height) {
                        for xx in x * f..((x + 1) * f).min(full.width) {
                            s += full.data[(nc * full.height + yy) * full.width + xx];
                            n += 1;
                        }
                    }
                    out.data[(nc * h + y) * w + x] = s / n as f64;
                }
            }
        }
        Ok(out)
    }

    pub fn decode(self, latent: &LatentTensor, width: usize, height: usize) -> Vec<ImageFrame> {
        let f = self.factor();
        if f == 1 {
            return latent.to_frames();
        }
        let mut full = LatentTensor::zeros(latent.frames, latent.channels, height, width);
        for nc in 0..latent.frames * latent.channels {
            for y in 0..height {
                for x in 0..width {
                    full.data[(nc * height + y) * width + x] =
                        latent.data[(nc * latent.height + y / f) * latent.width + x / f];
                }
            }
        }
        full.to_frames()
    }
}
