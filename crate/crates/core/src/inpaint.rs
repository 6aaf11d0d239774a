//! Inpainter contract and the bundled implementations.
//!
//! The pipeline only talks to [`Inpainter`]; the trained video model lives
//! behind the bridge. The oracle copies holes from a ground-truth render, the
//! toy model runs a real DDIM loop with a hand-written local denoiser, and the
//! echo leaves holes black (the no-inpaint baseline).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::diffusion::{
    add_noise, blend_with_weight, cfg_combine, ddim_step, ddim_timesteps, noised_condition_with, ConditionIndex,
    DiffusionError, LatentMapping, LatentTensor, NoiseSchedule, TimeWeight,
};
use crate::geometry::CameraModel;
use crate::raster::ImageFrame;
use crate::scene::{render, SceneSpec};
use crate::warp::{mask_density, WarpResult};

#[derive(Debug, Error)]
pub enum InpaintError {
    #[error("embedding dimension {0} must be even and >= 2")]
    BadDim(usize),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("no ground truth available: {0}")]
    MissingTruth(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("bridge: {0}")]
    Bridge(String),
}

/// Sinusoidal frame-index encoding, interleaved `[sin ω₀i, cos ω₀i, sin ω₁i, …]`
/// with frequencies spaced geometrically from 1 down to 10⁻⁴.
pub fn frame_time_embedding(frame_index: usize, dim: usize) -> Result<Vec<f64>, InpaintError> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(InpaintError::BadDim(dim));
    }
    let half = dim / 2;
    let t = frame_index as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let omega = if half == 1 {
            1.0
        } else {
            10000f64.powf(-(k as f64) / (half - 1) as f64)
        };
        out.push((omega * t).sin());
        out.push((omega * t).cos());
    }
    Ok(out)
}

/// One batch of warped frames at a common virtual pose.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintRequest {
    pub warped: Vec<WarpResult>,
    /// The frames the warp started from.
    pub source_frames: Vec<ImageFrame>,
    /// Clip-global frame indices, strictly increasing.
    pub frame_indices: Vec<usize>,
    /// Per-frame pose the warped frames live at; empty when unknown.
    pub cameras: Vec<CameraModel>,
    pub rng_seed: u64,
}

impl InpaintRequest {
    pub fn validate(&self) -> Result<(), InpaintError> {
        let n = self.warped.len();
        if n == 0 {
            return Err(InpaintError::BadRequest("no frames".into()));
        }
        if self.source_frames.len() != n || self.frame_indices.len() != n {
            return Err(InpaintError::BadRequest(format!(
                "{} warped, {} source frames, {} indices",
                n,
                self.source_frames.len(),
                self.frame_indices.len()
            )));
        }
        if !self.cameras.is_empty() && self.cameras.len() != n {
            return Err(InpaintError::BadRequest(format!("{} cameras for {} frames", self.cameras.len(), n)));
        }
        if self.frame_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(InpaintError::BadRequest("frame indices not strictly increasing".into()));
        }
        let first = &self.warped[0].image;
        for (w, s) in self.warped.iter().zip(&self.source_frames) {
            if !w.image.same_shape(first) || !s.same_shape(first) || w.mask.width != first.width || w.mask.height != first.height {
                return Err(InpaintError::BadRequest("frames differ in shape".into()));
            }
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        let masks: Vec<_> = self.warped.iter().map(|w| w.mask.clone()).collect();
        mask_density(&masks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintResponse {
    pub frames: Vec<ImageFrame>,
}

/// One request in flight per instance; use separate instances for parallelism.
pub trait Inpainter: Send {
    fn name(&self) -> String;
    fn inpaint(&mut self, req: &InpaintRequest) -> Result<InpaintResponse, InpaintError>;
}

/// Writes warped pixels over `frames` wherever the warp mask is true.
pub fn impose_known(frames: &mut [ImageFrame], warped: &[WarpResult]) {
    for (f, w) in frames.iter_mut().zip(warped) {
        let c = f.channels;
        for (i, &m) in w.mask.data.iter().enumerate() {
            if m {
                f.data[i * c..(i + 1) * c].copy_from_slice(&w.image.data[i * c..(i + 1) * c]);
            }
        }
    }
}

/// Mask-true pixels from the warp, the rest from `truth`.
pub fn oracle_inpaint(req: &InpaintRequest, truth: &[ImageFrame]) -> Result<InpaintResponse, InpaintError> {
    req.validate()?;
    if truth.len() != req.warped.len() || truth.iter().any(|t| !t.same_shape(&req.warped[0].image)) {
        return Err(InpaintError::MissingTruth(format!(
            "{} truth frames for {} requested",
            truth.len(),
            req.warped.len()
        )));
    }
    let mut frames = truth.to_vec();
    impose_known(&mut frames, &req.warped);
    Ok(InpaintResponse { frames })
}

/// Renders the truth at the request's camera from a synthetic scene.
#[derive(Debug, Clone)]
pub struct OracleInpainter {
    pub scene: SceneSpec,
}

impl Inpainter for OracleInpainter {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn inpaint(&mut self, req: &InpaintRequest) -> Result<InpaintResponse, InpaintError> {
        req.validate()?;
        if req.cameras.is_empty() {
            return Err(InpaintError::MissingTruth("request carries no cameras".into()));
        }
        if let Some(&f) = req.frame_indices.iter().find(|&&f| f >= self.scene.frame_count) {
            return Err(InpaintError::MissingTruth(format!("frame {f} beyond the scene")));
        }
        let truth: Vec<ImageFrame> = req
            .frame_indices
            .par_iter()
            .zip(&req.cameras)
            .map(|(&f, cam)| render(&self.scene, cam, f).image)
            .collect();
        oracle_inpaint(req, &truth)
    }
}

/// Returns the warped frames unchanged: holes stay black.
#[derive(Debug, Clone, Default)]
pub struct EchoInpainter;

impl Inpainter for EchoInpainter {
    fn name(&self) -> String {
        "identity-echo".into()
    }

    fn inpaint(&mut self, req: &InpaintRequest) -> Result<InpaintResponse, InpaintError> {
        req.validate()?;
        // Rounded through the bridge's f32 wire precision, so this is a
        // drop-in reference for an echo adapter behind the bridge.
        let frames = req
            .warped
            .iter()
            .map(|w| {
                let mut f = w.image.clone();
                for v in &mut f.data {
                    *v = (*v as f32 as f64).clamp(0.0, 1.0);
                }
                f
            })
            .collect();
        Ok(InpaintResponse { frames })
    }
}

/// 5×5 Gaussian (σ = 1) used for neighbour diffusion.
const FILL_KERNEL: [f64; 5] = [0.1353352832366127, 0.6065306597126334, 1.0, 0.6065306597126334, 0.1353352832366127];

/// Fills unknown entries of each `w × h` plane by repeated normalized 5×5
/// Gaussian averaging over known neighbours; each pass grows the known set.
/// Planes without any known entry become `fallback`.
pub fn diffuse_fill(planes: &mut [f64], known: &[bool], w: usize, h: usize, fallback: f64) {
    let plane = w * h;
    if plane == 0 {
        return;
    }
    let count = planes.len() / plane;
    let mut k = known.to_vec();
    if !k.iter().any(|v| *v) {
        for (i, v) in planes.iter_mut().enumerate() {
            if !known[i % plane] {
                *v = fallback;
            }
        }
        return;
    }
    let mut frontier: Vec<usize> = (0..plane).filter(|&i| !k[i]).collect();
    let mut update: Vec<(usize, Vec<f64>)> = Vec::new();
    while !frontier.is_empty() {
        update.clear();
        let mut rest = Vec::new();
        for &i in &frontier {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            let mut wsum = 0.0;
            let mut acc = vec![0.0; count];
            for dy in -2i64..=2 {
                let yy = y + dy;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for dx in -2i64..=2 {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    if !k[j] {
                        continue;
                    }
                    let g = FILL_KERNEL[(dy + 2) as usize] * FILL_KERNEL[(dx + 2) as usize];
                    wsum += g;
                    for (p, a) in acc.iter_mut().enumerate() {
                        *a += g * planes[p * plane + j];
                    }
                }
            }
            if wsum > 0.0 {
                acc.iter_mut().for_each(|a| *a /= wsum);
                update.push((i, acc));
            } else {
                rest.push(i);
            }
        }
        for (i, vals) in update.drain(..) {
            k[i] = true;
            for (p, v) in vals.into_iter().enumerate() {
                planes[p * plane + i] = v;
            }
        }
        frontier = rest;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub schedule: NoiseSchedule,
    pub steps: usize,
    pub gamma: f64,
    pub time_weight: TimeWeight,
    pub condition_index: ConditionIndex,
    pub guidance_scale: f64,
    pub mapping: LatentMapping,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            steps: 20,
            gamma: 1.0,
            time_weight: TimeWeight::Linear,
            condition_index: ConditionIndex::Third,
            guidance_scale: 1.0,
            mapping: LatentMapping::Identity,
        }
    }
}

/// DDIM inpainting with a local, training-free denoiser.
///
/// Each step noises the warp latent into `x_τ`, blends it with `z_τ` into
/// `c_τ`, and predicts the clean latent as `c_τ` rescaled to signal level on
/// known pixels with neighbour diffusion into the holes. Known pixels are
/// re-imposed from the (re-noised) warp after every step.
#[derive(Debug, Clone, Default)]
pub struct ToyInpainter {
    pub config: ToyConfig,
}

impl ToyInpainter {
    pub fn new(config: ToyConfig) -> Self {
        Self { config }
    }

    fn clean_estimate(&self, cond: &LatentTensor, known: &[bool], scale: f64) -> LatentTensor {
        let mut x0 = cond.clone();
        let (h, w, c) = (x0.height, x0.width, x0.channels);
        let plane = h * w;
        for n in 0..x0.frames {
            let block = &mut x0.data[n * c * plane..(n + 1) * c * plane];
            let kn = &known[n * plane..(n + 1) * plane];
            for p in 0..c {
                for i in 0..plane {
                    if kn[i] {
                        block[p * plane + i] /= scale;
                    }
                }
            }
            diffuse_fill(block, kn, w, h, 0.5);
        }
        x0
    }
}

fn eps_from_x0(z: &LatentTensor, x0: &LatentTensor, alpha_bar: f64) -> LatentTensor {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z.data.iter().zip(&x0.data).map(|(z, x)| (z - sa * x) / sb).collect();
    LatentTensor { data, ..*z }
}

fn project_known(z: &mut LatentTensor, reference: &LatentTensor, known: &[bool]) {
    let plane = z.height * z.width;
    for n in 0..z.frames {
        for p in 0..z.channels {
            let base = (n * z.channels + p) * plane;
            for i in 0..plane {
                if known[n * plane + i] {
                    z.data[base + i] = reference.data[base + i];
                }
            }
        }
    }
}

impl Inpainter for ToyInpainter {
    fn name(&self) -> String {
        "toy".into()
    }

    fn inpaint(&mut self, req: &InpaintRequest) -> Result<InpaintResponse, InpaintError> {
        req.validate()?;
        let cfg = &self.config;
        let sched = &cfg.schedule;
        let total = sched.total_steps();
        let images: Vec<ImageFrame> = req.warped.iter().map(|w| w.image.clone()).collect();
        let masks: Vec<_> = req.warped.iter().map(|w| w.mask.clone()).collect();
        let (width, height) = (images[0].width, images[0].height);
        let z_w = cfg.mapping.encode(&images)?;
        let shape = z_w.shape();
        let beta = mask_density(&masks);
        let mut rng = ChaCha8Rng::seed_from_u64(req.rng_seed);

        let mut z = LatentTensor::randn(shape, &mut rng);
        let known_probe = blend_with_weight(&z_w, &z, &masks, 0.0)?;
        let known: Vec<bool> = known_probe.mask_channel.iter().map(|m| *m > 0.5).collect();
        let steps = ddim_timesteps(total, cfg.steps.max(1));
        let start = add_noise(&z_w, steps[0], &LatentTensor::randn(shape, &mut rng), sched)?;
        project_known(&mut z, &start, &known);

        for (i, &tau) in steps.iter().enumerate() {
            let prev = steps.get(i + 1).copied().unwrap_or(0);
            let idx = cfg.condition_index.index(tau, total);
            let x_tau = noised_condition_with(&z_w, tau, &LatentTensor::randn(shape, &mut rng), sched, cfg.condition_index)?;
            let k = (cfg.gamma * beta * cfg.time_weight.value(tau, total)).clamp(0.0, 1.0);
            let cond = blend_with_weight(&x_tau, &z, &masks, k)?;
            let a_tau = sched.alpha_bar(tau);
            let scale = k * sched.alpha_bar(idx).sqrt() + (1.0 - k) * a_tau.sqrt();
            let x0 = self.clean_estimate(&cond.blended, &known, scale);
            let mut eps = eps_from_x0(&z, &x0, a_tau);
            if cfg.guidance_scale != 1.0 {
                let uncond = LatentTensor {
                    data: vec![0.5; z.data.len()],
                    ..z
                };
                eps = cfg_combine(&eps, &eps_from_x0(&z, &uncond, a_tau), cfg.guidance_scale)?;
            }
            z = ddim_step(&z, &eps, tau, prev, sched)?;
            let reference = add_noise(&z_w, prev, &LatentTensor::randn(shape, &mut rng), sched)?;
            project_known(&mut z, &reference, &known);
        }

        let mut frames = cfg.mapping.decode(&z, width, height);
        for f in &mut frames {
            f.clamp01();
        }
        impose_known(&mut frames, &req.warped);
        Ok(InpaintResponse { frames })
    }
}
