//! Reconstruction metrics: PSNR and Gaussian-windowed SSIM.
//!
//! LPIPS is deliberately not provided; reports say so explicitly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::raster::ImageFrame;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const LPIPS_NOTE: &str = "LPIPS excluded: not computed by this tool";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image {width}x{height} smaller than the {window}x{window} window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("bad metric parameter: {0}")]
    BadParam(String),
}

fn check_shape(a: &ImageFrame, b: &ImageFrame) -> Result<(), MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageFrame, b: &ImageFrame) -> Result<f64, MetricError> {
    check_shape(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

/// `10 log10(peak² / MSE)`, `+∞` for identical frames.
pub fn psnr(a: &ImageFrame, b: &ImageFrame, peak: f64) -> Result<f64, MetricError> {
    if !(peak > 0.0) {
        return Err(MetricError::BadParam(format!("peak {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// SSIM with the standard constants, σ = 1.5, data range 1.
pub fn ssim(a: &ImageFrame, b: &ImageFrame) -> Result<f64, MetricError> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2)
}

/// Gaussian-windowed SSIM over the valid region, averaged over pixels and
/// channels.
pub fn ssim_with(a: &ImageFrame, b: &ImageFrame, window: usize, k1: f64, k2: f64) -> Result<f64, MetricError> {
    check_shape(a, b)?;
    if window == 0 {
        return Err(MetricError::BadParam("window 0".into()));
    }
    if a.width < window || a.height < window {
        return Err(MetricError::TooSmall {
            width: a.width,
            height: a.height,
            window,
        });
    }
    let kern = gaussian_kernel(window, SSIM_SIGMA);
    let (c1, c2) = ((k1 * 1.0f64).powi(2), (k2 * 1.0f64).powi(2));
    let (w, h, ch) = (a.width, a.height, a.channels);
    let per_channel: Vec<(f64, usize)> = (0..ch)
        .into_par_iter()
        .map(|c| {
            let pa: Vec<f64> = (0..w * h).map(|i| a.data[i * ch + c]).collect();
            let pb: Vec<f64> = (0..w * h).map(|i| b.data[i * ch + c]).collect();
            let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
            let mu_a = filter_valid(&pa, w, h, &kern);
            let mu_b = filter_valid(&pb, w, h, &kern);
            let s_aa = filter_valid(&prod(&pa, &pa), w, h, &kern);
            let s_bb = filter_valid(&prod(&pb, &pb), w, h, &kern);
            let s_ab = filter_valid(&prod(&pa, &pb), w, h, &kern);
            let mut sum = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = s_aa[i] - ma * ma;
                let vb = s_bb[i] - mb * mb;
                let cov = s_ab[i] - ma * mb;
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            (sum, mu_a.len())
        })
        .collect();
    let (s, n) = per_channel.iter().fold((0.0, 0), |acc, (s, n)| (acc.0 + s, acc.1 + n));
    Ok(s / n as f64)
}

/// Serializes `+∞` as the string `"inf"` since JSON has no infinity.
pub fn serialize_db<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn deserialize_db<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Str(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Db::Str(s) => Err(serde::de::Error::custom(format!("bad dB value {s:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetric {
    pub frame: usize,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub frames: Vec<FrameMetric>,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl SceneMetrics {
    pub fn min_psnr(&self) -> f64 {
        self.frames.iter().map(|f| f.psnr).fold(f64::INFINITY, f64::min)
    }

    pub fn min_ssim(&self) -> f64 {
        self.frames.iter().map(|f| f.ssim).fold(f64::INFINITY, f64::min)
    }
}

/// Per-frame, per-scene and averaged metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenes: Vec<SceneMetrics>,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub average_psnr: f64,
    pub average_ssim: f64,
    pub lpips: String,
}

/// Evaluates one scene's frame pairs in parallel.
pub fn evaluate_scene(name: &str, predicted: &[ImageFrame], truth: &[ImageFrame]) -> Result<SceneMetrics, MetricError> {
    if predicted.len() != truth.len() {
        return Err(MetricError::ShapeMismatch(format!(
            "{} predicted frames vs {} reference frames",
            predicted.len(),
            truth.len()
        )));
    }
    let frames = predicted
        .par_iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (p, t))| {
            Ok(FrameMetric {
                frame: i,
                psnr: psnr(p, t, 1.0)?,
                ssim: ssim(p, t)?,
            })
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    let n = frames.len().max(1) as f64;
    Ok(SceneMetrics {
        scene: name.to_string(),
        mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        frames,
    })
}

impl MetricReport {
    pub fn new(scenes: Vec<SceneMetrics>) -> Self {
        let n = scenes.len().max(1) as f64;
        Self {
            average_psnr: scenes.iter().map(|s| s.mean_psnr).sum::<f64>() / n,
            average_ssim: scenes.iter().map(|s| s.mean_ssim).sum::<f64>() / n,
            scenes,
            lpips: LPIPS_NOTE.to_string(),
        }
    }

    /// Plain-text table with one column per scene plus the average.
    pub fn table(&self) -> String {
        let fmt_db = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v:.2}") };
        let mut head = format!("{:<8}", "metric");
        let mut p = format!("{:<8}", "PSNR↑");
        let mut s = format!("{:<8}", "SSIM↑");
        for sc in &self.scenes {
            head.push_str(&format!(" {:>10}", sc.scene));
            p.push_str(&format!(" {:>10}", fmt_db(sc.mean_psnr)));
            s.push_str(&format!(" {:>10.3}", sc.mean_ssim));
        }
        head.push_str(&format!(" {:>10}", "Avg."));
        p.push_str(&format!(" {:>10}", fmt_db(self.average_psnr)));
        s.push_str(&format!(" {:>10.3}", self.average_ssim));
        format!("{head}\n{p}\n{s}\n({})\n", self.lpips)
    }
}
