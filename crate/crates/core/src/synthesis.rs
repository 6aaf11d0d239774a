//! Realistic warp-pair synthesis for training data.
//!
//! A target frame is lifted with its depth, rigidly re-posed about the centre
//! of the largest inscribed circle of its largest foreground object, forward
//! rendered with the Z-buffered splatter, then warped back with a slightly
//! jittered inverse transform. The result carries the tearing, stretching and
//! disocclusion holes of a real test-time warp.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{backproject, Intrinsics, Pixel, RigidTransform};
use crate::raster::{DepthFrame, ImageFrame, Mask};
use crate::warp::{forward_warp_with, WarpError, WarpOptions, WarpResult};

pub const MAX_REPOSE_DEG: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("foreground mask has no true pixels")]
    EmptyMask,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no valid depth at the origin pixel ({0}, {1})")]
    InvalidOriginDepth(f64, f64),
    #[error("no valid depth in the frame")]
    NoDepth,
    #[error("invalid re-pose parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Warp(#[from] WarpError),
}

/// Foreground mask with its inscribed-circle origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundSpec {
    pub mask: Mask,
    pub origin_pixel: Pixel,
}

impl ForegroundSpec {
    pub fn from_mask(mask: Mask) -> Result<Self, SynthesisError> {
        let origin_pixel = inscribed_circle_origin(&mask)?;
        Ok(Self { mask, origin_pixel })
    }
}

/// Labels of the largest 4-connected true component, earliest component on ties.
pub fn largest_component(mask: &Mask) -> Option<Vec<bool>> {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![0u32; w * h];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.data[j] && label[j] == 0 {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    (best.0 > 0).then(|| label.iter().map(|l| *l == best.1).collect())
}

/// One-dimensional squared distance transform of a sampled function.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            if f[p].is_infinite() {
                // Replace the infinite parabola outright.
                v[k] = q;
                z[k + 1] = f64::INFINITY;
                break;
            }
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            let d = q as f64 - p as f64;
            d * d + f[p]
        };
    }
}

/// Squared Euclidean distance from each pixel to the nearest pixel outside
/// `inside`, where everything beyond the image border counts as outside.
pub fn squared_distance_to_outside(inside: &[bool], w: usize, h: usize) -> Vec<f64> {
    let (pw, ph) = (w + 2, h + 2);
    let mut grid = vec![0.0; pw * ph];
    for y in 0..h {
        for x in 0..w {
            if inside[y * w + x] {
                grid[(y + 1) * pw + x + 1] = f64::INFINITY;
            }
        }
    }
    let n = pw.max(ph);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..pw {
        for y in 0..ph {
            f[y] = grid[y * pw + x];
        }
        edt_1d(&f[..ph], &mut out[..ph], &mut v, &mut z);
        for y in 0..ph {
            grid[y * pw + x] = out[y];
        }
    }
    for y in 0..ph {
        f[..pw].copy_from_slice(&grid[y * pw..(y + 1) * pw]);
        edt_1d(&f[..pw], &mut out[..pw], &mut v, &mut z);
        grid[y * pw..(y + 1) * pw].copy_from_slice(&out[..pw]);
    }
    let mut res = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            res[y * w + x] = grid[(y + 1) * pw + x + 1];
        }
    }
    res
}

/// Centre of the largest inscribed circle of the largest 4-connected
/// component; ties go to the smallest row-major index.
pub fn inscribed_circle_origin(mask: &Mask) -> Result<Pixel, SynthesisError> {
    let comp = largest_component(mask).ok_or(SynthesisError::EmptyMask)?;
    let dist = squared_distance_to_outside(&comp, mask.width, mask.height);
    let mut best: Option<(usize, f64)> = None;
    for (i, (&c, &d)) in comp.iter().zip(&dist).enumerate() {
        if c && best.is_none_or(|(_, bd)| d > bd) {
            best = Some((i, d));
        }
    }
    let (i, _) = best.ok_or(SynthesisError::EmptyMask)?;
    Ok(Pixel::new((i % mask.width) as f64, (i / mask.width) as f64))
}

fn random_axis<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Re-pose transform about the origin: rotation about a uniform random axis
/// by `Uniform[−30°, 30°]`, translation `~ N(0, (λ D̄)² I₃)`.
pub fn sample_repose<R: Rng + ?Sized>(rng: &mut R, mean_depth: f64, lambda: f64) -> Result<RigidTransform, SynthesisError> {
    if !(mean_depth > 0.0) || !(lambda >= 0.0) {
        return Err(SynthesisError::BadParams(format!(
            "need mean depth > 0 and λ >= 0, got {mean_depth}, {lambda}"
        )));
    }
    let axis = random_axis(rng);
    let angle = rng.random_range(-MAX_REPOSE_DEG..=MAX_REPOSE_DEG).to_radians();
    let n = translation_noise(rng, lambda * mean_depth);
    Ok(RigidTransform::from_axis_angle(axis, angle)
        .expect("unit axis")
        .with_translation(n))
}

fn translation_noise<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let d = Normal::new(0.0, sigma).expect("finite sigma");
    Vector3::new(d.sample(rng), d.sample(rng), d.sample(rng))
}

/// Magnitudes of the back-projection pose jitter δT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    pub rotation_sigma_deg: f64,
    /// Translation std as a fraction of mean depth.
    pub translation_sigma_scale: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            rotation_sigma_deg: 1.0,
            translation_sigma_scale: 0.01,
        }
    }
}

impl JitterConfig {
    pub fn none() -> Self {
        Self {
            rotation_sigma_deg: 0.0,
            translation_sigma_scale: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, mean_depth: f64) -> RigidTransform {
        let axis = random_axis(rng);
        let angle = if self.rotation_sigma_deg > 0.0 {
            Normal::new(0.0, self.rotation_sigma_deg).unwrap().sample(rng).to_radians()
        } else {
            0.0
        };
        let t = translation_noise(rng, self.translation_sigma_scale * mean_depth);
        RigidTransform::from_axis_angle(axis, angle).unwrap().with_translation(t)
    }
}

/// Fully specified re-pose; the translation noise is drawn from `rng_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReposeParams {
    pub axis: Vector3<f64>,
    pub angle_deg: f64,
    pub lambda: f64,
    pub jitter: RigidTransform,
    pub rng_seed: u64,
}

impl ReposeParams {
    pub fn new(axis: Vector3<f64>, angle_deg: f64, lambda: f64, jitter: RigidTransform, rng_seed: u64) -> Result<Self, SynthesisError> {
        if (axis.norm() - 1.0).abs() > 1e-9 {
            return Err(SynthesisError::BadParams(format!("axis norm {} is not 1", axis.norm())));
        }
        if !(angle_deg.abs() <= MAX_REPOSE_DEG) {
            return Err(SynthesisError::BadParams(format!("angle {angle_deg}° outside [-30, 30]")));
        }
        if !(lambda >= 0.0) {
            return Err(SynthesisError::BadParams(format!("λ = {lambda} < 0")));
        }
        Ok(Self {
            axis,
            angle_deg,
            lambda,
            jitter,
            rng_seed,
        })
    }

    /// Zero re-pose: no rotation, no translation, no jitter.
    pub fn identity() -> Self {
        Self {
            axis: Vector3::y(),
            angle_deg: 0.0,
            lambda: 0.0,
            jitter: RigidTransform::identity(),
            rng_seed: 0,
        }
    }

    /// Draws axis, angle and δT from `seed`.
    pub fn sample(seed: u64, mean_depth: f64, lambda: f64, jitter: &JitterConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axis = random_axis(&mut rng);
        let angle_deg = rng.random_range(-MAX_REPOSE_DEG..=MAX_REPOSE_DEG);
        let jitter = jitter.sample(&mut rng, mean_depth);
        Self {
            axis,
            angle_deg,
            lambda,
            jitter,
            rng_seed: rng.random(),
        }
    }
}

/// Everything produced by one synthesis, for manifests and debugging.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutput {
    pub warped: ImageFrame,
    pub mask: Mask,
    /// Forward rendering at the re-posed camera.
    pub reposed: WarpResult,
    pub repose: RigidTransform,
    pub back_transform: RigidTransform,
    pub origin: Vector3<f64>,
    pub mean_depth: f64,
}

pub fn synthesize_warp_pair(
    target: &ImageFrame,
    depth: &DepthFrame,
    k: &Intrinsics,
    fg: &ForegroundSpec,
    params: &ReposeParams,
) -> Result<(ImageFrame, Mask), SynthesisError> {
    let out = synthesize_warp_pair_with(target, depth, k, fg, params, &WarpOptions::default())?;
    Ok((out.warped, out.mask))
}

pub fn synthesize_warp_pair_with(
    target: &ImageFrame,
    depth: &DepthFrame,
    k: &Intrinsics,
    fg: &ForegroundSpec,
    params: &ReposeParams,
    opts: &WarpOptions,
) -> Result<SynthesisOutput, SynthesisError> {
    if target.width != depth.width
        || target.height != depth.height
        || fg.mask.width != target.width
        || fg.mask.height != target.height
    {
        return Err(SynthesisError::DimensionMismatch(format!(
            "image {}x{}, depth {}x{}, mask {}x{}",
            target.width, target.height, depth.width, depth.height, fg.mask.width, fg.mask.height
        )));
    }
    let mean_depth = depth.mean_valid().ok_or(SynthesisError::NoDepth)?;
    let (ox, oy) = (fg.origin_pixel.u, fg.origin_pixel.v);
    let od = depth
        .get(ox as usize, oy as usize)
        .ok_or(SynthesisError::InvalidOriginDepth(ox, oy))?;
    let origin = backproject(fg.origin_pixel, od, k)
        .map_err(|_| SynthesisError::InvalidOriginDepth(ox, oy))?
        .to_vector();

    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let n = translation_noise(&mut rng, params.lambda * mean_depth);
    let rot = RigidTransform::from_axis_angle(params.axis, params.angle_deg.to_radians())
        .map_err(|e| SynthesisError::BadParams(e.to_string()))?
        .about_pivot(&origin);
    let repose = rot.with_translation(rot.translation() + n);

    let reposed = forward_warp_with(target, depth, k, k, &repose, opts)?;
    let back_transform = params.jitter.compose(&repose.invert());
    let back = forward_warp_with(&reposed.image, &reposed.depth, k, k, &back_transform, opts)?;
    Ok(SynthesisOutput {
        warped: back.image,
        mask: back.mask,
        reposed,
        repose,
        back_transform,
        origin,
        mean_depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> bool) -> Mask {
        Mask::new(w, h, (0..w * h).map(|i| f(i % w, i / w)).collect()).unwrap()
    }

    /// Max over component pixels of the min distance to any outside pixel
    /// (image border counts as outside), scanning everything.
    fn brute_origin(comp: &[bool], w: usize, h: usize) -> (usize, f64) {
        let mut best = (usize::MAX, -1.0);
        for i in 0..w * h {
            if !comp[i] {
                continue;
            }
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let mut d = f64::INFINITY;
            for yy in -1..=h as i64 {
                for xx in -1..=w as i64 {
                    let inside = xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h && comp[yy as usize * w + xx as usize];
                    if !inside {
                        d = d.min((x - xx as f64).powi(2) + (y - yy as f64).powi(2));
                    }
                }
            }
            if d > best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn inscribed_examples() {
        let full = Mask::filled(5, 5, true);
        assert_eq!(inscribed_circle_origin(&full).unwrap(), Pixel::new(2.0, 2.0));
        let single = mask_from(10, 10, |x, y| x == 3 && y == 7);
        assert_eq!(inscribed_circle_origin(&single).unwrap(), Pixel::new(3.0, 7.0));
        assert_eq!(
            inscribed_circle_origin(&Mask::filled(4, 4, false)),
            Err(SynthesisError::EmptyMask)
        );
    }

    #[test]
    fn picks_larger_component() {
        // 10-pixel bar and a 40-pixel block.
        let m = mask_from(20, 12, |x, y| (y == 1 && (2..12).contains(&x)) || ((10..18).contains(&x) && (5..10).contains(&y)));
        assert_eq!(m.count(), 50);
        let comp = largest_component(&m).unwrap();
        assert_eq!(comp.iter().filter(|c| **c).count(), 40);
        let (bi, _) = brute_origin(&comp, 20, 12);
        let got = inscribed_circle_origin(&m).unwrap();
        assert_eq!(got, Pixel::new((bi % 20) as f64, (bi / 20) as f64));
        assert!(comp[got.v as usize * 20 + got.u as usize]);
    }

    #[test]
    fn edt_matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let (w, h) = (rng.random_range(1..14), rng.random_range(1..14));
            let m = mask_from(w, h, |_, _| rng.random::<f64>() < 0.7);
            if m.count() == 0 {
                continue;
            }
            let comp = largest_component(&m).unwrap();
            let fast = squared_distance_to_outside(&comp, w, h);
            let (bi, bd) = brute_origin(&comp, w, h);
            let got = inscribed_circle_origin(&m).unwrap();
            assert_eq!(got, Pixel::new((bi % w) as f64, (bi / w) as f64));
            assert_eq!(fast[bi], bd);
        }
    }

    #[test]
    fn repose_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = sample_repose(&mut rng, 3.0, 0.0).unwrap();
        assert_eq!(*t.translation(), Vector3::zeros());
        assert!(t.rotation_angle().to_degrees() <= 30.0 + 1e-9);
        let a = sample_repose(&mut ChaCha8Rng::seed_from_u64(9), 2.0, 0.1).unwrap();
        let b = sample_repose(&mut ChaCha8Rng::seed_from_u64(9), 2.0, 0.1).unwrap();
        assert_eq!(a, b);
        assert!(sample_repose(&mut rng, 0.0, 0.1).is_err());
        assert!(sample_repose(&mut rng, 1.0, -0.1).is_err());
    }

    #[test]
    fn translation_std_matches_lambda_mean_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for _ in 0..n {
            let t = sample_repose(&mut rng, 2.0, 0.1).unwrap();
            for k in 0..3 {
                sums[k] += t.translation()[k];
                sq[k] += t.translation()[k].powi(2);
            }
        }
        for k in 0..3 {
            let mean = sums[k] / n as f64;
            let sd = (sq[k] / n as f64 - mean * mean).sqrt();
            assert!((sd - 0.2).abs() / 0.2 < 0.05, "axis {k}: sd {sd}");
        }
    }

    #[test]
    fn params_validation() {
        let id = RigidTransform::identity();
        assert!(ReposeParams::new(Vector3::new(1.0, 1.0, 0.0), 5.0, 0.1, id, 0).is_err());
        assert!(ReposeParams::new(Vector3::x(), 31.0, 0.1, id, 0).is_err());
        assert!(ReposeParams::new(Vector3::x(), -30.0, 0.1, id, 0).is_ok());
        assert!(ReposeParams::new(Vector3::x(), 3.0, -1.0, id, 0).is_err());
        let p = ReposeParams::sample(5, 3.0, 0.1, &JitterConfig::default());
        assert_eq!(p, ReposeParams::sample(5, 3.0, 0.1, &JitterConfig::default()));
        assert!(p.angle_deg.abs() <= 30.0);
        assert!((p.axis.norm() - 1.0).abs() < 1e-12);
    }
}
