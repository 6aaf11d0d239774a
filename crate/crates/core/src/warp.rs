//! Depth-guided forward warping.
//!
//! Every valid source pixel is lifted with its depth, moved by the relative
//! transform and re-projected into the destination camera, then splatted onto
//! the surrounding integer pixels. A per-destination Z-buffer keeps only the
//! contributions whose depth lies within a relative tolerance of the nearest
//! one; accumulated color is normalized by accumulated weight.
//!
//! Projection runs in parallel over fixed row bands, but contributions are
//! accumulated serially in source row-major order, so output is bit-identical
//! for any worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{backproject_unchecked, Intrinsics, Pixel, RigidTransform, DEFAULT_EPS_W};
use crate::raster::{DepthFrame, ImageFrame, Mask};

/// Fractional offsets closer than this to a pixel center snap onto it.
const SNAP_EPS: f64 = 1e-9;
const BAND_ROWS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WarpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplatMode {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarpOptions {
    pub mode: SplatMode,
    /// Relative Z-buffer merge tolerance, `|z − z_min| / z_min`.
    pub z_tol: f64,
    /// Destination pixels with less accumulated weight are masked out.
    pub w_min: f64,
    pub eps_w: f64,
}

impl Default for WarpOptions {
    fn default() -> Self {
        Self {
            mode: SplatMode::Bilinear,
            z_tol: 1e-2,
            w_min: 1e-4,
            eps_w: DEFAULT_EPS_W,
        }
    }
}

impl WarpOptions {
    pub fn nearest() -> Self {
        Self {
            mode: SplatMode::Nearest,
            ..Self::default()
        }
    }
}

/// Warped frame, visibility mask and warped depth.
///
/// Where `mask` is false the image is exactly zero and depth is invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub image: ImageFrame,
    pub mask: Mask,
    pub depth: DepthFrame,
}

impl WarpResult {
    pub fn density(&self) -> f64 {
        mask_density(std::slice::from_ref(&self.mask))
    }

    /// A warp that observed everything: the frame itself with a full mask.
    pub fn full(image: ImageFrame, depth: DepthFrame) -> Self {
        let mask = Mask::filled(image.width, image.height, true);
        Self { image, mask, depth }
    }
}

#[derive(Clone, Copy)]
struct Splat {
    dst: u32,
    src: u32,
    weight: f64,
    z: f64,
}

pub fn forward_warp(
    src: &ImageFrame,
    depth: &DepthFrame,
    k_src: &Intrinsics,
    k_dst: &Intrinsics,
    t: &RigidTransform,
) -> Result<WarpResult, WarpError> {
    forward_warp_with(src, depth, k_src, k_dst, t, &WarpOptions::default())
}

pub fn forward_warp_with(
    src: &ImageFrame,
    depth: &DepthFrame,
    k_src: &Intrinsics,
    k_dst: &Intrinsics,
    t: &RigidTransform,
    opts: &WarpOptions,
) -> Result<WarpResult, WarpError> {
    if src.width != depth.width || src.height != depth.height {
        return Err(WarpError::DimensionMismatch(format!(
            "image {}x{} vs depth {}x{}",
            src.width, src.height, depth.width, depth.height
        )));
    }
    if k_src.width != src.width || k_src.height != src.height {
        return Err(WarpError::DimensionMismatch(format!(
            "source intrinsics {}x{} vs image {}x{}",
            k_src.width, k_src.height, src.width, src.height
        )));
    }
    let splats = project_splats(depth, k_src, k_dst, t, opts);
    Ok(accumulate(&splats, &src.data, src.channels, k_dst, opts))
}

/// Warps the depth raster itself; the output image is the single-channel
/// warped `z`.
pub fn forward_warp_depth(
    depth: &DepthFrame,
    k_src: &Intrinsics,
    k_dst: &Intrinsics,
    t: &RigidTransform,
) -> Result<WarpResult, WarpError> {
    forward_warp_depth_with(depth, k_src, k_dst, t, &WarpOptions::default())
}

pub fn forward_warp_depth_with(
    depth: &DepthFrame,
    k_src: &Intrinsics,
    k_dst: &Intrinsics,
    t: &RigidTransform,
    opts: &WarpOptions,
) -> Result<WarpResult, WarpError> {
    if k_src.width != depth.width || k_src.height != depth.height {
        return Err(WarpError::DimensionMismatch(format!(
            "source intrinsics {}x{} vs depth {}x{}",
            k_src.width, k_src.height, depth.width, depth.height
        )));
    }
    let splats = project_splats(depth, k_src, k_dst, t, opts);
    let mut res = accumulate(&splats, &[], 0, k_dst, opts);
    res.image = ImageFrame {
        width: k_dst.width,
        height: k_dst.height,
        channels: 1,
        data: res.depth.data.clone(),
    };
    Ok(res)
}

/// β: fraction of true entries over a whole stack of masks.
pub fn mask_density(masks: &[Mask]) -> f64 {
    let total: usize = masks.iter().map(|m| m.data.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let on: usize = masks.iter().map(Mask::count).sum();
    on as f64 / total as f64
}

fn snap(f: f64) -> (i64, f64) {
    let base = f.floor();
    let frac = f - base;
    if frac < SNAP_EPS {
        (base as i64, 0.0)
    } else if frac > 1.0 - SNAP_EPS {
        (base as i64 + 1, 0.0)
    } else {
        (base as i64, frac)
    }
}

fn project_splats(
    depth: &DepthFrame,
    k_src: &Intrinsics,
    k_dst: &Intrinsics,
    t: &RigidTransform,
    opts: &WarpOptions,
) -> Vec<Splat> {
    let (w, h) = (depth.width, depth.height);
    let (dw, dh) = (k_dst.width as i64, k_dst.height as i64);
    let rows: Vec<usize> = (0..h).step_by(BAND_ROWS).collect();
    let bands: Vec<Vec<Splat>> = rows
        .par_iter()
        .map(|&y0| {
            let mut out = Vec::new();
            for y in y0..(y0 + BAND_ROWS).min(h) {
                for x in 0..w {
                    let i = y * w + x;
                    if !depth.valid[i] {
                        continue;
                    }
                    let p = backproject_unchecked(Pixel::new(x as f64, y as f64), depth.data[i], k_src);
                    let q = t.transform_point(p);
                    if !(q.z > opts.eps_w) {
                        continue;
                    }
                    let u = k_dst.fx * q.x / q.z + k_dst.cx;
                    let v = k_dst.fy * q.y / q.z + k_dst.cy;
                    if !u.is_finite() || !v.is_finite() {
                        continue;
                    }
                    let mut push = |px: i64, py: i64, weight: f64| {
                        if weight > 0.0 && px >= 0 && py >= 0 && px < dw && py < dh {
                            out.push(Splat {
                                dst: (py * dw + px) as u32,
                                src: i as u32,
                                weight,
                                z: q.z,
                            });
                        }
                    };
                    match opts.mode {
                        SplatMode::Nearest => push(u.round() as i64, v.round() as i64, 1.0),
                        SplatMode::Bilinear => {
                            let (x0, fx) = snap(u);
                            let (y0, fy) = snap(v);
                            push(x0, y0, (1.0 - fx) * (1.0 - fy));
                            push(x0 + 1, y0, fx * (1.0 - fy));
                            push(x0, y0 + 1, (1.0 - fx) * fy);
                            push(x0 + 1, y0 + 1, fx * fy);
                        }
                    }
                }
            }
            out
        })
        .collect();
    bands.concat()
}

fn accumulate(
    splats: &[Splat],
    colors: &[f64],
    channels: usize,
    k_dst: &Intrinsics,
    opts: &WarpOptions,
) -> WarpResult {
    let n = k_dst.width * k_dst.height;
    let mut z_min = vec![f64::INFINITY; n];
    for s in splats {
        let d = s.dst as usize;
        if s.z < z_min[d] {
            z_min[d] = s.z;
        }
    }
    let mut wsum = vec![0.0; n];
    let mut zsum = vec![0.0; n];
    let mut csum = vec![0.0; n * channels];
    for s in splats {
        let d = s.dst as usize;
        if (s.z - z_min[d]) / z_min[d] > opts.z_tol {
            continue;
        }
        wsum[d] += s.weight;
        zsum[d] += s.weight * s.z;
        let si = s.src as usize * channels;
        for c in 0..channels {
            csum[d * channels + c] += s.weight * colors[si + c];
        }
    }
    let mut image = ImageFrame::zeros(k_dst.width, k_dst.height, channels.max(1));
    let mut mask = Mask::filled(k_dst.width, k_dst.height, false);
    let mut depth = DepthFrame::invalid(k_dst.width, k_dst.height);
    for d in 0..n {
        if wsum[d] < opts.w_min || wsum[d] == 0.0 {
            continue;
        }
        mask.data[d] = true;
        depth.data[d] = zsum[d] / wsum[d];
        depth.valid[d] = true;
        for c in 0..channels {
            image.data[d * channels + c] = (csum[d * channels + c] / wsum[d]).clamp(0.0, 1.0);
        }
    }
    if channels == 0 {
        image.channels = 1;
    }
    WarpResult { image, mask, depth }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, RigidTransform};
    use nalgebra::Vector3;

    fn k(w: usize, h: usize) -> Intrinsics {
        Intrinsics::new(20.0, 20.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap()
    }

    fn ramp(w: usize, h: usize, c: usize) -> ImageFrame {
        let data = (0..w * h * c).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        ImageFrame::new(w, h, c, data).unwrap()
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let (w, h) = (13, 9);
        let img = ramp(w, h, 3);
        let depth = DepthFrame::constant(w, h, 2.5);
        let r = forward_warp(&img, &depth, &k(w, h), &k(w, h), &RigidTransform::identity()).unwrap();
        assert_eq!(r.image, img);
        assert!(r.mask.data.iter().all(|m| *m));
        assert_eq!(r.depth, depth);
    }

    #[test]
    fn one_pixel_shift_right() {
        let (w, h) = (10, 6);
        let kk = k(w, h);
        let d = 3.0;
        let img = ramp(w, h, 1);
        let depth = DepthFrame::constant(w, h, d);
        let t = RigidTransform::from_translation(d / kk.fx, 0.0, 0.0);
        let r = forward_warp(&img, &depth, &kk, &kk, &t).unwrap();
        for y in 0..h {
            assert!(!r.mask.get(0, y));
            assert_eq!(r.image.pixel(0, y), &[0.0]);
            for x in 1..w {
                assert!(r.mask.get(x, y));
                assert!((r.image.pixel(x, y)[0] - img.pixel(x - 1, y)[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zbuffer_occlusion_two_mappers() {
        // Depth 1 and depth 2 pixels both reach destination pixel 2 under a pure rotation-free shift.
        let kk = Intrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 1).unwrap();
        let img = ImageFrame::new(4, 1, 1, vec![0.1, 0.7, 0.0, 0.0]).unwrap();
        // u' = u + tx/z: pixel 0 (z=1) -> 0 + 2 = 2 ; pixel 1 (z=2) -> 1 + 2/2 = 2.
        let depth = DepthFrame::from_values(4, 1, vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let t = RigidTransform::from_translation(2.0, 0.0, 0.0);
        let r = forward_warp(&img, &depth, &kk, &kk, &t).unwrap();
        assert_eq!(r.image.pixel(2, 0), &[0.1]);
        assert_eq!(r.depth.get(2, 0), Some(1.0));
        assert_eq!(r.mask.count(), 1);
    }

    #[test]
    fn depth_warp_examples() {
        let (w, h) = (12, 8);
        let kk = k(w, h);
        let depth = DepthFrame::constant(w, h, 4.0);
        let r = forward_warp_depth(&depth, &kk, &kk, &RigidTransform::identity()).unwrap();
        assert_eq!(r.depth, depth);
        assert!(r.mask.data.iter().all(|m| *m));

        // Camera moves toward the plane by 0.5: points shift to z - 0.5.
        let t = RigidTransform::from_translation(0.0, 0.0, -0.5);
        let r = forward_warp_depth(&depth, &kk, &kk, &t).unwrap();
        assert!(r.mask.count() > 0);
        for (d, v) in r.depth.data.iter().zip(&r.depth.valid) {
            if *v {
                assert!((d - 3.5).abs() < 1e-12);
            }
        }

        // Everything pushed behind the camera.
        let t = RigidTransform::from_translation(0.0, 0.0, -5.0);
        let r = forward_warp_depth(&depth, &kk, &kk, &t).unwrap();
        assert_eq!(r.mask.count(), 0);
        assert!(r.image.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let img = ramp(4, 4, 1);
        let depth = DepthFrame::constant(4, 3, 1.0);
        assert!(matches!(
            forward_warp(&img, &depth, &k(4, 4), &k(4, 4), &RigidTransform::identity()),
            Err(WarpError::DimensionMismatch(_))
        ));
        let depth = DepthFrame::constant(4, 4, 1.0);
        assert!(forward_warp(&img, &depth, &k(5, 4), &k(4, 4), &RigidTransform::identity()).is_err());
    }

    #[test]
    fn invalid_depth_is_skipped() {
        let img = ramp(4, 4, 1);
        let mut depth = DepthFrame::constant(4, 4, 1.0);
        depth.set(1, 1, None);
        let r = forward_warp(&img, &depth, &k(4, 4), &k(4, 4), &RigidTransform::identity()).unwrap();
        assert!(!r.mask.get(1, 1));
        assert_eq!(r.mask.count(), 15);
    }

    #[test]
    fn mask_density_examples() {
        assert_eq!(mask_density(&[Mask::filled(3, 4, true)]), 1.0);
        assert_eq!(mask_density(&[Mask::filled(3, 4, false)]), 0.0);
        let mut m = Mask::filled(3, 4, false);
        m.data[0] = true;
        m.data[5] = true;
        m.data[11] = true;
        assert_eq!(mask_density(&[m]), 0.25);
        let stack = [Mask::filled(2, 2, true), Mask::filled(2, 2, false)];
        assert_eq!(mask_density(&stack), 0.5);
    }

    #[test]
    fn masked_pixels_are_black_and_results_independent_of_threads() {
        let (w, h) = (32, 24);
        let kk = k(w, h);
        let img = ramp(w, h, 3);
        let data = (0..w * h).map(|i| 1.0 + (i % 7) as f64 * 0.3).collect();
        let depth = DepthFrame::from_values(w, h, data).unwrap();
        let t = RigidTransform::from_axis_angle(Vector3::new(0.3, 1.0, 0.1), 0.2)
            .unwrap()
            .with_translation(Vector3::new(0.1, -0.05, 0.2));
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| forward_warp(&img, &depth, &kk, &kk, &t).unwrap());
        let b = many.install(|| forward_warp(&img, &depth, &kk, &kk, &t).unwrap());
        assert_eq!(a, b);
        for i in 0..w * h {
            if !a.mask.data[i] {
                assert!(a.image.data[i * 3..i * 3 + 3].iter().all(|v| *v == 0.0));
                assert!(!a.depth.valid[i]);
            }
        }
    }
}
