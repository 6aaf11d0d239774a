//! Spatial-temporal autoregressive inference.
//!
//! Spatially, each frame travels from its source pose to the target along a
//! chain of small hops (warp → inpaint → new depth → realign). Temporally,
//! the clip is processed in overlapping windows whose leading frames are the
//! previous window's finished output.

use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bridge::{bridge_depth, BridgeClient, BridgeInpainter};
use crate::config::{DepthProviderKind, InpainterKind, RunConfig};
use crate::geometry::spline::{slerp_rotation, CatmullRom};
use crate::geometry::{CameraModel, RigidTransform};
use crate::inpaint::{EchoInpainter, InpaintError, InpaintRequest, Inpainter, OracleInpainter, ToyInpainter};
use crate::raster::{DepthFrame, ImageFrame, Mask};
use crate::scene::{render, SceneSpec};
use crate::warp::{forward_warp_with, mask_density, WarpError, WarpOptions, WarpResult};

pub const MANIFEST_SCHEMA: &str = "warp4d-manifest/1";
/// Jointly valid pixels needed for a depth fit.
pub const MIN_ALIGN_PIXELS: usize = 10;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("bad window plan: {0}")]
    BadWindowPlan(String),
    #[error("only {valid} jointly valid depth pixels (need {needed})")]
    InsufficientOverlap { valid: usize, needed: usize },
    #[error("hop {hop}: {source}")]
    Hop {
        hop: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("window {window}: {source}")]
    Window {
        window: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Inpaint(#[from] InpaintError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error("depth provider: {0}")]
    Depth(String),
    #[error("{0}")]
    MissingScene(String),
    #[error("bad input: {0}")]
    BadInput(String),
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for a labelled sub-task.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag.wrapping_add(0x5EED)))
}

/// Poses from source (first) to target (last).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraChain {
    pub cameras: Vec<CameraModel>,
}

impl CameraChain {
    pub fn hop_count(&self) -> usize {
        self.cameras.len() - 1
    }
}

/// `hops + 1` cameras: translation along a Catmull-Rom spline through the two
/// centres, rotation by slerp at the same parameter. Endpoints are the inputs.
pub fn interpolate_chain(src: &CameraModel, dst: &CameraModel, hops: usize) -> CameraChain {
    let hops = hops.max(1);
    let spline = CatmullRom::new(vec![*src.pose.translation(), *dst.pose.translation()]).expect("two points");
    let mut cameras = Vec::with_capacity(hops + 1);
    cameras.push(*src);
    for p in 1..hops {
        let s = p as f64 / hops as f64;
        let r = slerp_rotation(src.pose.rotation(), dst.pose.rotation(), s);
        let pose = RigidTransform::new_orthonormalized(r, spline.eval(s), 1e-6).expect("slerp yields a rotation");
        cameras.push(CameraModel::new(dst.intrinsics, pose));
    }
    cameras.push(*dst);
    CameraChain { cameras }
}

/// Smallest hop count keeping every hop within the rotation (degrees) and
/// optional translation limits.
pub fn auto_hop_count(src: &CameraModel, dst: &CameraModel, max_hop_deg: f64, max_hop_trans: Option<f64>) -> usize {
    let rel = src.relative_to(dst);
    let mut p = (rel.rotation_angle().to_degrees() / max_hop_deg - 1e-9).ceil() as usize;
    if let Some(t) = max_hop_trans {
        let d = (dst.center() - src.center()).norm();
        p = p.max((d / t - 1e-9).ceil() as usize);
    }
    p.max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthAlignment {
    pub scale: f64,
    pub shift: f64,
    pub aligned: DepthFrame,
}

/// Least-squares `(s, t)` minimizing `Σ (s·new + t − ref)²` over pixels where
/// `valid` and both depths are valid.
pub fn align_depth_scale(new_depth: &DepthFrame, ref_depth: &DepthFrame, valid: &Mask) -> Result<DepthAlignment, PipelineError> {
    if new_depth.width != ref_depth.width
        || new_depth.height != ref_depth.height
        || valid.width != new_depth.width
        || valid.height != new_depth.height
    {
        return Err(PipelineError::BadInput("depth alignment shape mismatch".into()));
    }
    let idx: Vec<usize> = (0..valid.data.len())
        .filter(|&i| valid.data[i] && new_depth.valid[i] && ref_depth.valid[i])
        .collect();
    if idx.len() < MIN_ALIGN_PIXELS {
        return Err(PipelineError::InsufficientOverlap {
            valid: idx.len(),
            needed: MIN_ALIGN_PIXELS,
        });
    }
    let n = idx.len() as f64;
    let mx = idx.iter().map(|&i| new_depth.data[i]).sum::<f64>() / n;
    let my = idx.iter().map(|&i| ref_depth.data[i]).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &i in &idx {
        let dx = new_depth.data[i] - mx;
        sxx += dx * dx;
        sxy += dx * (ref_depth.data[i] - my);
    }
    let (scale, shift) = if sxx <= 1e-12 * n * mx.abs().max(1.0).powi(2) {
        (1.0, my - mx)
    } else {
        let s = sxy / sxx;
        (s, my - s * mx)
    };
    let values = (0..new_depth.data.len())
        .map(|i| {
            if new_depth.valid[i] {
                scale * new_depth.data[i] + shift
            } else {
                0.0
            }
        })
        .collect();
    let aligned = DepthFrame::from_values(new_depth.width, new_depth.height, values).expect("sized");
    Ok(DepthAlignment { scale, shift, aligned })
}

/// Overlapping windows of length `L` sharing `m` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowPlan {
    pub window_length: usize,
    pub overlap: usize,
    pub total: usize,
}

impl WindowPlan {
    /// Clips shorter than one window are processed as a single window.
    pub fn new(window_length: usize, overlap: usize, total: usize) -> Result<Self, PipelineError> {
        if overlap == 0 || overlap >= window_length {
            return Err(PipelineError::BadWindowPlan(format!(
                "need 0 < m < L, got L = {window_length}, m = {overlap}"
            )));
        }
        if total == 0 {
            return Err(PipelineError::BadWindowPlan("no frames".into()));
        }
        Ok(Self {
            window_length,
            overlap,
            total,
        })
    }

    /// Window `k` starts at `k (L − m)`; the last one may be shorter so that
    /// each overlap is exactly `m`.
    pub fn segments(&self) -> Vec<Range<usize>> {
        let stride = self.window_length - self.overlap;
        let mut out = Vec::new();
        let mut start = 0;
        loop {
            let end = (start + self.window_length).min(self.total);
            out.push(start..end);
            if end == self.total {
                return out;
            }
            start += stride;
        }
    }
}

/// Runs `denoise` on each window. Later windows receive the previous
/// window's last `m` outputs in place of their first `m` inputs, and those
/// anchors are written back over whatever `denoise` returns for them.
pub fn temporal_windows<T, E, F>(input: &[T], plan: &WindowPlan, mut denoise: F) -> Result<Vec<Vec<T>>, E>
where
    T: Clone,
    E: From<PipelineError>,
    F: FnMut(usize, Range<usize>, &[T]) -> Result<Vec<T>, E>,
{
    if input.len() != plan.total {
        return Err(PipelineError::BadWindowPlan(format!("plan covers {} frames, got {}", plan.total, input.len())).into());
    }
    let m = plan.overlap;
    let mut windows: Vec<Vec<T>> = Vec::new();
    for (k, seg) in plan.segments().into_iter().enumerate() {
        let anchors: Vec<T> = match windows.last() {
            Some(prev) => prev[prev.len() - m..].to_vec(),
            None => vec![],
        };
        let mut batch = anchors.clone();
        batch.extend_from_slice(&input[seg.start + anchors.len()..seg.end]);
        let mut out = denoise(k, seg.clone(), &batch)?;
        if out.len() != seg.len() {
            return Err(PipelineError::BadWindowPlan(format!(
                "window {k} returned {} frames for {}",
                out.len(),
                seg.len()
            ))
            .into());
        }
        for (slot, a) in out.iter_mut().zip(anchors) {
            *slot = a;
        }
        windows.push(out);
    }
    Ok(windows)
}

/// Concatenates window outputs, taking overlap frames from the earlier window.
pub fn stitch_windows<T: Clone>(plan: &WindowPlan, windows: &[Vec<T>]) -> Vec<T> {
    let mut out = Vec::with_capacity(plan.total);
    for (k, w) in windows.iter().enumerate() {
        let skip = if k == 0 { 0 } else { plan.overlap };
        out.extend_from_slice(&w[skip..]);
    }
    out
}

pub fn temporal_expand<T, E, F>(input: &[T], plan: &WindowPlan, denoise: F) -> Result<Vec<T>, E>
where
    T: Clone,
    E: From<PipelineError>,
    F: FnMut(usize, Range<usize>, &[T]) -> Result<Vec<T>, E>,
{
    let windows = temporal_windows(input, plan, denoise)?;
    Ok(stitch_windows(plan, &windows))
}

/// Supplies depth for frames that just reached a new pose.
pub trait DepthProvider: Send {
    fn name(&self) -> String;
    fn depths(
        &mut self,
        frames: &[ImageFrame],
        warped: &[WarpResult],
        cameras: &[CameraModel],
        frame_indices: &[usize],
    ) -> Result<Vec<DepthFrame>, PipelineError>;
}

/// Exact depth rendered from the scene description.
#[derive(Debug, Clone)]
pub struct TruthDepth {
    pub scene: SceneSpec,
}

impl DepthProvider for TruthDepth {
    fn name(&self) -> String {
        "truth".into()
    }

    fn depths(
        &mut self,
        _frames: &[ImageFrame],
        _warped: &[WarpResult],
        cameras: &[CameraModel],
        frame_indices: &[usize],
    ) -> Result<Vec<DepthFrame>, PipelineError> {
        Ok(cameras
            .par_iter()
            .zip(frame_indices)
            .map(|(c, &f)| render(&self.scene, c, f).depth)
            .collect())
    }
}

/// Fills invalid pixels with the median of valid ones in a 5×5 neighbourhood,
/// growing inward pass by pass. `None` if nothing is valid.
pub fn fill_depth_median(depth: &DepthFrame) -> Option<DepthFrame> {
    let (w, h) = (depth.width, depth.height);
    if !depth.valid.iter().any(|v| *v) {
        return None;
    }
    let mut out = depth.clone();
    let mut frontier: Vec<usize> = (0..w * h).filter(|&i| !out.valid[i]).collect();
    let mut buf = Vec::with_capacity(25);
    while !frontier.is_empty() {
        let mut fills = Vec::new();
        let mut rest = Vec::new();
        for &i in &frontier {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            buf.clear();
            for yy in (y - 2).max(0)..=(y + 2).min(h as i64 - 1) {
                for xx in (x - 2).max(0)..=(x + 2).min(w as i64 - 1) {
                    let j = yy as usize * w + xx as usize;
                    if out.valid[j] {
                        buf.push(out.data[j]);
                    }
                }
            }
            if buf.is_empty() {
                rest.push(i);
            } else {
                buf.sort_by(|a, b| a.total_cmp(b));
                fills.push((i, buf[(buf.len() - 1) / 2]));
            }
        }
        for (i, d) in fills {
            out.data[i] = d;
            out.valid[i] = true;
        }
        frontier = rest;
    }
    Some(out)
}

/// Warped depth with disoccluded regions filled from their surroundings.
#[derive(Debug, Clone, Default)]
pub struct PropagatedDepth;

impl DepthProvider for PropagatedDepth {
    fn name(&self) -> String {
        "propagated".into()
    }

    fn depths(
        &mut self,
        _frames: &[ImageFrame],
        warped: &[WarpResult],
        _cameras: &[CameraModel],
        frame_indices: &[usize],
    ) -> Result<Vec<DepthFrame>, PipelineError> {
        warped
            .par_iter()
            .zip(frame_indices)
            .map(|(w, f)| fill_depth_median(&w.depth).ok_or_else(|| PipelineError::Depth(format!("frame {f}: no valid warped depth"))))
            .collect()
    }
}

#[derive(Debug)]
pub struct BridgeDepthProvider {
    pub client: BridgeClient,
}

impl DepthProvider for BridgeDepthProvider {
    fn name(&self) -> String {
        format!("bridge:{}", self.client.endpoint())
    }

    fn depths(
        &mut self,
        frames: &[ImageFrame],
        warped: &[WarpResult],
        cameras: &[CameraModel],
        frame_indices: &[usize],
    ) -> Result<Vec<DepthFrame>, PipelineError> {
        bridge_depth(&mut self.client, frames, warped, cameras, frame_indices).map_err(|e| PipelineError::Depth(e.to_string()))
    }
}

pub fn make_inpainter(kind: &InpainterKind, cfg: &RunConfig, scene: Option<&SceneSpec>) -> Result<Box<dyn Inpainter>, PipelineError> {
    Ok(match kind {
        InpainterKind::Oracle => Box::new(OracleInpainter {
            scene: scene
                .ok_or_else(|| PipelineError::MissingScene("the oracle inpainter needs scene.json".into()))?
                .clone(),
        }),
        InpainterKind::Toy => Box::new(ToyInpainter::new(cfg.toy())),
        InpainterKind::IdentityEcho => Box::new(EchoInpainter),
        InpainterKind::Bridge(ep) => {
            Box::new(BridgeInpainter::connect(ep).map_err(|e| PipelineError::Inpaint(InpaintError::Bridge(e.to_string())))?)
        }
    })
}

pub fn make_depth_provider(kind: &DepthProviderKind, scene: Option<&SceneSpec>) -> Result<Box<dyn DepthProvider>, PipelineError> {
    Ok(match kind {
        DepthProviderKind::Truth => Box::new(TruthDepth {
            scene: scene
                .ok_or_else(|| PipelineError::MissingScene("the truth depth provider needs scene.json".into()))?
                .clone(),
        }),
        DepthProviderKind::Propagated => Box::new(PropagatedDepth),
        DepthProviderKind::Bridge(ep) => Box::new(BridgeDepthProvider {
            client: BridgeClient::connect(ep).map_err(|e| PipelineError::Depth(e.to_string()))?,
        }),
    })
}

/// Frames, depths and poses after some number of hops.
#[derive(Debug, Clone, PartialEq)]
pub struct HopState {
    pub frames: Vec<ImageFrame>,
    pub depths: Vec<DepthFrame>,
    pub cameras: Vec<CameraModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HopRecord {
    pub hop: usize,
    pub seed: u64,
    pub beta: f64,
    pub beta_per_frame: Vec<f64>,
    pub depth_scale: Vec<f64>,
    pub depth_shift: Vec<f64>,
}

/// Moves every frame along its chain, one hop at a time, from the state
/// at the chains' first cameras.
pub fn spatial_expand(
    start: HopState,
    chains: &[CameraChain],
    frame_indices: &[usize],
    inpainter: &mut dyn Inpainter,
    depth_provider: &mut dyn DepthProvider,
    warp: &WarpOptions,
    seed: u64,
) -> Result<(HopState, Vec<HopRecord>), PipelineError> {
    let n = start.frames.len();
    if start.depths.len() != n || chains.len() != n || frame_indices.len() != n {
        return Err(PipelineError::BadInput(format!(
            "{} frames, {} depths, {} chains, {} indices",
            n,
            start.depths.len(),
            chains.len(),
            frame_indices.len()
        )));
    }
    let hops = chains.first().map_or(0, |c| c.hop_count());
    if chains.iter().any(|c| c.hop_count() != hops) {
        return Err(PipelineError::BadInput("chains differ in hop count".into()));
    }
    let mut state = start;
    let mut records = Vec::with_capacity(hops);
    for hop in 1..=hops {
        let wrap = |e: PipelineError| PipelineError::Hop {
            hop,
            source: Box::new(e),
        };
        let next: Vec<CameraModel> = chains.iter().map(|c| c.cameras[hop]).collect();
        let warped = (0..n)
            .into_par_iter()
            .map(|i| {
                let (from, to) = (&state.cameras[i], &next[i]);
                forward_warp_with(&state.frames[i], &state.depths[i], &from.intrinsics, &to.intrinsics, &from.relative_to(to), warp)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| wrap(e.into()))?;
        let hop_seed = derive_seed(seed, hop as u64);
        let req = InpaintRequest {
            warped,
            source_frames: state.frames.clone(),
            frame_indices: frame_indices.to_vec(),
            cameras: next.clone(),
            rng_seed: hop_seed,
        };
        let resp = inpainter.inpaint(&req).map_err(|e| wrap(e.into()))?;
        if resp.frames.len() != n || resp.frames.iter().zip(&req.warped).any(|(f, w)| !f.same_shape(&w.image)) {
            return Err(wrap(PipelineError::Inpaint(InpaintError::BadRequest(
                "inpainter returned frames of the wrong count or shape".into(),
            ))));
        }
        let new_depths = depth_provider
            .depths(&resp.frames, &req.warped, &next, frame_indices)
            .map_err(wrap)?;
        if new_depths.len() != n {
            return Err(wrap(PipelineError::Depth(format!("{} depth maps for {n} frames", new_depths.len()))));
        }
        let aligned = new_depths
            .par_iter()
            .zip(&req.warped)
            .map(|(d, w)| align_depth_scale(d, &w.depth, &w.mask))
            .collect::<Result<Vec<_>, _>>()
            .map_err(wrap)?;
        let masks: Vec<Mask> = req.warped.iter().map(|w| w.mask.clone()).collect();
        records.push(HopRecord {
            hop,
            seed: hop_seed,
            beta: mask_density(&masks),
            beta_per_frame: req.warped.iter().map(|w| w.density()).collect(),
            depth_scale: aligned.iter().map(|a| a.scale).collect(),
            depth_shift: aligned.iter().map(|a| a.shift).collect(),
        });
        state = HopState {
            frames: resp.frames,
            depths: aligned.into_iter().map(|a| a.aligned).collect(),
            cameras: next,
        };
    }
    Ok((state, records))
}

/// A monocular input clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceVideo {
    pub name: String,
    pub frames: Vec<ImageFrame>,
    pub depths: Vec<DepthFrame>,
    pub cameras: Vec<CameraModel>,
    /// Scene description, when the clip is synthetic.
    pub scene: Option<SceneSpec>,
}

impl SourceVideo {
    /// Renders every frame of a synthetic scene from its own cameras.
    pub fn from_scene(scene: &SceneSpec) -> Self {
        let renders: Vec<_> = (0..scene.frame_count).into_par_iter().map(|f| scene.render_source(f)).collect();
        let (frames, depths) = renders.into_iter().map(|r| (r.image, r.depth)).unzip();
        Self {
            name: scene.name.clone(),
            frames,
            depths,
            cameras: (0..scene.frame_count).map(|f| *scene.source_camera(f)).collect(),
            scene: Some(scene.clone()),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let n = self.frames.len();
        if n == 0 {
            return Err(PipelineError::BadInput("empty clip".into()));
        }
        if self.depths.len() != n || self.cameras.len() != n {
            return Err(PipelineError::BadInput(format!(
                "{} frames, {} depths, {} cameras",
                n,
                self.depths.len(),
                self.cameras.len()
            )));
        }
        for (i, ((f, d), c)) in self.frames.iter().zip(&self.depths).zip(&self.cameras).enumerate() {
            if f.width != d.width || f.height != d.height || f.width != c.intrinsics.width || f.height != c.intrinsics.height {
                return Err(PipelineError::BadInput(format!("frame {i}: image, depth and camera sizes disagree")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Frame {
    image: ImageFrame,
    depth: DepthFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowRecord {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub seed: u64,
    pub hops: Vec<HopRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetOutput {
    pub index: usize,
    pub camera: CameraModel,
    pub seed: u64,
    pub hops: usize,
    pub inpainter: String,
    pub frames: Vec<ImageFrame>,
    pub depths: Vec<DepthFrame>,
    /// Each window's output, anchors included.
    pub window_frames: Vec<Vec<ImageFrame>>,
    pub windows: Vec<WindowRecord>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetManifest {
    pub index: usize,
    pub camera: CameraModel,
    pub seed: u64,
    pub hops: usize,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub windows: Vec<WindowRecord>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool_version: String,
    pub source: String,
    pub frame_count: usize,
    pub seed: u64,
    pub inpainter: String,
    pub depth_provider: String,
    pub window_plan: WindowPlan,
    pub config: RunConfig,
    pub targets: Vec<TargetManifest>,
    pub elapsed_ms: f64,
}

#[derive(Debug)]
pub struct RunOutput {
    pub targets: Vec<Result<TargetOutput, PipelineError>>,
    pub manifest: RunManifest,
}

impl RunOutput {
    pub fn all_ok(&self) -> bool {
        self.targets.iter().all(|t| t.is_ok())
    }
}

/// Builds one inpainter per target.
pub type InpainterFactory<'a> = dyn Fn() -> Result<Box<dyn Inpainter>, PipelineError> + Sync + 'a;

fn run_target(
    source: &SourceVideo,
    index: usize,
    target: &CameraModel,
    cfg: &RunConfig,
    plan: &WindowPlan,
    factory: &InpainterFactory<'_>,
) -> Result<TargetOutput, PipelineError> {
    let t0 = Instant::now();
    let seed = derive_seed(cfg.seed, index as u64);
    let p = &cfg.pipeline;
    let hops = match p.hops {
        Some(h) => h,
        None => source
            .cameras
            .iter()
            .map(|c| auto_hop_count(c, target, p.max_hop_deg, p.max_hop_trans))
            .max()
            .unwrap_or(1),
    };
    let chains: Vec<CameraChain> = source.cameras.iter().map(|c| interpolate_chain(c, target, hops)).collect();
    let mut inpainter = factory()?;
    let inpainter_name = inpainter.name();
    let mut depth = make_depth_provider(&p.depth_provider, source.scene.as_ref())?;
    let input: Vec<Frame> = source
        .frames
        .iter()
        .zip(&source.depths)
        .map(|(image, depth)| Frame {
            image: image.clone(),
            depth: depth.clone(),
        })
        .collect();
    let mut records = Vec::new();
    let windows = temporal_windows(&input, plan, |k, seg, batch: &[Frame]| {
        let anchors = if k == 0 { 0 } else { plan.overlap };
        let fresh = seg.start + anchors..seg.end;
        let window_seed = derive_seed(seed, k as u64);
        let start = HopState {
            frames: batch[anchors..].iter().map(|f| f.image.clone()).collect(),
            depths: batch[anchors..].iter().map(|f| f.depth.clone()).collect(),
            cameras: source.cameras[fresh.clone()].to_vec(),
        };
        let indices: Vec<usize> = fresh.clone().collect();
        let (state, hop_records) = spatial_expand(
            start,
            &chains[fresh.clone()],
            &indices,
            inpainter.as_mut(),
            depth.as_mut(),
            &p.warp,
            window_seed,
        )
        .map_err(|e| PipelineError::Window {
            window: k,
            source: Box::new(e),
        })?;
        records.push(WindowRecord {
            index: k,
            start: seg.start,
            end: seg.end,
            seed: window_seed,
            hops: hop_records,
        });
        let mut out: Vec<Frame> = batch[..anchors].to_vec();
        out.extend(
            state
                .frames
                .into_iter()
                .zip(state.depths)
                .map(|(image, depth)| Frame { image, depth }),
        );
        Ok::<_, PipelineError>(out)
    })?;
    let stitched = stitch_windows(plan, &windows);
    Ok(TargetOutput {
        index,
        camera: *target,
        seed,
        hops,
        inpainter: inpainter_name,
        frames: stitched.iter().map(|f| f.image.clone()).collect(),
        depths: stitched.into_iter().map(|f| f.depth).collect(),
        window_frames: windows
            .into_iter()
            .map(|w| w.into_iter().map(|f| f.image).collect())
            .collect(),
        windows: records,
        elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// Renders the clip at each fixed target camera. Targets run in parallel
/// with their own inpainter; a failed target does not stop the others.
pub fn run_trajectory_to_camera(source: &SourceVideo, targets: &[CameraModel], cfg: &RunConfig) -> Result<RunOutput, PipelineError> {
    let scene = source.scene.as_ref();
    let factory = || make_inpainter(&cfg.inpainter, cfg, scene);
    run_trajectory_with(source, targets, cfg, &factory)
}

pub fn run_trajectory_with(
    source: &SourceVideo,
    targets: &[CameraModel],
    cfg: &RunConfig,
    factory: &InpainterFactory<'_>,
) -> Result<RunOutput, PipelineError> {
    let t0 = Instant::now();
    source.validate()?;
    if let Some([w, h]) = cfg.resolution {
        let f = &source.frames[0];
        if (f.width, f.height) != (w, h) {
            return Err(PipelineError::BadInput(format!(
                "source is {}x{} but the config requires {w}x{h}",
                f.width, f.height
            )));
        }
    }
    if targets.is_empty() {
        return Err(PipelineError::BadInput("no target cameras".into()));
    }
    let plan = WindowPlan::new(cfg.pipeline.window_length, cfg.pipeline.overlap, source.frames.len())?;
    let results: Vec<Result<TargetOutput, PipelineError>> = targets
        .par_iter()
        .enumerate()
        .map(|(i, t)| run_target(source, i, t, cfg, &plan, factory))
        .collect();
    let inpainter = results
        .iter()
        .find_map(|r| r.as_ref().ok().map(|t| t.inpainter.clone()))
        .unwrap_or_else(|| cfg.inpainter.to_string());
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        source: source.name.clone(),
        frame_count: source.frames.len(),
        seed: cfg.seed,
        inpainter,
        depth_provider: cfg.pipeline.depth_provider.to_string(),
        window_plan: plan,
        config: cfg.clone(),
        targets: results
            .iter()
            .enumerate()
            .map(|(i, r)| match r {
                Ok(t) => TargetManifest {
                    index: i,
                    camera: t.camera,
                    seed: t.seed,
                    hops: t.hops,
                    status: "ok".into(),
                    error: None,
                    windows: t.windows.clone(),
                    elapsed_ms: t.elapsed_ms,
                },
                Err(e) => TargetManifest {
                    index: i,
                    camera: targets[i],
                    seed: derive_seed(cfg.seed, i as u64),
                    hops: 0,
                    status: "failed".into(),
                    error: Some(e.to_string()),
                    windows: vec![],
                    elapsed_ms: 0.0,
                },
            })
            .collect(),
        elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
    };
    Ok(RunOutput { targets: results, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cam(pose: RigidTransform) -> CameraModel {
        CameraModel::new(Intrinsics::centered(50.0, 32, 24).unwrap(), pose)
    }

    #[test]
    fn chain_examples() {
        let a = cam(RigidTransform::identity());
        let b = cam(RigidTransform::rot_y(0.3).with_translation(Vector3::new(0.5, 0.0, 0.1)));
        let c1 = interpolate_chain(&a, &b, 1);
        assert_eq!(c1.cameras, vec![a, b]);
        let t = cam(RigidTransform::from_translation(0.0, 0.0, 2.0));
        let c2 = interpolate_chain(&a, &t, 2);
        assert_eq!(*c2.cameras[1].pose.translation(), Vector3::new(0.0, 0.0, 1.0));
        let r = cam(RigidTransform::rot_z(std::f64::consts::FRAC_PI_2));
        let mid = interpolate_chain(&a, &r, 2).cameras[1].pose;
        let want = RigidTransform::rot_z(std::f64::consts::FRAC_PI_4);
        assert!(mid.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn chain_endpoints_exact_and_geodesic() {
        let a = cam(RigidTransform::from_axis_angle(Vector3::new(0.3, 1.0, 0.2), 0.4)
            .unwrap()
            .with_translation(Vector3::new(0.1, -0.2, 0.3)));
        let b = cam(RigidTransform::from_axis_angle(Vector3::new(-0.5, 0.2, 1.0), 1.1)
            .unwrap()
            .with_translation(Vector3::new(-1.0, 0.4, 2.0)));
        for p in 1..8 {
            let c = interpolate_chain(&a, &b, p);
            assert_eq!(c.cameras.len(), p + 1);
            assert_eq!(c.cameras[0], a);
            assert_eq!(c.cameras[p], b);
            let steps: Vec<f64> = c.cameras.windows(2).map(|w| w[0].relative_to(&w[1]).rotation_angle()).collect();
            for s in &steps {
                assert!((s - steps[0]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn auto_hops_respects_limits() {
        let a = cam(RigidTransform::identity());
        let b = cam(RigidTransform::rot_y(10f64.to_radians()));
        assert_eq!(auto_hop_count(&a, &b, 5.0, None), 2);
        assert_eq!(auto_hop_count(&a, &b, 3.0, None), 4);
        assert_eq!(auto_hop_count(&a, &a, 5.0, None), 1);
        let t = cam(RigidTransform::from_translation(1.0, 0.0, 0.0));
        assert_eq!(auto_hop_count(&a, &t, 5.0, Some(0.3)), 4);
    }

    fn depth(vals: Vec<f64>) -> DepthFrame {
        DepthFrame::from_values(vals.len(), 1, vals).unwrap()
    }

    #[test]
    fn alignment_examples() {
        let r: Vec<f64> = (0..20).map(|i| 1.0 + 0.1 * i as f64).collect();
        let all = Mask::filled(20, 1, true);
        let a = align_depth_scale(&depth(r.clone()), &depth(r.clone()), &all).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-9 && a.shift.abs() < 1e-9);
        let n: Vec<f64> = r.iter().map(|v| 2.0 * v + 3.0).collect();
        let b = align_depth_scale(&depth(n), &depth(r.clone()), &all).unwrap();
        assert!((b.scale - 0.5).abs() < 1e-9 && (b.shift + 1.5).abs() < 1e-9);
        for (x, y) in b.aligned.data.iter().zip(&r) {
            assert!((x - y).abs() < 1e-9);
        }
        let few = Mask::new(20, 1, (0..20).map(|i| i < 9).collect()).unwrap();
        assert!(matches!(
            align_depth_scale(&depth(r.clone()), &depth(r.clone()), &few),
            Err(PipelineError::InsufficientOverlap { valid: 9, .. })
        ));
        let flat = align_depth_scale(&depth(vec![2.0; 20]), &depth(r.clone()), &all).unwrap();
        assert_eq!(flat.scale, 1.0);
        let mean = r.iter().sum::<f64>() / 20.0;
        assert!((flat.shift - (mean - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn alignment_noisy_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let new: Vec<f64> = (0..10_000).map(|i| 1.0 + (i % 97) as f64 * 0.03).collect();
        let r: Vec<f64> = new.iter().map(|v| 2.0 * v + noise.sample(&mut rng)).collect();
        let a = align_depth_scale(
            &DepthFrame::from_values(100, 100, new).unwrap(),
            &DepthFrame::from_values(100, 100, r).unwrap(),
            &Mask::filled(100, 100, true),
        )
        .unwrap();
        assert!((1.99..=2.01).contains(&a.scale), "{}", a.scale);
    }

    #[test]
    fn window_plans() {
        let p = WindowPlan::new(16, 4, 28).unwrap();
        assert_eq!(p.segments(), vec![0..16, 12..28]);
        assert_eq!(WindowPlan::new(16, 4, 16).unwrap().segments(), vec![0..16]);
        assert_eq!(WindowPlan::new(16, 4, 30).unwrap().segments(), vec![0..16, 12..28, 24..30]);
        assert_eq!(WindowPlan::new(16, 4, 9).unwrap().segments(), vec![0..9]);
        assert!(WindowPlan::new(16, 16, 28).is_err());
        assert!(WindowPlan::new(16, 0, 28).is_err());
        for n in 1..80 {
            let p = WindowPlan::new(8, 3, n).unwrap();
            let segs = p.segments();
            let mut fresh = 0;
            for (k, s) in segs.iter().enumerate() {
                if k > 0 {
                    assert_eq!(segs[k - 1].end - s.start, 3);
                }
                fresh += s.len() - if k == 0 { 0 } else { 3 };
            }
            assert_eq!(fresh, n);
        }
    }

    #[test]
    fn temporal_identity_and_overlap() {
        let input: Vec<u32> = (0..28).collect();
        let plan = WindowPlan::new(16, 4, 28).unwrap();
        let out = temporal_expand(&input, &plan, |_, _, b: &[u32]| Ok::<_, PipelineError>(b.to_vec())).unwrap();
        assert_eq!(out, input);
        let windows = temporal_windows(&input, &plan, |k, _, b: &[u32]| {
            Ok::<_, PipelineError>(b.iter().map(|v| v * 10 + k as u32).collect())
        })
        .unwrap();
        assert_eq!(windows[0][12..16], windows[1][..4]);
        let single = temporal_windows(&input[..16], &WindowPlan::new(16, 4, 16).unwrap(), |_, _, b: &[u32]| {
            Ok::<_, PipelineError>(b.to_vec())
        })
        .unwrap();
        assert_eq!(single.len(), 1);
        let bad = temporal_expand(&input, &plan, |_, _, b: &[u32]| Ok::<_, PipelineError>(b[1..].to_vec()));
        assert!(bad.is_err());
    }

    #[test]
    fn median_fill() {
        let mut d = DepthFrame::constant(6, 6, 2.0);
        d.set(2, 2, None);
        d.set(3, 3, None);
        let f = fill_depth_median(&d).unwrap();
        assert!(f.valid.iter().all(|v| *v));
        assert_eq!(f.get(2, 2), Some(2.0));
        assert!(fill_depth_median(&DepthFrame::invalid(3, 3)).is_none());
    }

    #[test]
    fn seeds_differ_by_tag() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
