//! Procedural multi-view dynamic scenes with exact depth.
//!
//! Scenes are rendered by analytic ray casting against planes, spheres and
//! boxes. Each primitive follows a C¹ Catmull-Rom path over the clip, and
//! textures are soft checkerboards built from `cos(πu/c)·cos(πv/c)` so that
//! they are mirror-symmetric about each primitive's local origin.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::spline::CatmullRom;
use crate::geometry::{CameraModel, Intrinsics, RigidTransform};
use crate::raster::{DepthFrame, ImageFrame, Mask};

/// Closest allowed depth for any primitive in any camera.
pub const MIN_SCENE_DEPTH: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    /// Rectangle in the local `z = 0` plane.
    Plane { half_width: f64, half_height: f64 },
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    /// Checker cell size in metres of surface distance.
    pub cell: f64,
    /// Edge steepness; larger values give crisper checker edges.
    pub sharpness: f64,
}

impl Texture {
    pub fn eval(&self, u: f64, v: f64) -> [f64; 3] {
        let pi = std::f64::consts::PI;
        let s = (pi * u / self.cell).cos() * (pi * v / self.cell).cos();
        let t = 0.5 + 0.5 * (self.sharpness * s).clamp(-1.0, 1.0);
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = self.color_a[c] + (self.color_b[c] - self.color_a[c]) * t;
        }
        out
    }
}

/// Rigid motion: Catmull-Rom through evenly spaced keyframes over the clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub positions: Vec<[f64; 3]>,
    /// Yaw about the local vertical axis, degrees, per keyframe.
    pub yaw_deg: Vec<f64>,
    /// Fixed orientation applied before the yaw: axis and angle in degrees.
    #[serde(default)]
    pub tilt: Option<([f64; 3], f64)>,
}

impl Motion {
    pub fn fixed(position: [f64; 3]) -> Self {
        Self {
            positions: vec![position],
            yaw_deg: vec![0.0],
            tilt: None,
        }
    }

    pub fn linear(from: [f64; 3], to: [f64; 3], yaw_from: f64, yaw_to: f64) -> Self {
        Self {
            positions: vec![from, to],
            yaw_deg: vec![yaw_from, yaw_to],
            tilt: None,
        }
    }

    pub fn with_tilt(mut self, axis: [f64; 3], deg: f64) -> Self {
        self.tilt = Some((axis, deg));
        self
    }

    /// Object-to-world transform at clip parameter `s ∈ [0, 1]`.
    pub fn pose(&self, s: f64) -> RigidTransform {
        let pos = CatmullRom::new(self.positions.iter().map(|p| Vector3::from(*p)).collect())
            .map(|c| c.eval(s))
            .unwrap_or_else(Vector3::zeros);
        let yaw = CatmullRom::new(self.yaw_deg.iter().map(|y| Vector3::new(*y, 0.0, 0.0)).collect())
            .map(|c| c.eval(s).x)
            .unwrap_or(0.0);
        let mut r = RigidTransform::rot_y(yaw.to_radians());
        if let Some((axis, deg)) = self.tilt {
            if let Ok(t) = RigidTransform::from_axis_angle(Vector3::from(axis), deg.to_radians()) {
                r = r.compose(&t);
            }
        }
        r.with_translation(pos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
    pub motion: Motion,
    /// Foreground primitives make up the object mask.
    pub foreground: bool,
}

struct Hit {
    t: f64,
    u: f64,
    v: f64,
}

impl Primitive {
    /// Nearest positive ray parameter with surface coordinates, in the local frame.
    fn intersect_local(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match self.shape {
            Shape::Plane {
                half_width,
                half_height,
            } => {
                if d.z.abs() < 1e-15 {
                    return None;
                }
                let t = -o.z / d.z;
                let p = o + d * t;
                (t > 0.0 && p.x.abs() <= half_width && p.y.abs() <= half_height).then_some(Hit { t, u: p.x, v: p.y })
            }
            Shape::Sphere { radius } => {
                let a = d.dot(d);
                let b = o.dot(d);
                let c = o.dot(o) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / a;
                let t1 = (-b + sq) / a;
                let t = if t0 > 0.0 {
                    t0
                } else if t1 > 0.0 {
                    t1
                } else {
                    return None;
                };
                let p = o + d * t;
                let lon = p.x.atan2(-p.z);
                let lat = (p.y / radius).clamp(-1.0, 1.0).asin();
                Some(Hit {
                    t,
                    u: lon * radius,
                    v: lat * radius,
                })
            }
            Shape::Box { half_extents } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0;
                for k in 0..3 {
                    let h = half_extents[k];
                    if d[k].abs() < 1e-15 {
                        if o[k].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let mut ta = (-h - o[k]) / d[k];
                    let mut tb = (h - o[k]) / d[k];
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t_near {
                        t_near = ta;
                        axis_near = k;
                    }
                    t_far = t_far.min(tb);
                }
                if t_near > t_far || t_far <= 0.0 {
                    return None;
                }
                let (t, axis) = if t_near > 0.0 { (t_near, axis_near) } else { (t_far, axis_near) };
                let p = o + d * t;
                let (u, v) = match axis {
                    0 => (p.z, p.y),
                    1 => (p.x, p.z),
                    _ => (p.x, p.y),
                };
                Some(Hit { t, u, v })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub seed: u64,
    pub background: [f64; 3],
    pub primitives: Vec<Primitive>,
    /// One source camera per frame.
    pub cameras: Vec<CameraModel>,
    /// World point that target cameras orbit about.
    pub pivot: [f64; 3],
    /// Colour rays per pixel along each axis; depth always uses the centre ray.
    #[serde(default = "one")]
    pub samples: usize,
}

fn one() -> usize {
    1
}

/// One rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: ImageFrame,
    pub depth: DepthFrame,
    pub foreground: Mask,
}

impl SceneSpec {
    pub fn clip_param(&self, frame: usize) -> f64 {
        if self.frame_count <= 1 {
            0.0
        } else {
            frame as f64 / (self.frame_count - 1) as f64
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.cameras[0].intrinsics
    }

    pub fn source_camera(&self, frame: usize) -> &CameraModel {
        &self.cameras[frame.min(self.cameras.len() - 1)]
    }

    /// The first source camera orbited about the pivot by `yaw_deg`.
    pub fn yaw_target(&self, yaw_deg: f64) -> CameraModel {
        self.cameras[0].orbit_yaw(&Vector3::from(self.pivot), yaw_deg.to_radians())
    }

    pub fn render_source(&self, frame: usize) -> RenderOutput {
        render(self, self.source_camera(frame), frame)
    }
}

/// Ray-casts the scene from `camera` at `frame_index`.
pub fn render(spec: &SceneSpec, camera: &CameraModel, frame_index: usize) -> RenderOutput {
    let k = camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let s = spec.clip_param(frame_index);
    let locals: Vec<RigidTransform> = spec.primitives.iter().map(|p| p.motion.pose(s).invert()).collect();
    let origin = camera.center();
    let n = spec.samples.max(1);
    let trace = |px: f64, py: f64| -> Option<(f64, [f64; 3], bool)> {
        let dc = Vector3::new((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0);
        let dw = camera.pose.transform_vector(&dc);
        let mut best: Option<(f64, [f64; 3], bool)> = None;
        for (prim, inv) in spec.primitives.iter().zip(&locals) {
            let o = inv.rotation() * origin + inv.translation();
            let d = inv.rotation() * dw;
            if let Some(hit) = prim.intersect_local(&o, &d) {
                if best.as_ref().is_none_or(|b| hit.t < b.0) {
                    best = Some((hit.t, prim.texture.eval(hit.u, hit.v), prim.foreground));
                }
            }
        }
        best
    };
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut color = Vec::with_capacity(w * 3);
            let mut depth = Vec::with_capacity(w);
            let mut fg = Vec::with_capacity(w);
            for x in 0..w {
                let center = trace(x as f64, y as f64);
                match center {
                    Some((t, _, f)) => {
                        depth.push(t);
                        fg.push(f);
                    }
                    None => {
                        depth.push(0.0);
                        fg.push(false);
                    }
                }
                // Box-filtered colour over an n×n grid of sub-pixel rays.
                let mut acc = [0.0; 3];
                for sy in 0..n {
                    for sx in 0..n {
                        let (ox, oy) = if n == 1 {
                            (0.0, 0.0)
                        } else {
                            ((sx as f64 + 0.5) / n as f64 - 0.5, (sy as f64 + 0.5) / n as f64 - 0.5)
                        };
                        let hit = if ox == 0.0 && oy == 0.0 { center } else { trace(x as f64 + ox, y as f64 + oy) };
                        let c = hit.map_or(spec.background, |h| h.1);
                        for i in 0..3 {
                            acc[i] += c[i];
                        }
                    }
                }
                color.extend(acc.iter().map(|v| v / (n * n) as f64));
            }
            (color, depth, fg)
        })
        .collect();
    let mut color = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    let mut fg = Vec::with_capacity(w * h);
    for (c, d, f) in rows {
        color.extend(c);
        depth.extend(d);
        fg.extend(f);
    }
    RenderOutput {
        image: ImageFrame {
            width: w,
            height: h,
            channels: 3,
            data: color,
        },
        depth: DepthFrame::from_values(w, h, depth).expect("sized"),
        foreground: Mask {
            width: w,
            height: h,
            data: fg,
        },
    }
}

/// Default resolution and clip length used by the bundled scenes.
pub const DEFAULT_RESOLUTION: usize = 128;
pub const DEFAULT_FRAMES: usize = 28;

pub fn bundled_scenes() -> Vec<SceneSpec> {
    bundled_scenes_with(DEFAULT_RESOLUTION, DEFAULT_RESOLUTION, DEFAULT_FRAMES)
}

pub const BUNDLED_NAMES: [&str; 5] = ["apple", "block", "paper", "spin", "teddy"];

/// The five reference scenes at a chosen resolution and length:
/// static scene with moving camera, moving object with static camera, both
/// moving, a heavy occlusion pair and a bilaterally symmetric scene.
pub fn bundled_scenes_with(width: usize, height: usize, frames: usize) -> Vec<SceneSpec> {
    BUNDLED_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| bundled_scene(name, width, height, frames, 1000 + i as u64).expect("known name"))
        .collect()
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3]) -> [f64; 3] {
    let mut out = c;
    for v in &mut out {
        *v = (*v + rng.random_range(-0.03..0.03)).clamp(0.05, 0.95);
    }
    out
}

fn textured(rng: &mut ChaCha8Rng, a: [f64; 3], b: [f64; 3], cell: f64, sharpness: f64) -> Texture {
    Texture {
        color_a: jitter(rng, a),
        color_b: jitter(rng, b),
        cell,
        sharpness,
    }
}

fn back_wall(rng: &mut ChaCha8Rng) -> Primitive {
    Primitive {
        shape: Shape::Plane {
            half_width: 40.0,
            half_height: 40.0,
        },
        texture: textured(rng, [0.30, 0.38, 0.50], [0.55, 0.60, 0.68], 0.9, 1.0),
        motion: Motion::fixed([0.0, 0.0, 9.0]),
        foreground: false,
    }
}

fn camera_path(
    k: Intrinsics,
    frames: usize,
    from: [f64; 3],
    to: [f64; 3],
    yaw_from: f64,
    yaw_to: f64,
) -> Vec<CameraModel> {
    let m = Motion::linear(from, to, yaw_from, yaw_to);
    (0..frames)
        .map(|f| {
            let s = if frames <= 1 { 0.0 } else { f as f64 / (frames - 1) as f64 };
            CameraModel::new(k, m.pose(s))
        })
        .collect()
}

pub fn bundled_scene(name: &str, width: usize, height: usize, frames: usize, seed: u64) -> Option<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = 0.86 * width.max(height) as f64;
    let k = Intrinsics::centered(focal, width, height).ok()?;
    let frames = frames.max(1);
    let still = |_: ()| vec![CameraModel::new(k, RigidTransform::identity()); frames];
    let mut prims = vec![back_wall(&mut rng)];
    let cameras;
    let pivot = [0.0, 0.0, 4.0];
    match name {
        "apple" => {
            prims.push(Primitive {
                shape: Shape::Sphere { radius: 0.8 },
                texture: textured(&mut rng, [0.70, 0.25, 0.20], [0.85, 0.55, 0.35], 0.5, 1.0),
                motion: Motion::fixed([0.0, 0.1, 4.0]),
                foreground: true,
            });
            prims.push(Primitive {
                shape: Shape::Box {
                    half_extents: [0.5, 0.5, 0.5],
                },
                texture: textured(&mut rng, [0.35, 0.55, 0.30], [0.60, 0.75, 0.45], 0.45, 1.0),
                motion: Motion::fixed([-1.5, 0.6, 5.4]).with_tilt([0.0, 1.0, 0.0], 30.0),
                foreground: true,
            });
            cameras = camera_path(k, frames, [-0.15, 0.0, 0.0], [0.15, -0.05, 0.1], -2.0, 2.0);
        }
        "block" => {
            prims.push(Primitive {
                shape: Shape::Box {
                    half_extents: [0.55, 0.55, 0.55],
                },
                texture: textured(&mut rng, [0.65, 0.55, 0.25], [0.85, 0.75, 0.50], 0.4, 1.0),
                motion: Motion::linear([-0.9, 0.0, 4.2], [0.9, -0.1, 4.2], 0.0, 60.0),
                foreground: true,
            });
            prims.push(Primitive {
                shape: Shape::Sphere { radius: 0.6 },
                texture: textured(&mut rng, [0.30, 0.35, 0.70], [0.55, 0.60, 0.85], 0.4, 1.0),
                motion: Motion::fixed([1.4, -0.7, 5.6]),
                foreground: true,
            });
            cameras = still(());
        }
        "paper" => {
            prims.push(Primitive {
                shape: Shape::Plane {
                    half_width: 0.9,
                    half_height: 0.65,
                },
                texture: textured(&mut rng, [0.75, 0.72, 0.62], [0.45, 0.40, 0.35], 0.35, 1.0),
                motion: Motion {
                    positions: vec![[-0.5, 0.2, 4.0], [0.1, -0.1, 3.9], [0.5, 0.1, 4.1]],
                    yaw_deg: vec![-15.0, 0.0, 15.0],
                    tilt: Some(([1.0, 0.0, 0.0], 12.0)),
                },
                foreground: true,
            });
            prims.push(Primitive {
                shape: Shape::Sphere { radius: 0.45 },
                texture: textured(&mut rng, [0.25, 0.60, 0.55], [0.50, 0.80, 0.75], 0.3, 1.0),
                motion: Motion::linear([1.3, 0.7, 5.5], [1.0, 0.5, 5.2], 0.0, 0.0),
                foreground: true,
            });
            cameras = camera_path(k, frames, [0.0, -0.1, 0.0], [0.12, 0.05, 0.15], 1.5, -1.5);
        }
        "spin" => {
            prims.push(Primitive {
                shape: Shape::Sphere { radius: 0.7 },
                texture: textured(&mut rng, [0.75, 0.35, 0.55], [0.90, 0.65, 0.75], 0.35, 1.0),
                motion: Motion::linear([-0.2, 0.0, 3.0], [0.1, 0.05, 3.0], 0.0, 40.0),
                foreground: true,
            });
            prims.push(Primitive {
                shape: Shape::Box {
                    half_extents: [0.95, 0.95, 0.95],
                },
                texture: textured(&mut rng, [0.30, 0.45, 0.35], [0.60, 0.70, 0.55], 0.45, 1.0),
                motion: Motion::linear([0.6, 0.0, 5.2], [0.6, 0.0, 5.2], 0.0, 90.0),
                foreground: true,
            });
            cameras = still(());
        }
        "teddy" => {
            let fur = textured(&mut rng, [0.55, 0.38, 0.22], [0.78, 0.60, 0.42], 0.35, 1.0);
            prims.push(Primitive {
                shape: Shape::Sphere { radius: 0.9 },
                texture: fur.clone(),
                motion: Motion::fixed([0.0, 0.2, 4.5]),
                foreground: true,
            });
            for x in [-0.85, 0.85] {
                prims.push(Primitive {
                    shape: Shape::Sphere { radius: 0.4 },
                    texture: fur.clone(),
                    motion: Motion::fixed([x, -0.75, 4.6]),
                    foreground: true,
                });
            }
            cameras = still(());
        }
        _ => return None,
    }
    Some(SceneSpec {
        name: name.to_string(),
        width,
        height,
        frame_count: frames,
        seed,
        background: [0.0, 0.0, 0.0],
        primitives: prims,
        cameras,
        pivot,
        samples: 3,
    })
}

/// Checks that every primitive's near side stays in front of every camera.
pub fn check_in_front(spec: &SceneSpec) -> bool {
    (0..spec.frame_count).all(|f| {
        let out = render(spec, spec.source_camera(f), f);
        out.depth
            .data
            .iter()
            .zip(&out.depth.valid)
            .all(|(d, v)| !*v || *d > MIN_SCENE_DEPTH)
    })
}
