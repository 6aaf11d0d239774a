use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use warp4d::config::{load_config, ConfigError, InpainterKind, RunConfig};
use warp4d::geometry::CameraModel;
use warp4d::metrics::{evaluate_scene, MetricReport};
use warp4d::pipeline::run_trajectory_to_camera;
use warp4d::scene::{bundled_scene, BUNDLED_NAMES, DEFAULT_FRAMES, DEFAULT_RESOLUTION};
use warp4d::scenedir::{self, SceneDirError};
use warp4d::synthesis::{synthesize_warp_pair_with, ForegroundSpec, ReposeParams};
use warp4d::warp::WarpOptions;

// Kept as literals for clap; a test checks them against the library constants.
const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\ndepth format: DPF1\nmanifest schema: warp4d-manifest/1\nbridge protocol: S4DB v1"
);

const THREADS_ENV: &str = "SEE4D_THREADS";

#[derive(Parser)]
#[command(name = "warp4d", version, long_version = LONG_VERSION, about = "Pose-free warp-then-inpaint video re-rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render bundled synthetic scenes to scene directories.
    GenScene {
        /// Scene name, or "all". Repeatable.
        #[arg(long = "name", required = true)]
        names: Vec<String>,
        /// Output root; each scene goes to <out>/<name>.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        width: usize,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        height: usize,
        #[arg(long, default_value_t = DEFAULT_FRAMES)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build self-supervised (warped, mask) training pairs from a scene directory.
    SynthWarp {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base seed; frame f uses seed + f.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-render a scene directory at fixed target cameras.
    Run {
        #[arg(long)]
        scene: PathBuf,
        /// JSON: a list of cameras, or {"yaw_deg": [...], "pivot": [x, y, z]}.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured inpainter (oracle, toy, identity-echo, bridge:<endpoint>).
        #[arg(long)]
        inpainter: Option<String>,
    },
    /// Compare predicted frames against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// JSON report path [default: <pred>/metrics.json].
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SceneDirError> for CliError {
    fn from(e: SceneDirError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match cli.command {
        Command::GenScene {
            names,
            out,
            width,
            height,
            frames,
            seed,
        } => gen_scene(&names, &out, width, height, frames, seed),
        Command::SynthWarp { scene, out, config, seed } => synth_warp(&scene, &out, config.as_deref(), seed),
        Command::Run {
            scene,
            targets,
            config,
            out,
            seed,
            inpainter,
        } => run(&scene, &targets, config.as_deref(), &out, seed, inpainter.as_deref()),
        Command::Eval { pred, truth, json } => eval(&pred, &truth, json.as_deref()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => Ok(load_config(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn gen_scene(names: &[String], out: &Path, width: usize, height: usize, frames: usize, seed: u64) -> Result<(), CliError> {
    let mut list: Vec<&str> = Vec::new();
    for n in names {
        if n == "all" {
            list.extend(BUNDLED_NAMES);
        } else if let Some(b) = BUNDLED_NAMES.iter().find(|b| **b == n) {
            list.push(b);
        } else {
            return Err(CliError::Config(format!(
                "unknown scene {n:?}; expected one of {} or \"all\"",
                BUNDLED_NAMES.join(", ")
            )));
        }
    }
    if width < 8 || height < 8 || frames == 0 {
        return Err(CliError::Config("resolution must be at least 8x8 and frames at least 1".into()));
    }
    list.dedup();
    for name in list {
        let spec = bundled_scene(name, width, height, frames, seed).expect("bundled name");
        let dir = out.join(name);
        scenedir::write_scene_dir(&dir, &spec)?;
        println!("{}", dir.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthRecord {
    frame: usize,
    seed: u64,
    axis: [f64; 3],
    angle_deg: f64,
    lambda: f64,
    origin_pixel: [f64; 2],
    origin: [f64; 3],
    mean_depth: f64,
    /// Row-major rotation followed by translation.
    repose: [f64; 12],
    jitter: [f64; 12],
    beta: f64,
}

#[derive(Serialize)]
struct SynthManifest {
    schema: &'static str,
    source: String,
    seed: u64,
    frames: Vec<SynthRecord>,
}

fn flatten(t: &warp4d::geometry::RigidTransform) -> [f64; 12] {
    let mut out = [0.0; 12];
    out[..9].copy_from_slice(&t.rotation_row_major());
    out[9..].copy_from_slice(t.translation().as_slice());
    out
}

fn synth_warp(scene: &Path, out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_run_config(config)?;
    let base = seed.unwrap_or(cfg.seed);
    let src = scenedir::read_scene_dir(scene)?;
    let masks = scenedir::read_masks(scene, src.frames.len())?;
    let lambda = cfg.conditioning.lambda;
    let opts = WarpOptions::default();
    let results: Vec<_> = (0..src.frames.len())
        .into_par_iter()
        .map(|f| {
            let s = base.wrapping_add(f as u64);
            let fg = ForegroundSpec::from_mask(masks[f].clone()).map_err(|e| runtime(format!("frame {f}: {e}")))?;
            let mean = src.depths[f].mean_valid().ok_or_else(|| runtime(format!("frame {f}: no valid depth")))?;
            let params = ReposeParams::sample(s, mean, lambda, &cfg.jitter);
            let k = src.cameras[f].intrinsics;
            let o = synthesize_warp_pair_with(&src.frames[f], &src.depths[f], &k, &fg, &params, &opts)
                .map_err(|e| runtime(format!("frame {f}: {e}")))?;
            let beta = o.mask.count() as f64 / o.mask.data.len() as f64;
            let rec = SynthRecord {
                frame: f,
                seed: s,
                axis: [params.axis.x, params.axis.y, params.axis.z],
                angle_deg: params.angle_deg,
                lambda: params.lambda,
                origin_pixel: [fg.origin_pixel.u, fg.origin_pixel.v],
                origin: [o.origin.x, o.origin.y, o.origin.z],
                mean_depth: o.mean_depth,
                repose: flatten(&o.repose),
                jitter: flatten(&params.jitter),
                beta,
            };
            Ok((o.warped, o.mask, rec))
        })
        .collect::<Result<_, CliError>>()?;

    let warped_dir = out.join("warped");
    let mask_dir = out.join("mask");
    std::fs::create_dir_all(&warped_dir).map_err(runtime)?;
    std::fs::create_dir_all(&mask_dir).map_err(runtime)?;
    let mut records = Vec::with_capacity(results.len());
    for (f, (img, mask, rec)) in results.into_iter().enumerate() {
        img.save_png(&warped_dir.join(scenedir::frame_name(f))).map_err(runtime)?;
        mask.save_png(&mask_dir.join(scenedir::mask_name(f))).map_err(runtime)?;
        records.push(rec);
    }
    let manifest = SynthManifest {
        schema: "warp4d-synth/1",
        source: src.name,
        seed: base,
        frames: records,
    };
    scenedir::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TargetsFile {
    Cameras(Vec<CameraModel>),
    Orbit {
        yaw_deg: Vec<f64>,
        #[serde(default)]
        pivot: Option<[f64; 3]>,
    },
}

fn load_targets(path: &Path, src: &warp4d::pipeline::SourceVideo) -> Result<Vec<CameraModel>, CliError> {
    let spec: TargetsFile = scenedir::read_json(path).map_err(|e| CliError::Config(e.to_string()))?;
    let cams = match spec {
        TargetsFile::Cameras(c) => c,
        TargetsFile::Orbit { yaw_deg, pivot } => {
            let pivot = pivot
                .or_else(|| src.scene.as_ref().map(|s| s.pivot))
                .ok_or_else(|| CliError::Config("orbit targets need a pivot when the scene has no scene.json".into()))?;
            let pivot = Vector3::from(pivot);
            yaw_deg.iter().map(|d| src.cameras[0].orbit_yaw(&pivot, d.to_radians())).collect()
        }
    };
    if cams.is_empty() {
        return Err(CliError::Config(format!("{}: no target cameras", path.display())));
    }
    Ok(cams)
}

fn run(
    scene: &Path,
    targets: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    inpainter: Option<&str>,
) -> Result<(), CliError> {
    let mut cfg = load_run_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(i) = inpainter {
        cfg.inpainter = i
            .parse::<InpainterKind>()
            .map_err(|e| CliError::Config(format!("--inpainter: {e}")))?;
    }
    cfg.validate()?;
    let src = scenedir::read_scene_dir(scene)?;
    let cams = load_targets(targets, &src)?;
    let result = run_trajectory_to_camera(&src, &cams, &cfg).map_err(runtime)?;

    std::fs::create_dir_all(out).map_err(runtime)?;
    let mut failed = Vec::new();
    for (i, t) in result.targets.iter().enumerate() {
        match t {
            Ok(t) => {
                let depths = cfg.pipeline.write_depth.then_some(t.depths.as_slice());
                scenedir::write_frames(&out.join(format!("target_{i:02}")), &t.frames, depths)?;
            }
            Err(e) => {
                eprintln!("target {i}: {e}");
                failed.push(i);
            }
        }
    }
    scenedir::write_json(&out.join("manifest.json"), &result.manifest)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{} of {} targets failed", failed.len(), cams.len())))
    }
}

fn has_images(dir: &Path) -> bool {
    scenedir::list_images(dir).map(|l| !l.is_empty()).unwrap_or(false)
}

fn eval(pred: &Path, truth: &Path, json: Option<&Path>) -> Result<(), CliError> {
    let mut pairs: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    if has_images(pred) {
        let name = pred.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into());
        pairs.push((name, pred.to_path_buf(), truth.to_path_buf()));
    } else {
        let mut subs: Vec<PathBuf> = std::fs::read_dir(pred)
            .map_err(|e| runtime(format!("{}: {e}", pred.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && has_images(p))
            .collect();
        subs.sort();
        for p in subs {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            let t = truth.join(&name);
            if !has_images(&t) {
                return Err(runtime(format!("no ground truth frames in {}", t.display())));
            }
            pairs.push((name, p, t));
        }
    }
    if pairs.is_empty() {
        return Err(runtime(format!("no frames found under {}", pred.display())));
    }
    let scenes = pairs
        .iter()
        .map(|(name, p, t)| {
            let a = scenedir::read_frames(p)?;
            let b = scenedir::read_frames(t)?;
            evaluate_scene(name, &a, &b).map_err(|e| runtime(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = MetricReport::new(scenes);
    let text = serde_json::to_string_pretty(&report).expect("serializable");
    let path = json.map(Path::to_path_buf).unwrap_or_else(|| pred.join("metrics.json"));
    std::fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    print!("{}", report.table());
    Ok(())
}
