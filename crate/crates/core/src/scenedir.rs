//! On-disk scene directories.
//!
//! ```text
//! <dir>/cameras.json          array of camera records, one per frame
//! <dir>/frames/frame_NNNN.png
//! <dir>/depth/depth_NNNN.dpf  DPF1 depth
//! <dir>/masks/mask_NNNN.png   foreground masks (optional)
//! <dir>/scene.json            synthetic scene description (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::CameraModel;
use crate::pipeline::SourceVideo;
use crate::raster::{DepthFrame, ImageFrame, Mask, RasterError};
use crate::scene::SceneSpec;

#[derive(Debug, Error)]
pub enum SceneDirError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Json { path: String, message: String },
    #[error("{path}: {source}")]
    Raster { path: String, source: RasterError },
    #[error("{0}")]
    Layout(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneDirError + '_ {
    move |source| SceneDirError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn raster_err(path: &Path) -> impl FnOnce(RasterError) -> SceneDirError + '_ {
    move |source| SceneDirError::Raster {
        path: path.display().to_string(),
        source,
    }
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.png")
}

pub fn depth_name(i: usize) -> String {
    format!("depth_{i:04}.dpf")
}

pub fn mask_name(i: usize) -> String {
    format!("mask_{i:04}.png")
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, SceneDirError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| SceneDirError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), SceneDirError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(io_err(path))
}

fn mkdir(path: &Path) -> Result<(), SceneDirError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Renders every frame of `spec` and writes the full directory.
pub fn write_scene_dir(dir: &Path, spec: &SceneSpec) -> Result<(), SceneDirError> {
    for sub in ["frames", "depth", "masks"] {
        mkdir(&dir.join(sub))?;
    }
    write_json(&dir.join("scene.json"), spec)?;
    write_json(&dir.join("cameras.json"), &spec.cameras)?;
    (0..spec.frame_count).into_par_iter().try_for_each(|f| {
        let r = spec.render_source(f);
        let p = dir.join("frames").join(frame_name(f));
        r.image.save_png(&p).map_err(raster_err(&p))?;
        let p = dir.join("depth").join(depth_name(f));
        r.depth.save(&p).map_err(raster_err(&p))?;
        let p = dir.join("masks").join(mask_name(f));
        r.foreground.save_png(&p).map_err(raster_err(&p))
    })
}

/// Loads a scene directory as a source clip.
pub fn read_scene_dir(dir: &Path) -> Result<SourceVideo, SceneDirError> {
    let cameras: Vec<CameraModel> = read_json(&dir.join("cameras.json"))?;
    if cameras.is_empty() {
        return Err(SceneDirError::Layout(format!("{}: cameras.json is empty", dir.display())));
    }
    let scene_path = dir.join("scene.json");
    let scene: Option<SceneSpec> = if scene_path.exists() { Some(read_json(&scene_path)?) } else { None };
    let loaded: Vec<(ImageFrame, DepthFrame)> = (0..cameras.len())
        .into_par_iter()
        .map(|f| {
            let p = dir.join("frames").join(frame_name(f));
            let image = ImageFrame::load(&p).map_err(raster_err(&p))?;
            let p = dir.join("depth").join(depth_name(f));
            let depth = DepthFrame::load(&p).map_err(raster_err(&p))?;
            Ok((image, depth))
        })
        .collect::<Result<_, SceneDirError>>()?;
    let (frames, depths) = loaded.into_iter().unzip();
    let name = scene
        .as_ref()
        .map(|s| s.name.clone())
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "scene".into());
    Ok(SourceVideo {
        name,
        frames,
        depths,
        cameras,
        scene,
    })
}

pub fn read_masks(dir: &Path, count: usize) -> Result<Vec<Mask>, SceneDirError> {
    (0..count)
        .into_par_iter()
        .map(|f| {
            let p = dir.join("masks").join(mask_name(f));
            Mask::load(&p).map_err(raster_err(&p))
        })
        .collect()
}

/// Writes `frame_NNNN.png` files (and DPF1 depth, when given) into `dir`.
pub fn write_frames(dir: &Path, frames: &[ImageFrame], depths: Option<&[DepthFrame]>) -> Result<(), SceneDirError> {
    mkdir(dir)?;
    frames.par_iter().enumerate().try_for_each(|(i, f)| {
        let p = dir.join(frame_name(i));
        f.save_png(&p).map_err(raster_err(&p))
    })?;
    if let Some(ds) = depths {
        ds.par_iter().enumerate().try_for_each(|(i, d)| {
            let p = dir.join(depth_name(i));
            d.save(&p).map_err(raster_err(&p))
        })?;
    }
    Ok(())
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, SceneDirError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_frames(dir: &Path) -> Result<Vec<ImageFrame>, SceneDirError> {
    list_images(dir)?
        .par_iter()
        .map(|p| ImageFrame::load(p).map_err(raster_err(p)))
        .collect()
}
