//! Run configuration: JSON with defaults for every field and unknown keys
//! rejected. Validation errors name the offending field.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::diffusion::{make_schedule, ConditionIndex, LatentMapping, NoiseSchedule, TimeWeight};
use crate::inpaint::ToyConfig;
use crate::synthesis::JitterConfig;
use crate::warp::WarpOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Validation { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Parsed form of the `"oracle" | "toy" | "identity-echo" | "bridge:<endpoint>"` selector.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum InpainterKind {
    Oracle,
    #[default]
    Toy,
    IdentityEcho,
    Bridge(String),
}

impl FromStr for InpainterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "toy" => Ok(Self::Toy),
            "identity-echo" => Ok(Self::IdentityEcho),
            _ => match s.strip_prefix("bridge:") {
                Some(ep) if !ep.is_empty() => Ok(Self::Bridge(ep.to_string())),
                _ => Err(format!("unknown inpainter {s:?} (expected oracle, toy, identity-echo or bridge:<endpoint>)")),
            },
        }
    }
}

impl fmt::Display for InpainterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Oracle => f.write_str("oracle"),
            Self::Toy => f.write_str("toy"),
            Self::IdentityEcho => f.write_str("identity-echo"),
            Self::Bridge(ep) => write!(f, "bridge:{ep}"),
        }
    }
}

/// Where each hop's new depth comes from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum DepthProviderKind {
    /// Render from the scene description (synthetic scenes only).
    Truth,
    /// Warped depth with holes filled by the local median.
    #[default]
    Propagated,
    Bridge(String),
}

impl FromStr for DepthProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "truth" => Ok(Self::Truth),
            "propagated" => Ok(Self::Propagated),
            _ => match s.strip_prefix("bridge:") {
                Some(ep) if !ep.is_empty() => Ok(Self::Bridge(ep.to_string())),
                _ => Err(format!("unknown depth provider {s:?} (expected truth, propagated or bridge:<endpoint>)")),
            },
        }
    }
}

impl fmt::Display for DepthProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Truth => f.write_str("truth"),
            Self::Propagated => f.write_str("propagated"),
            Self::Bridge(ep) => write!(f, "bridge:{ep}"),
        }
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(InpainterKind);
string_serde!(DepthProviderKind);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub condition_index: ConditionIndex,
    pub time_weight: TimeWeight,
    pub latent_mapping: LatentMapping,
    /// DDIM steps of the toy inpainter.
    pub toy_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            condition_index: ConditionIndex::Third,
            time_weight: TimeWeight::Linear,
            latent_mapping: LatentMapping::Identity,
            toy_steps: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningConfig {
    /// γ in the condition blend weight.
    pub gamma: f64,
    /// λ, translation scale of the synthetic re-pose.
    pub lambda: f64,
    pub guidance_scale: f64,
    pub cond_drop_prob: f64,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 0.1,
            guidance_scale: 1.0,
            cond_drop_prob: 0.1,
        }
    }
}

/// Warp settings for pipeline hops: a destination pixel counts as observed
/// only when the nearest surface covers at least 30% of it.
pub fn hop_warp_options() -> WarpOptions {
    WarpOptions {
        w_min: 0.3,
        ..WarpOptions::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Hop count P; derived from the limits below when absent.
    pub hops: Option<usize>,
    pub max_hop_deg: f64,
    /// Per-hop translation limit in scene units; unlimited when absent.
    pub max_hop_trans: Option<f64>,
    pub window_length: usize,
    pub overlap: usize,
    pub depth_provider: DepthProviderKind,
    pub warp: WarpOptions,
    /// Also write per-frame DPF1 depth at the target pose.
    pub write_depth: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            hops: None,
            max_hop_deg: 5.0,
            max_hop_trans: None,
            window_length: 16,
            overlap: 4,
            depth_provider: DepthProviderKind::Propagated,
            warp: hop_warp_options(),
            write_depth: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub conditioning: ConditioningConfig,
    pub pipeline: PipelineConfig,
    pub jitter: JitterConfig,
    pub inpainter: InpainterKind,
    pub seed: u64,
    /// `[width, height]` the source clip must have; `None` accepts any.
    pub resolution: Option<[usize; 2]>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            conditioning: ConditioningConfig::default(),
            pipeline: PipelineConfig::default(),
            jitter: JitterConfig::default(),
            inpainter: InpainterKind::Toy,
            seed: 0,
            resolution: None,
        }
    }
}

fn finite(path: &str, v: f64) -> Result<(), ConfigError> {
    if !v.is_finite() {
        return Err(invalid(path, format!("must be finite, got {v}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.schedule;
        if s.total_steps < 1 {
            return Err(invalid("schedule.total_steps", "must be >= 1"));
        }
        make_schedule(s.total_steps, s.beta_start, s.beta_end).map_err(|e| invalid("schedule.beta_start", e.to_string()))?;
        if s.toy_steps < 1 {
            return Err(invalid("schedule.toy_steps", "must be >= 1"));
        }
        if let TimeWeight::Constant(c) = s.time_weight {
            if !(0.0..=1.0).contains(&c) {
                return Err(invalid("schedule.time_weight", format!("constant weight {c} outside [0, 1]")));
            }
        }
        let c = &self.conditioning;
        for (p, v) in [
            ("conditioning.gamma", c.gamma),
            ("conditioning.lambda", c.lambda),
            ("conditioning.guidance_scale", c.guidance_scale),
            ("conditioning.cond_drop_prob", c.cond_drop_prob),
        ] {
            finite(p, v)?;
            if v < 0.0 {
                return Err(invalid(p, format!("must be >= 0, got {v}")));
            }
        }
        if c.gamma > 1.0 {
            return Err(invalid("conditioning.gamma", format!("γ = {} would push γβw above 1", c.gamma)));
        }
        if c.cond_drop_prob > 1.0 {
            return Err(invalid("conditioning.cond_drop_prob", "must be a probability"));
        }
        let p = &self.pipeline;
        if p.hops == Some(0) {
            return Err(invalid("pipeline.hops", "must be >= 1"));
        }
        finite("pipeline.max_hop_deg", p.max_hop_deg)?;
        if p.max_hop_deg <= 0.0 {
            return Err(invalid("pipeline.max_hop_deg", "must be > 0"));
        }
        if let Some(t) = p.max_hop_trans {
            finite("pipeline.max_hop_trans", t)?;
            if t <= 0.0 {
                return Err(invalid("pipeline.max_hop_trans", "must be > 0"));
            }
        }
        if p.window_length < 2 {
            return Err(invalid("pipeline.window_length", "must be >= 2"));
        }
        if p.overlap == 0 || p.overlap >= p.window_length {
            return Err(invalid(
                "pipeline.overlap",
                format!("need 0 < overlap < window_length ({}), got {}", p.window_length, p.overlap),
            ));
        }
        let w = &p.warp;
        for (path, v) in [("pipeline.warp.z_tol", w.z_tol), ("pipeline.warp.w_min", w.w_min), ("pipeline.warp.eps_w", w.eps_w)] {
            finite(path, v)?;
            if v < 0.0 {
                return Err(invalid(path, "must be >= 0"));
            }
        }
        let j = &self.jitter;
        for (path, v) in [("jitter.rotation_sigma_deg", j.rotation_sigma_deg), ("jitter.translation_sigma_scale", j.translation_sigma_scale)] {
            finite(path, v)?;
            if v < 0.0 {
                return Err(invalid(path, "must be >= 0"));
            }
        }
        if self.resolution.is_some_and(|r| r.contains(&0)) {
            return Err(invalid("resolution", "dimensions must be > 0"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is plain data")
    }

    pub fn schedule(&self) -> NoiseSchedule {
        let s = &self.schedule;
        make_schedule(s.total_steps, s.beta_start, s.beta_end).expect("validated")
    }

    pub fn toy(&self) -> ToyConfig {
        ToyConfig {
            schedule: self.schedule(),
            steps: self.schedule.toy_steps,
            gamma: self.conditioning.gamma,
            time_weight: self.schedule.time_weight,
            condition_index: self.schedule.condition_index,
            guidance_scale: self.conditioning.guidance_scale,
            mapping: self.schedule.latent_mapping,
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RunConfig::from_json(&text)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<(), ConfigError> {
    std::fs::write(path, cfg.to_json()).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}
