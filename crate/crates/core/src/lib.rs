pub mod bridge;
pub mod config;
pub mod diffusion;
pub mod geometry;
pub mod inpaint;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod scenedir;
pub mod synthesis;
pub mod warp;
