//! Multi-face 3D morphable-model reconstruction: a linear face model decoded
//! under one shared perspective camera, spherical-harmonics shading, a
//! deterministic rasterizer with gradients, the weighted fitting objective,
//! center-heatmap detection, and a stage-wise fitter.

pub mod assets;
pub mod camera;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod fitter;
pub mod imaging;
pub mod landmarks;
pub mod losses;
pub mod morphable;
pub mod raster;
pub mod scene_io;
pub mod shading;

pub use assets::{load_bundle, save_bundle, synth_bundle, BasisBundle};
pub use camera::Intrinsics;
pub use config::Config;
pub use error::{Error, Result};
pub use fitter::{fit_multiface, fit_stage, init_scene, FitConfig, Scene};
pub use losses::{total_loss, ActiveTerms, LossBreakdown, LossWeights, Observations};
pub use morphable::{FaceParams, ParamGrad, ParamLayout};
pub use raster::{render_scene, RenderOutput};
