//! Depth estimation from rectified stereo pairs with depth-uniform plane
//! sweeps and uncertainty-guided refinement.

pub mod ablation;
pub mod compensated;
pub mod cost_volume;
pub mod dump;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod image;
pub mod learning;
pub mod model;
pub mod params;
pub mod pfm;
pub mod refinement;
pub mod sampling;
pub mod scenes;

pub use cost_volume::{CostVolume, DepthMap, ScoreVolume, Sweep};
pub use error::{Error, Result};
pub use features::{ExtractorConfig, FeatureMap};
pub use geometry::{DepthPlanes, DisparityLevels, StereoRig};
pub use image::ImageBuf;
pub use refinement::{CandidateMode, FUMap, OffsetMap, SUMap};
pub use params::{Group, InitConfig, ParamVector};
pub use scenes::{generate_scene, Sample, SceneSpec};
pub use model::{Model, Outputs, Prepared, Supervision};
pub use learning::{train, TrainConfig};
