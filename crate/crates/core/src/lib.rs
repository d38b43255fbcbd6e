//! Scale-adaptive sliding-window semantic segmentation of large rasters.
//!
//! A large raster is segmented patch by patch. For every patch an
//! actor-critic agent looks at a global thumbnail plus a position mask and
//! picks a context scale; a dual-branch network segments the patch fused
//! with the downsampled context window at that scale. Rewards are the
//! score gain over a local-only prediction, so the agent learns where
//! extra context pays off.
//!
//! The crate is organized along the processing pipeline:
//!
//! - [`tiling`]: raster geometry (grids, patch/context extraction,
//!   thumbnails, position masks, stitching)
//! - [`synthgeo`]: procedural scale-ambiguous scene generator
//! - [`metrics`]: confusion matrix, mIoU/mF1/score, reward functions
//! - [`nn`]: differentiable primitives, SGD, checkpoints, gradient checker
//! - [`segnet`]: the dual-branch segmentation network
//! - [`agent`]: the scale-control agent (actor-critic, TD targets, losses)
//! - [`rollout`]: episode runner tying grid, networks and rewards together
//! - [`baselines`]: interchangeable scale-selection policies and evaluation
//! - [`run`]: configuration, training schedules, persistence

pub mod agent;
pub mod baselines;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod rollout;
pub mod run;
pub mod segnet;
pub mod synthgeo;
pub mod tiling;

pub use agent::{Agent, AgentConfig, State, Transition};
pub use error::{Error, Result};
pub use metrics::ConfusionMatrix;
pub use nn::{OptimizerConfig, ParamStore, Tensor};
pub use run::RunConfig;
pub use segnet::{SegNet, SegNetConfig};
pub use synthgeo::SceneConfig;
pub use tiling::{BinaryMask, LabelMask, PatchSpec, ProbMap, Raster, TileGrid};
