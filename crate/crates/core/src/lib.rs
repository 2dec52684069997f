//! Volumetric dynamic-scene engine for tabletop pushing.
//!
//! The crate maintains a persistent, amodal, identity-consistent 3D scene
//! representation on a dense voxel grid. Per-object rigid motion is blended
//! through instance masks into a voxel scene flow, the representation is
//! forward-warped along that flow, and each new depth observation is fused
//! into the warped history. A deterministic quasi-static pushing simulator
//! generates benchmark episodes with exact ground truth, and a shooting-based
//! MPC planner pushes objects toward target configurations.
//!
//! Module map:
//! - [`voxel`]: grid geometry, dense volumes, trilinear kernels
//! - [`motion`]: SE(3) transforms, blended scene flow, analytic Jacobians
//! - [`matching`]: instance masks, permutation matching, training losses
//! - [`warp`]: forward warping, perception, history aggregation
//! - [`sim`]: pushing simulator, depth rendering, TSDF fusion, episodes
//! - [`metrics`]: flow error and ordered/unordered instance IoU
//! - [`rollout`]: episode-level representation rollouts
//! - [`planner`]: shooting MPC with mask-guided action sampling
//! - [`io`]: binary volume/depth formats and JSON sidecars

pub mod error;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod motion;
pub mod planner;
pub mod rollout;
pub mod sim;
pub mod voxel;
pub mod warp;

pub use error::Error;

/// Version stamped into every emitted file; readers reject other versions.
pub const SCHEMA_VERSION: u32 = 1;

/// Maximum mask channel count supported by exhaustive permutation matching.
pub const MAX_CHANNELS: usize = 6;

/// Benchmark channel count: 4 object channels plus one background channel.
pub const DEFAULT_CHANNELS: usize = 5;
