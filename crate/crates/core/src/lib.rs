//! Reward-free exploration in layered Block MDPs with multi-step inverse
//! kinematics, downstream planning with PSDP, and exact verification tools.

pub mod analysis;
pub mod density;
pub mod dp;
pub mod envs;
pub mod musik;
pub mod psdp;
pub mod error;
pub mod model;
pub mod policy;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{Action, BlockMdp, LatentState, ModelFile, ObsId};
