//! Flow-matching imitation, PPO fine-tuning over denoising chains, and a
//! procedurally generated tabletop pick-and-place world.

pub mod artifact;
pub mod autodiff;
pub mod checkpoint;
pub mod container;
pub mod error;
pub mod harness;
pub mod imitation;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod scenes;
pub mod spaces;
pub mod world;

pub use error::{Error, Result};
