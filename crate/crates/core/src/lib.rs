//! Dual-stream co-speech gesture generation, desk scale.
//!
//! The pipeline factors gesture synthesis into a frozen Stage-1 regional
//! RVQ tokenizer and a Stage-2 dual-stream generator: a beat stream driven
//! by seed pose, speaker identity, and an audio timing projection, and a
//! semantic stream driven by motion-grounded word conditioning. A
//! variational frame gate decides per frame which stream dominates; an
//! anthropometry-weighted inertial prior regularizes the beat stream during
//! training. The crate also ships the spectral/kinematic analysis toolkit
//! and evaluation metrics used to verify the behaviour on synthetic data.

pub mod analysis;
pub mod blender;
pub mod config;
pub mod datagen;
pub mod error;
pub mod features;
pub mod gate;
pub mod inertia;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod objectives;
pub mod regions;
pub mod rvq;
pub mod semantic;

pub use config::ModelConfig;
pub use error::{CoreError, Result};
pub use features::{FeatureBundle, FeatureProvider};
pub use motion::{MotionSequence, WordSpan};
pub use regions::{default_region_partition, Region, RegionPartition};
