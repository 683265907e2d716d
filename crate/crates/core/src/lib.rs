//! Language-guided object grounding and grasp prediction with a frozen
//! dual-encoder backbone and lightweight tunable adapters.
//!
//! The crate covers three task variants sharing one architecture:
//! referring expression segmentation (`res`), referring grasp synthesis
//! (`rgs`, quality/angle/width maps plus a mask) and referring grasp
//! affordance (`rga`, pixel-wise scores over six gripper rotations). A
//! synthetic tabletop scene generator, training/evaluation loops, metrics
//! and a CLI make the whole pipeline runnable end to end on a CPU.

pub mod adapter;
pub mod archive;
pub mod autodiff;
pub mod backbone;
pub mod datasynth;
pub mod decoder;
pub mod error;
pub mod grasp;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod tokenizer;
pub mod verify;

pub use error::{Error, Result};
