//! Attenuation-artifact detection for intracoronary OCT.
//!
//! Blood residues and gas bubbles in the lumen cast shadows over the arterial
//! wall. This crate classifies every A-line of a cross-sectional OCT frame
//! into one of three classes (`none`, `mild`, `severe`) with a dual-branch
//! convolutional network that processes the frame simultaneously in Cartesian
//! and polar coordinates, exchanging features between the branches at every
//! stage.
//!
//! The main pieces:
//!
//! - [`geometry`]: Cartesian/polar resampling with bilinear interpolation and
//!   exact adjoints, the glue between the two branches.
//! - [`netblocks`]: convolutions (zero or circular-in-theta padding), batch
//!   norm, residual blocks, bilinear upsampling, pooling.
//! - [`model`]: the network itself and its ablation variants (`full`,
//!   `one-way`, `single`, `polar`).
//! - [`loss`]: composite objective (cross-entropy + soft 1D Dice + circular
//!   total variation on the logits).
//! - [`sampler`]: stratified frame sampling with clipped inverse-frequency
//!   weights over a log-count proxy metric.
//! - [`metrics`]: 1D Dice, balanced accuracy, A-line and frame-wise F-scores,
//!   row-normalized confusion matrix.
//! - [`data`]: on-disk dataset format, 3-frame stack construction,
//!   augmentation, and a synthetic phantom generator with exact ground truth.
//! - [`training`]: Adam loop with plateau learning-rate decay and
//!   best-on-validation checkpointing; deterministic for a fixed seed.
//! - [`checkpoint`]: versioned binary container with bit-exact round trips.
//! - [`render`]: annotation-ring overlays for visual inspection.
//!
//! Everything is `f64` and deterministic: with the default `parallel` feature
//! the data-parallel loops fan out over rayon, but every element is computed
//! independently and reductions run in a fixed order, so results are bitwise
//! identical to the sequential build.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod netblocks;
pub(crate) mod par;
pub mod render;
pub mod sampler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Artifact severity assigned to a single A-line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ArtifactClass {
    /// No attenuation artifact.
    None = 0,
    /// Faint shadow; underlying structures still discernible.
    Mild = 1,
    /// Shadow makes interpretation impossible.
    Severe = 2,
}

impl ArtifactClass {
    pub const COUNT: usize = 3;
    pub const ALL: [ArtifactClass; 3] = [
        ArtifactClass::None,
        ArtifactClass::Mild,
        ArtifactClass::Severe,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ArtifactClass::None),
            1 => Some(ArtifactClass::Mild),
            2 => Some(ArtifactClass::Severe),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ArtifactClass::None => "none",
            ArtifactClass::Mild => "mild",
            ArtifactClass::Severe => "severe",
        }
    }
}

/// Per-frame reference annotation: one class per A-line.
pub type AnnotationVector = Vec<ArtifactClass>;

/// Splitmix64-style seed mixer for deriving independent rng streams.
///
/// Rng streams are keyed by role and position (epoch, step, slot, ...) so that
/// results do not depend on scheduling and training can resume mid-run.
pub fn seed_mix(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = state ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}
