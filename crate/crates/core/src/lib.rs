//! Context-aware head detection.
//!
//! Candidate boxes are scored by three cooperating models: a local
//! per-candidate classifier, a pairwise joint model over up to 20 candidates
//! per scene whose per-candidate scores are exact max-marginal differences,
//! and a whole-image model scoring a fixed multi-scale grid. Feature
//! extraction is pluggable: candidates carry descriptor vectors.

pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod geom;
pub mod globalmodel;
pub mod graph;
pub mod inference;
pub mod local;
pub mod nets;
pub mod pipeline;
pub mod structloss;
pub mod verify;

pub use dataio::{Candidate, GroundTruth, SceneDetections, SceneRecord, SynthConfig};
pub use error::{Error, Result};
pub use globalmodel::{CombineParams, GlobalModel};
pub use local::LocalModel;
pub use pipeline::{DetectMode, Models, SceneOutputs};
pub use structloss::{LossSpec, PairwiseModelParams};
pub use geom::{BoundingBox, GridSpec};
pub use graph::SceneGraph;
pub use inference::{InferenceMethod, Labeling, MaxMarginals, Potentials};
