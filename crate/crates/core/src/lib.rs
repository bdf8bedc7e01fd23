//! Non-neural machinery for temporal action localization.
//!
//! The crate turns boundary-matching score maps into ranked temporal proposals,
//! suppresses and refines them through a cascade of refiners, fuses the outputs
//! of several models, and scores the result with the usual AR@AN / AUC / mAP
//! suite. A seeded synthetic generator with brute-force oracles backs the tests.

pub mod annotations;
pub mod bundle;
pub mod decode;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod features;
pub mod io;
pub mod linalg;
pub mod nms;
pub mod proposal;
pub mod refine;
pub mod resize;
pub mod roi;
pub mod segment;
pub mod synth;
pub mod targets;

pub use annotations::{AnnotationDb, GroundTruth, Subset, VideoRecord};
pub use bundle::ScoreBundle;
pub use error::{Error, Result};
pub use features::FeatureSequence;
pub use proposal::{Proposal, ProposalSet, VideoProposals};
pub use segment::{feature_length_for, grid_to_segment, segment_to_grid, tiou, GridSpec, Segment};
