//! Geometric and motion-field toolkit for structure-aware face animation.
//!
//! The crate decodes an articulated morphable head model, rasterizes vertex
//! attributes under a weak-perspective camera, builds and fuses dense motion
//! fields, recombines warped features with occlusion-aware modulation and
//! contextual attention, fits parameters to 2D landmarks, and performs
//! relative motion transfer. Everything is deterministic and CPU-only; the
//! outputs of the learned networks this design replaces enter through
//! fixture files.

pub mod assets;
pub mod camera;
pub mod error;
pub mod fitting;
pub mod flow_vis;
pub mod generator;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod pipeline;
pub mod rotation;
pub mod transfer;

pub use camera::{AttributeImage, Camera};
pub use error::{Error, Result};
pub use grid::ImageGrid;
pub use model::{Mesh, MorphableModel, ParamSet};
pub use motion::{KeypointSet, MaskStack, MotionField, OcclusionMap};
