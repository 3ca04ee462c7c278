//! Compositional attribute-object learning over pre-extracted features.
//!
//! The library couples and decouples attributes on image embeddings with
//! two independently parameterized transformer networks, regularized by
//! symmetry and group-axiom objectives, and recognizes attributes by
//! comparing how far coupling versus decoupling moves an embedding
//! (relative moving distance). On top sit a deterministic SGD trainer, a
//! compositional zero-shot evaluation harness with closed-world and
//! generalized protocols, retrieval after attribute manipulation, and a
//! synthetic dataset generator with known ground truth for end-to-end
//! verification.

pub mod cli;
pub mod data;
pub mod dist;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod net;
pub mod objectives;
pub mod rmd;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use error::{Result, SymNetError};
