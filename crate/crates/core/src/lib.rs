//! Lifelong (domain-incremental) person re-identification toolkit.
//!
//! A frozen convolutional backbone is adapted to each deployment domain
//! through tunable batch-norm layers and lightweight depth-wise
//! semantics-adaption kernels. Each domain's adaptation is captured into a
//! parameter bank and selected at inference time by camera, which makes
//! earlier domains immune to later training. A distillation + exemplar
//! baseline and a plain fine-tune baseline are included for comparison,
//! along with retrieval evaluation (mAP / CMC) and storage accounting.

pub mod backbone;
pub mod bank;
pub mod bn;
pub mod data;
pub mod error;
pub mod eval;
pub mod kd;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod sa;
pub mod train;

pub use error::{Error, Result};
