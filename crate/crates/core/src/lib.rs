//! Exemplar-free class-incremental learning with adversarial pseudo-replay.
//!
//! Tasks arrive as disjoint groups of classes. Old data is never kept; instead
//! the engine stores, per old class, a prototype (feature mean), a covariance,
//! and a handful of *indices and augmentation parameters* into the current
//! task's data. During training those candidates are replayed and pushed
//! toward their old-class prototype by a targeted gradient attack against the
//! frozen previous extractor, then used for knowledge distillation. After each
//! task the stored statistics are carried into the new feature space with a
//! per-class transfer matrix.
//!
//! Module map:
//!
//! * [`tensor`]: dense tensors and a reverse-mode tape
//! * [`model`]: MLP extractor, split cosine/linear head, snapshots
//! * [`data`]: task streams, synthetic generator, record/replay augmentation
//! * [`replay`]: candidate sampling and the online attack
//! * [`train`]: local CE / KD losses and the per-task loop
//! * [`calib`]: drift samples, transfer fit, calibration, shrinkage, SVD
//! * [`classify`]: linear / NCM / Mahalanobis heads and incremental metrics
//! * [`storage`]: byte accounting for everything the learner keeps
//! * [`pipeline`]: run configuration and the end-to-end driver

pub mod calib;
pub mod classify;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod replay;
pub mod storage;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

/// Global class identifier.
pub type ClassId = usize;
