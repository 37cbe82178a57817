//! Dense long-range point tracking.
//!
//! Given a video and a query frame index, the tracker estimates, for every
//! pixel of the query frame, its displacement, visibility and confidence in
//! every other frame — a `T×H×W×4` field that can be read as long-range
//! optical flow maps or sampled into point trajectories.
//!
//! The crate is self-contained: it ships its own dense-tensor library with
//! reverse-mode differentiation ([`numerics`]), a convolutional encoder
//! ([`encoder`]), multi-scale correlation ([`correlation`]), a recurrent
//! space-time refinement module ([`refiner`]), sliding-window video
//! orchestration ([`tracker`]), training losses ([`supervision`]), tracking
//! metrics ([`metrics`]), an exact-ground-truth synthetic data generator
//! ([`synthdata`]) and a desk-scale training harness with file I/O
//! ([`harness`]).
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod correlation;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod refiner;
pub mod supervision;
pub mod synthdata;
pub mod tracker;

pub use error::{Error, Result};
