//! Two-stage anomaly detection pipeline: anomaly amplification over a frozen
//! feature pyramid, then normality distillation into a student decoder,
//! scored by teacher-student feature discrepancy.
//!
//! Built on a small eager reverse-mode autodiff tape (`tape`) over dense
//! f32 tensors, with procedural data synthesis (`synth`), the frozen
//! encoder (`teacher`), the residual amplification module (`raa`), the
//! bottleneck/decoder pair (`student`), training objectives (`losses`),
//! the two-stage trainer (`trainer`), inference scoring (`scoring`) and
//! evaluation metrics (`metrics`).

pub mod adam;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod raa;
pub mod rng;
pub mod scoring;
pub mod student;
pub mod synth;
pub mod tape;
pub mod teacher;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
