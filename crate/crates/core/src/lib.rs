//! Query-efficient data-free distillation from hard-label black-box teachers.
//!
//! Each training epoch has two stages. A freshly initialized generator is
//! first fitted against the current student (no teacher involvement). The
//! student is then distilled on a new synthetic batch whose labels are bought
//! from the teacher, one query per sample, under a fixed query budget.

pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod oracle;
pub mod report;
pub mod service;
pub mod teacher;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
