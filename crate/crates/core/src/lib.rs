//! Self-supervised visual pretraining by relation matching: a student
//! encoder learns to reproduce a momentum teacher's sharpened similarity
//! distribution over a queue of past embeddings.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod relational;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default training precision.
pub type F = f32;

pub type MemoryQueue32 = relational::MemoryQueue<f32>;
pub type MemoryQueue64 = relational::MemoryQueue<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type TemperaturePair32 = relational::TemperaturePair<f32>;
pub type EncoderNet32 = model::EncoderNet<f32>;
pub type StudentTeacherPair32 = model::StudentTeacherPair<f32>;
pub type EmbeddingBatch32 = model::EmbeddingBatch<f32>;
