//! Adversarial-robustness benchmark toolkit for AI-generated-image detectors.
//!
//! The crate trains a small zoo of differentiable detectors on a synthetic
//! fingerprinted corpus, crafts targeted L-infinity PGD adversarial examples
//! against single detectors and leave-one-out ensembles, writes the resulting
//! adversarial dataset to disk as lossless PNGs, and benchmarks detectors with
//! F1/Accuracy/AUROC transfer matrices — locally or through a small HTTP
//! scoring protocol.

pub mod attack;
pub mod datagen;
pub mod error;
pub mod graph;
pub mod harness;
pub mod imageio;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod remote;
pub mod rng;
pub mod tensor;
pub mod zoo;

pub use attack::{AttackConfig, AttackInit, AttackResult, TargetPolicy};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use manifest::{DatasetManifest, GeneratorId, Label, LoadedDataset, ManifestRecord, Split};
pub use metrics::{EvalReport, ScoredSample};
pub use model::Model;
pub use tensor::Tensor;
pub use zoo::{Detector, DetectorKind, DetectorSpec, TrainConfig};
