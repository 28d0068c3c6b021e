//! Controlled counterexample harness for compression-style data proxies.
//!
//! Two synthetic pretraining distributions are generated from a
//! background/relevance grammar, a small causal transformer is pretrained on
//! each, and the runs are compared along two axes:
//!
//! * a task-agnostic compression proxy computed from validation loss, and
//! * OOD accuracy of an MLP probe fit on frozen features.
//!
//! The modules follow the pipeline order: [`vocab`] and [`data`] build the
//! datasets, [`tensor`] provides reverse-mode differentiation, [`model`] is
//! the backbone, [`pretrain`] and [`optim`] train it and score the proxy,
//! [`probe`] runs the two probing protocols, [`metrics`] turns a pair of runs
//! into gaps and criteria, and [`experiment`], [`chart`] and [`verify`] drive
//! seed sweeps and emit reports.

pub mod chart;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod verify;
pub mod vocab;

pub use error::{Error, Result};
