//! Continual learning with dependency-preserving chunked hypernetworks.
//!
//! A hypernetwork generates the parameters of a target classifier in
//! fixed-size chunks, conditioned on a learned task embedding. Feed-forward
//! generators emit chunks independently; the LSTM generator threads hidden
//! state across chunks, so later chunks depend on earlier ones. Forgetting
//! is controlled either by an output-space snapshot penalty (optionally
//! Fisher-weighted) or, in the growth variant, by freezing shared weights
//! and growing small per-task ones.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`tape`] — dense f64 tensors and reverse-mode autodiff
//! * [`hypernet`] — the three generators and their state
//! * [`target`] — the generated ReLU MLP classifier
//! * [`regularize`] — snapshot and importance-weighted penalties, Fisher
//! * [`optim`] / [`trainer`] — Adam, lookahead, and the per-task loop
//! * [`eval`] — CL1/CL2/CL3 protocols and metrics
//! * [`data`] — IDX parsing, Split/Permuted MNIST, synthetic streams
//! * [`experiment`] / [`config`] — runs, artifacts, and configuration

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod hypernet;
pub mod layout;
pub mod optim;
pub mod regularize;
pub mod rng;
pub mod tape;
pub mod target;
pub mod tensor;
pub mod trainer;

pub use config::{
    parse_config, DatasetKind, ExperimentConfig, ModelKind, OptKind, RegKind, Scenario,
    TrainConfig,
};
pub use error::{Error, Result};
pub use eval::{compression_ratio, evaluate_task, infer_task, MetricsRecord};
pub use experiment::{report, run_experiment};
pub use hypernet::{HyperDims, HypernetState, ParamMap};
pub use layout::{build_layout, HeadSelector, MainNetLayout};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use trainer::Learner;

/// Keeps the guide's code blocks compiling: every chapter is also a doctest.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(tensors_and_autodiff, "../../../book/src/tensors-and-autodiff.md");
    chapter!(hypernetworks, "../../../book/src/hypernetworks.md");
    chapter!(regularization, "../../../book/src/regularization.md");
    chapter!(growth, "../../../book/src/growth.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
}
