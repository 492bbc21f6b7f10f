//! Offline reinforcement learning for partially observable clinical
//! decision problems.
//!
//! The pipeline in this crate trains an attention-based Q-network over
//! windows of recent observations (alongside memoryless MLP and recurrent
//! LSTM baselines), entirely from logged episodes:
//!
//! * [`tensor`] — f64 tensors, a reverse-mode autodiff tape, Adam, binary
//!   checkpoints, and finite-difference gradient checking.
//! * [`net`] — the three Q-network architectures with dueling heads and
//!   attention-weight capture.
//! * [`replay`] — proportional prioritized experience replay on a sum tree.
//! * [`cohort`] — episode data model, clinical reward functions, action
//!   discretization, cohort files, and a synthetic partially observable
//!   cohort generator with ground-truth artifacts.
//! * [`train`] — double-Q dueling TD training with stratified splits.
//! * [`ope`] — behavior cloning and weighted doubly-robust off-policy
//!   evaluation with per-split retraining.
//! * [`interpret`] — attention trace extraction, attention–marker
//!   correlation, and SVG trace figures.
//! * [`commands`] — the five run modes used by the CLI (generate, train,
//!   evaluate, interpret, gradcheck) on a shared run configuration.
//!
//! Everything is deterministic given a seed: random streams are derived per
//! component via [`rng`], parameter iteration is insertion-ordered, and all
//! parallel reductions preserve order. Running the same configuration twice
//! yields byte-identical checkpoints and reports.

#![forbid(unsafe_code)]

pub mod cohort;
pub mod commands;
pub mod error;
pub mod interpret;
pub mod net;
pub mod ope;
pub mod replay;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
