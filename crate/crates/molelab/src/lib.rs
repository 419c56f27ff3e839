//! Desk-scale laboratory for mixture-of-LoRA-experts layers with
//! entropy-guided hybrid routing.
//!
//! The crate provides, bottom to top:
//!
//! - [`numerics`]: dense `f64` matrices/vectors, softmax, a
//!   central-difference gradient oracle, and a seeded ChaCha8 RNG.
//! - [`entropy`]: Shannon and Tsallis entropy, exact gradients, and the
//!   normalized entropy the router thresholds on.
//! - [`routing`]: Top-k / Top-p / Top-(p,k) selection and the hybrid
//!   entropy-dispatched router.
//! - [`mole`]: LoRA experts, the routed layer forward pass, and its
//!   hand-derived backward pass.
//! - [`losses`]: task loss plus the auxiliary objective (Tsallis entropy
//!   loss and load-balance loss) with exact gradients.
//! - [`trainer`]: synthetic task generation, a deterministic training
//!   loop, ablation grids, and a finite-difference gradient checker.
//! - [`metrics`]: routing traces, per-round statistics, CSV/JSON export.
//! - [`config`]: the TOML experiment file with dotted-path overrides.
//! - [`cli`]: the `molelab` binary's subcommands.
//!
//! Every runnable capability also ships as an example; see the README.

pub mod cli;
pub mod config;
pub mod entropy;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mole;
pub mod numerics;
pub mod routing;
pub mod trainer;

pub use error::{Error, Result};
