//! # xtkd — a desk-scale cross-task knowledge distillation laboratory
//!
//! This crate reproduces, at a scale where every number can be audited, the
//! mechanics of feature distillation between neural networks trained on
//! different tasks:
//!
//! * an **inverted feature projector** that maps *teacher* features into the
//!   *student's* space (`Z_t * P`), instead of the traditional direction that
//!   projects the student up into the teacher's space;
//! * an SVD-based **decoupling** of the distillation distance into a
//!   knowledge-transfer term over the projected teacher's active spectrum and
//!   a regularisation term over the student's residual spectrum, with a
//!   verifiable triangle-inequality bound;
//! * a **teacher-free spectral regulariser** that penalises the Frobenius
//!   norm of the tail of the student feature spectrum directly.
//!
//! Everything runs full-batch on synthetic multi-task data with hand-rolled
//! numerics (dense matrices, one-sided Jacobi SVD, tape-based reverse-mode
//! autodiff), so results are bitwise reproducible from a seed.
//!
//! ## Layout
//!
//! | module | contents |
//! |---|---|
//! | [`linalg`] | dense matrices, one-sided Jacobi SVD, effective rank |
//! | [`autodiff`] | tape-based reverse-mode differentiation and `grad_check` |
//! | [`models`] | plain MLPs with an encoder/decoder split and SGD |
//! | [`tasks`] | synthetic shared-latent datasets, task losses, depth metrics |
//! | [`distill`] | projectors, distillation losses, the training loop |
//! | [`spectral`] | spectral tail loss, decoupled bound, spectrum traces |
//! | [`harness`] | config files, presets, CSV emission, the `xtkd` CLI core |
//!
//! ## Examples
//!
//! The `examples/` directory is the primary tour of the crate; each file is
//! a runnable, self-contained demonstration of one capability:
//!
//! ```text
//! cargo run --example svd_playground        # SVD, truncation, effective rank
//! cargo run --example gradient_check        # tape autodiff vs finite differences
//! cargo run --example train_baseline        # no-teacher training run
//! cargo run --example distill_directions    # inverted vs traditional projection
//! cargo run --example spectral_regularizer  # teacher-free tail penalty
//! cargo run --example bound_check           # decoupled-bound audit
//! cargo run --example spectrum_evolution    # projector spectrum over training
//! cargo run --example linear_bridge         # frozen encoder -> linear map -> frozen decoder
//! cargo run --example dataset_export        # synthetic data generation + CSV
//! ```
//!
//! The thin `xtkd` binary wraps the same library surface for scripted use
//! (`xtkd run <config>`, `xtkd preset <name>`, `xtkd bound-audit`,
//! `xtkd grad-audit`, `xtkd version`).

pub mod autodiff;
pub mod distill;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod spectral;
pub mod tasks;
pub mod util;

pub use error::{Error, Result};
pub use linalg::{effective_rank, svd, Matrix, SvdResult};
