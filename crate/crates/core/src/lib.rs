//! Tapped-delay-line TDC nonlinearity workbench.
//!
//! The crate covers four layers that feed into each other:
//!
//! * [`tdc_model`]: delay lines, defect injection, the mitigation transform and
//!   the time-to-code transfer function.
//! * [`characterize`]: code-density histograms, bin-width estimation, DNL/INL and
//!   single-shot precision.
//! * [`qkd`]: the analytical coincidence-window / accidental-rate / QBER model,
//!   secret-fraction estimate and singles-rate sweeps.
//! * [`montecarlo`]: an event-level photon-pair simulator and coincidence matcher
//!   used as an independent check on the analytical model.
//!
//! [`presets`] holds the synthetic TDC-1/TDC-2 delay lines and [`cli`] wires
//! everything into the `tdcqkd` command-line tool.

// `!(x > 0.0)` is used on purpose so NaN is rejected alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod characterize;
pub mod cli;
pub mod error;
pub mod montecarlo;
pub mod presets;
pub mod qkd;
pub mod tdc_model;

pub use error::{Error, Result};
