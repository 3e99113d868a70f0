//! Additive quantile regression with a smoothed pinball loss.
//!
//! [`model::fit_quantile`] runs the full pipeline for one quantile level and
//! [`model::fit_multi`] fits several in parallel. The guide in `book/` walks
//! through each stage.

// NaN must fail range checks, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod basis;
pub mod calibrate;
pub mod data;
pub mod elf;
pub mod error;
pub mod formula;
pub mod laml;
pub mod matrix_serde;
pub mod model;
pub mod numeric;
pub mod persist;
pub mod pirls;
pub mod preliminary;
pub mod simulate;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/formulas.md")]
    pub struct Formulas;
    #[doc = include_str!("../../../book/src/elf-loss.md")]
    pub struct ElfLoss;
    #[doc = include_str!("../../../book/src/fitting.md")]
    pub struct Fitting;
    #[doc = include_str!("../../../book/src/calibration.md")]
    pub struct Calibration;
    #[doc = include_str!("../../../book/src/bandwidth.md")]
    pub struct Bandwidth;
    #[doc = include_str!("../../../book/src/checking.md")]
    pub struct Checking;
    #[doc = include_str!("../../../book/src/multiple-quantiles.md")]
    pub struct MultipleQuantiles;
    #[doc = include_str!("../../../book/src/functional-effects.md")]
    pub struct FunctionalEffects;
    #[doc = include_str!("../../../book/src/model-files.md")]
    pub struct ModelFiles;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
