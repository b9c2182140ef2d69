//! Minimax robust generalized least squares and design for possibly
//! misspecified regression models.
//!
//! The crate computes worst-case losses of GLS estimates over norm-bounded
//! classes of error covariance matrices, the maximum integrated mean squared
//! prediction error (IMSPE) of a design/precision pair, minimax precision
//! matrices, and minimax designs found by particle swarm search.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covclasses;
pub mod designopt;
pub mod error;
pub mod gls;
pub mod imspe;
pub mod linalg;
pub mod linmodel;
pub mod output;
pub mod precopt;
pub mod ratio;
pub mod rng;
pub mod simlab;

pub use error::{Error, Result};
pub use linmodel::{
    build_regressor_matrix, indicator_from_design, orthonormalize, Design, DesignFile,
    DesignSpace, IndicatorStructure, ModelFamily, ModelSpec, OrthoBasis, Problem,
    RegressorMatrix,
};
