//! Matrix completion for panels whose entries are missing not at random.
//!
//! Missing entries are split into small groups; each group is completed on
//! an assembled submatrix that has a block missing pattern, using
//! nuclear-norm penalized least squares followed by a rank-r debiasing
//! projection. The debiased factors feed closed-form variance estimates for
//! group averages and multi-treatment effects.

pub mod completion;
pub mod debias;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod normal;
pub mod output;
pub mod panel;
pub mod solver;
pub mod subgroup;
pub mod treatment;

pub use error::{Error, Result};
pub use panel::{
    classify_mask, classify_pattern, load_panel, Mask, MissingPattern, ObservedPanel,
    PanelFormat, PatternKind, TreatmentAssignment,
};
