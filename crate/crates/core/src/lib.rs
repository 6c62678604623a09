//! Mask-to-point weakly-supervised point correspondence learning.
// Negated comparisons are used on purpose so NaN fails validation checks.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod data;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod maskops;
pub mod matching;
pub mod model;
pub mod sampling;
pub mod train;
