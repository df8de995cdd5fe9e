// NaN-rejecting `!(x > 0.0)` checks and published coefficient tables are intended.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision, clippy::needless_range_loop)]

pub mod cli;
pub mod error;
pub mod linalg;
pub mod matern;
pub mod objectives;
pub mod optimizer;
pub mod predict;
pub mod replication;
pub mod rng;
pub mod selection;
pub mod simulate;
pub mod spatial_data;
pub mod special;

pub use error::{Error, Result};
