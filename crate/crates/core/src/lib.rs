// Negated float comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod bench;
pub mod closed_loop;
pub mod config;
pub mod error;
pub mod experiment;
pub mod network;
pub mod ocp;
pub mod reference;
pub mod terminal;
pub mod trajectory;

pub use error::{Error, Result};
