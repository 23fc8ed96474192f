// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod calc;
pub mod diag;
pub mod ensemble;
pub mod error;
pub mod geo;
pub mod io;
pub mod locality;
pub mod models;
pub mod obsprep;
pub mod oracle;
pub mod prm;
pub mod twin;
pub mod update;

pub use error::{Error, Result};
