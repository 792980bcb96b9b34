// `!(x > 0.0)` style checks are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod action_codec;
pub mod controller;
pub mod error;
pub mod formats;
pub mod geometry;
pub mod kinematics;
pub mod motion_ref;
pub mod skr;

pub use error::{Error, Result};
