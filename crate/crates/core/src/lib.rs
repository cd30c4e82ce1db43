#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod error;
pub mod nn;
pub mod numkit;
pub mod optim;
pub mod peft;
pub mod policy;
pub mod flow;
pub mod ar;
pub mod contrastive;
pub mod dpo;
pub mod inference;

pub use error::{Error, Result};
