//! Best-policy identification in linear MDPs under a generative model.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: feature maps, discounted and episodic linear MDPs, exact planning,
//!   instance generation and the JSON instance format.
//! - [`design`]: feature matrices, G-optimal designs and realized allocations.
//! - [`estimation`]: ridge least-squares estimation of the MDP parameters and
//!   planning in the (possibly improper) plug-in MDP.
//! - [`bpi`]: the G-sampling-and-stop identification loops (discounted and
//!   episodic), their stopping threshold and characteristic-time bounds.
//! - [`oracles`]: executable versions of the bound chain used as test oracles.
//! - [`bundled`]: small reference instances shipped with the crate.
//! - [`harness`]: experiment plans, seeded trial batches and reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bpi;
pub mod bundled;
pub mod design;
pub mod error;
pub mod estimation;
pub mod harness;
mod linalg;
pub mod mdp;
pub mod oracles;

pub use error::{Error, Result};
