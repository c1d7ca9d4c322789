#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN-rejecting checks
//! Synthesis and simulation of semi-active vibration control with energy
//! harvesting: structural plant models, stochastic linearization, LMI
//! feasibility certificates, controller synthesis, a receding-horizon
//! control runtime and a time-domain simulation harness.

pub mod error;
pub mod linalg;
pub mod lti;

pub use error::{Error, Result};
pub mod params;
pub mod plant;
pub mod stochlin;
pub mod sdp;
pub mod feasibility;
pub mod synthesis;
pub mod pgc;
pub mod energy;
pub mod sim;
pub mod config;
pub mod pipeline;
pub mod artifacts;
pub mod report;
pub mod cli;
