//! Simulation, planning and evaluation toolkit for bronchoscopically deployed
//! steerable needles in the lung.
//!
//! The crate covers the full semi-autonomous procedure: synthetic anatomy,
//! fiducial and airway-tree registration, three-stage motion planning,
//! bevel-tip needle kinematics with 5-DOF sensing, respiratory gating, closed
//! loop steering and cohort-level evaluation against a straight-needle
//! baseline.

// `!(x > 0.0)` checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anatomy;
pub mod control;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod needle;
pub mod planner;
pub mod registration;
pub mod respiration;

pub use error::{Error, Result};
