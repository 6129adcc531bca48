//! Test-only oracles shared by the integration suites. Nothing here calls into
//! the solver paths it is used to check.
#![allow(dead_code)]

pub mod lp;
pub mod rng;
pub mod extraction;
pub mod golden;
