//! Scenarios and models shared by the golden, property, oracle and
//! acceptance targets.
#![allow(dead_code)]

pub mod cases;
pub mod figures;
pub mod pool_model;
