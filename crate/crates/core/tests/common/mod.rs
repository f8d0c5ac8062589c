//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod gate_oracle;
pub mod gradcheck;
pub mod metric_oracle;
