//! Scenario harness for out-of-things debugging: launches device and local
//! VMs, drives them over the wire and reports CSV.

pub mod config;
pub mod node;
pub mod report;
pub mod scenarios;
pub mod stats;
