//! Library side of the command-line crate: configuration, the resumable
//! experiment harness, report writers, and the numerical self-tests.

pub mod config;
pub mod experiments;
pub mod report;
pub mod selftest;
