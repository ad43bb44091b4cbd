//! Configuration, expression models and the experiment runner behind the
//! `mfdelay` binary.

pub mod config;
pub mod expr;
pub mod runner;
