//! Command-line pipeline and HTTP service around the explanation engine.

pub mod commands;
pub mod service;
