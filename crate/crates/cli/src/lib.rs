//! Command-line frontend for the `decoh` simulator: configuration, dispatch
//! and output emission.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod commands;
pub mod config;
pub mod output;
pub mod selftest;
