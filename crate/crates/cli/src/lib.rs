//! Configuration parsing and subcommands behind the `seu` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
