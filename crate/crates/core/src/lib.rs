//! Emulation of data-parallel collective communication.
//!
//! One real worker trains against an emulator process that impersonates the
//! remaining ranks of a ring, replaying the boundary of each collective with
//! dummy payloads and modelled delays.

pub mod bench;
pub mod clock;
pub mod config;
pub mod dag;
pub mod delay;
pub mod engine;
pub mod harness;
pub mod report;
pub mod session;
pub mod verify;
pub mod wire;
