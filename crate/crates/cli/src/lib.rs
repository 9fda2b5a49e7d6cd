//! Command implementations behind the `dpzero` binary.

pub mod commands;
pub mod verify;
