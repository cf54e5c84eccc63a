//! Interrupt-safe control-flow attestation toolkit.

pub mod cfg;
pub mod cli;
pub mod harness;
pub mod instrument;
pub mod overhead;
pub mod protocol;
pub mod runtime;
pub mod synth;
pub mod verifier;
pub mod vm;
