//! A userspace simulator of a microkernel-based TEE with TrustZone-style
//! world switching.

pub mod harness;
pub mod microkernel;
pub mod monitor;
pub mod rng;
pub mod runtime;
pub mod secure_boot;
pub mod security_services;
pub mod root_task;
pub mod trusted_apps;
