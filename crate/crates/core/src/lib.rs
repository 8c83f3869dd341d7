//! Deterministic user-space emulation of source-routed service chains that
//! execute split neural workloads on an emulated substrate network.
//!
//! The crate is organized bottom-up:
//!
//! - [`srv6`]: packet model and segment-routing header codec
//! - [`flow`]: per-proxy flow association tables (5-tuple -> stored headers)
//! - [`nn`]: from-scratch dense-layer networks, split into chained sub-models
//! - [`netsim`]: discrete-event substrate network (links, streams, event loop)
//! - [`nsf`]: neural service function endpoints (framing, intercept, chaining)
//! - [`controller`]: link monitor that rewrites segment lists on congestion
//! - [`scenario`]: experiment harness (configs, runners, metrics, reports)

pub mod controller;
pub mod flow;
pub mod netsim;
pub mod nn;
pub mod nsf;
pub mod scenario;
pub mod srv6;
