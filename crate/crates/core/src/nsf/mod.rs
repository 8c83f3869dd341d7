//! The applications that sit on chain nodes: client at the head, neural
//! service functions in the middle, the model tail at the server. All three
//! speak the framed activation/gradient/result protocol from [`frame`].

pub mod frame;

mod client;
mod server;
mod service;

use serde::{Deserialize, Serialize};

pub use client::{ClientApp, ClientConfig};
pub use frame::{FrameError, FrameKind, MessageFrame, ReassemblyBuffer, FRAME_MAGIC};
pub use server::{ServerApp, ServerConfig};
pub use service::{NsfApp, NsfConfig};

pub const DEFAULT_ROUND_TIMEOUT_NS: u64 = 60_000_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Train,
    Infer,
}
