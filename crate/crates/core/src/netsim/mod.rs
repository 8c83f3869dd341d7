//! Deterministic discrete-event substrate network.
//!
//! Nodes exchange packets over bandwidth-limited FIFO links with
//! store-and-forward timing. All time is u64 nanoseconds, so interval sums
//! telescope exactly and identical inputs replay identical traces.

mod engine;
mod event;
mod link;
mod log;
mod stream;
mod topology;

pub use engine::{Action, App, ComputeModel, SteeringPolicy, World, WorldConfig};
pub use event::{EventQueue, ScheduledAt};
pub use link::{serialization_ns, Link, LinkDir};
pub use log::{
    message_path, ComputeKind, ComputeSpan, FrameDelivery, MetricRecord, MsgKind, PacketMeta,
    TraceDir, TraceRecord, TrafficLog,
};
pub use stream::{ConnId, Resequencer, Socket, SocketState};
pub use topology::{
    build_topology, LinkSpec, Node, NodeId, NodeSpec, Resources, Role, Topology, TopologyConfig,
};

use thiserror::Error;

pub const NS_PER_SEC: u64 = 1_000_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("duplicate node id {0}")]
    DuplicateNode(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("link ({0}, {1}) is invalid: {2}")]
    BadLink(String, String, String),
    #[error("node {0} has role {1} but no SID")]
    MissingSid(String, String),
    #[error("expected exactly one {role} node, found {count}")]
    RoleCount { role: String, count: usize },
    #[error("node {0} is unreachable from {1}")]
    Disconnected(String, String),
    #[error("default path hop ({0}, {1}) is not a link")]
    MissingPathLink(String, String),
    #[error("duplicate address {0}")]
    DuplicateAddress(String),
}
