//! Point-to-point links with store-and-forward FIFO queueing.

use super::topology::{LinkSpec, NodeId};
use super::NS_PER_SEC;

/// Direction over an undirected link; each direction queues independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkDir {
    AtoB,
    BtoA,
}

#[derive(Clone, Debug)]
pub struct Link {
    pub a: NodeId,
    pub b: NodeId,
    pub bw_bps: u64,
    pub default_bw_bps: u64,
    pub delay_ns: u64,
    pub mtu: u32,
    /// When the transmitter in each direction frees up.
    busy_until: [u64; 2],
}

impl Link {
    pub fn new(a: NodeId, b: NodeId, spec: &LinkSpec) -> Link {
        let bw_bps = (spec.bw_mbps * 1e6).round() as u64;
        Link {
            a,
            b,
            bw_bps,
            default_bw_bps: bw_bps,
            delay_ns: spec.delay_us * 1_000,
            mtu: spec.mtu,
            busy_until: [0, 0],
        }
    }

    pub fn dir_from(&self, from: NodeId) -> LinkDir {
        if from == self.a {
            LinkDir::AtoB
        } else {
            debug_assert_eq!(from, self.b);
            LinkDir::BtoA
        }
    }

    /// Claims the transmitter for `bytes` starting no earlier than `now`;
    /// returns (serialization start, arrival time at the far end). The
    /// rate in force when serialization starts applies to the whole packet.
    pub fn transmit(&mut self, now: u64, from: NodeId, bytes: usize) -> (u64, u64) {
        let slot = match self.dir_from(from) {
            LinkDir::AtoB => 0,
            LinkDir::BtoA => 1,
        };
        let start = now.max(self.busy_until[slot]);
        let done = start + serialization_ns(bytes, self.bw_bps);
        self.busy_until[slot] = done;
        (start, done + self.delay_ns)
    }

    pub fn set_bw_mbps(&mut self, bw_mbps: f64) {
        self.bw_bps = (bw_mbps * 1e6).round() as u64;
    }

    pub fn restore_bw(&mut self) {
        self.bw_bps = self.default_bw_bps;
    }
}

/// Time to clock `bytes` onto the wire at `bw_bps`, rounded up.
pub fn serialization_ns(bytes: usize, bw_bps: u64) -> u64 {
    let bits = bytes as u128 * 8 * NS_PER_SEC as u128;
    bits.div_ceil(bw_bps as u128) as u64
}
