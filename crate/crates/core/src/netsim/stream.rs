//! Reliable in-order byte streams over the emulated net. The network
//! never drops, so a handshake plus sequence bookkeeping is enough.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::srv6::Sid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConnId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SocketState {
    /// Open sent, waiting for the ack.
    Opening,
    Established,
}

/// One endpoint of a stream. `local` may be spoofed on a transparent
/// accept; the owning node keeps serving it regardless.
#[derive(Clone, Debug)]
pub struct Socket {
    pub conn: ConnId,
    pub local: (Sid, u16),
    pub peer: (Sid, u16),
    pub state: SocketState,
    pub send_next_seq: u64,
    pub resequencer: Resequencer,
}

impl Socket {
    pub fn opener(conn: ConnId, local: (Sid, u16), peer: (Sid, u16)) -> Socket {
        Socket {
            conn,
            local,
            peer,
            state: SocketState::Opening,
            send_next_seq: 0,
            resequencer: Resequencer::default(),
        }
    }

    pub fn accepted(conn: ConnId, local: (Sid, u16), peer: (Sid, u16)) -> Socket {
        Socket {
            conn,
            local,
            peer,
            state: SocketState::Established,
            send_next_seq: 0,
            resequencer: Resequencer::default(),
        }
    }

    /// Claims stream offsets for an outgoing chunk.
    pub fn take_seq(&mut self, len: usize) -> u64 {
        let seq = self.send_next_seq;
        self.send_next_seq += len as u64;
        seq
    }
}

/// Reorders received chunks by stream offset and releases them in
/// order, each tagged with its arrival time.
#[derive(Clone, Debug, Default)]
pub struct Resequencer {
    pending: BTreeMap<u64, (Vec<u8>, u64)>,
    next_seq: u64,
}

impl Resequencer {
    pub fn insert(&mut self, seq: u64, bytes: Vec<u8>, t_ns: u64) {
        if seq < self.next_seq {
            return;
        }
        self.pending.entry(seq).or_insert((bytes, t_ns));
    }

    /// Contiguous chunks from the current stream position, oldest first.
    pub fn drain_ready(&mut self) -> Vec<(Vec<u8>, u64)> {
        let mut out = Vec::new();
        while let Some(entry) = self.pending.first_entry() {
            if *entry.key() != self.next_seq {
                break;
            }
            let (bytes, t_ns) = entry.remove();
            self.next_seq += bytes.len() as u64;
            out.push((bytes, t_ns));
        }
        out
    }

    pub fn bytes_delivered(&self) -> u64 {
        self.next_seq
    }
}
