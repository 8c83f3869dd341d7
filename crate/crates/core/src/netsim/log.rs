//! Simulation trace logs. Apps never compute metrics; everything is
//! reconstructed afterwards from these records.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::stream::ConnId;
use super::topology::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceDir {
    Tx,
    Rx,
}

/// Message classes carried in packet metadata. Handshake segments use
/// round 0; data rounds start at 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgKind {
    Open,
    OpenAck,
    Act,
    Grad,
    Result,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeKind {
    Forward,
    Backward,
}

/// Rides with an inner packet hop to hop. `origin` is the node whose
/// application produced the message, so a relayed message starts a new
/// meta while the payload bytes repeat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketMeta {
    pub msg_id: u64,
    pub origin: NodeId,
    pub round: u32,
    pub epoch: u32,
    pub kind: MsgKind,
    pub seg_index: u32,
}

/// One packet event on one link. Tx is stamped at serialization start
/// with `end_ns` at serialization end; Rx has both at arrival. `bytes`
/// is the full wire size including any encapsulation; `encap_bytes` is
/// the encapsulation share alone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_ns: u64,
    pub end_ns: u64,
    pub dir: TraceDir,
    pub node: NodeId,
    pub peer: NodeId,
    pub bytes: usize,
    pub encap_bytes: usize,
    pub meta: PacketMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeSpan {
    pub node: NodeId,
    pub round: u32,
    pub epoch: u32,
    pub kind: ComputeKind,
    pub start_ns: u64,
    pub end_ns: u64,
}

/// A fully reassembled message frame at its consumer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDelivery {
    pub node: NodeId,
    pub conn: ConnId,
    pub round: u32,
    pub epoch: u32,
    pub kind: MsgKind,
    pub bytes: usize,
    pub first_byte_ns: u64,
    pub last_byte_ns: u64,
}

/// An application-reported scalar, e.g. a loss value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub t_ns: u64,
    pub node: NodeId,
    pub name: String,
    pub round: u32,
    pub epoch: u32,
    pub value: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrafficLog {
    pub records: Vec<TraceRecord>,
}

impl TrafficLog {
    pub fn push(&mut self, rec: TraceRecord) {
        self.records.push(rec);
    }

    pub fn total_tx_bytes(&self) -> u64 {
        self.records
            .iter()
            .filter(|r| r.dir == TraceDir::Tx)
            .map(|r| r.bytes as u64)
            .sum()
    }

    pub fn total_tx_encap_bytes(&self) -> u64 {
        self.records
            .iter()
            .filter(|r| r.dir == TraceDir::Tx)
            .map(|r| r.encap_bytes as u64)
            .sum()
    }

    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reconstructs the node path a message class took in `round`, from Tx
/// records of the first chunk of each hop. Relay legs are stitched in
/// time order and the seam nodes deduplicated, so a chain that revisits
/// a transit node keeps the revisit.
pub fn message_path(records: &[TraceRecord], round: u32, kind: MsgKind) -> Vec<NodeId> {
    let mut hops: Vec<&TraceRecord> = records
        .iter()
        .filter(|r| {
            r.dir == TraceDir::Tx
                && r.meta.round == round
                && r.meta.kind == kind
                && r.meta.seg_index == 0
        })
        .collect();
    hops.sort_by_key(|r| r.t_ns);
    let mut path = Vec::new();
    let mut leg: Option<u64> = None;
    for rec in &hops {
        if leg != Some(rec.meta.msg_id) {
            leg = Some(rec.meta.msg_id);
            if path.last() != Some(&rec.node) {
                path.push(rec.node);
            }
        }
        path.push(rec.peer);
    }
    path
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx(t_ns: u64, node: NodeId, peer: NodeId, msg_id: u64, origin: NodeId) -> TraceRecord {
        TraceRecord {
            t_ns,
            end_ns: t_ns,
            dir: TraceDir::Tx,
            node,
            peer,
            bytes: 100,
            encap_bytes: 0,
            meta: PacketMeta {
                msg_id,
                origin,
                round: 1,
                epoch: 1,
                kind: MsgKind::Act,
                seg_index: 0,
            },
        }
    }

    #[test]
    fn path_stitches_relay_legs() {
        // v1..v8 as ids 0..7; legs 0->5 via 1,2 then 5->6 via 2,3 then 6->7 via 3,4.
        let recs = vec![
            tx(0, 0, 1, 10, 0),
            tx(10, 1, 2, 10, 0),
            tx(20, 2, 5, 10, 0),
            tx(100, 5, 2, 11, 5),
            tx(110, 2, 3, 11, 5),
            tx(120, 3, 6, 11, 5),
            tx(200, 6, 3, 12, 6),
            tx(210, 3, 4, 12, 6),
            tx(220, 4, 7, 12, 6),
        ];
        assert_eq!(
            message_path(&recs, 1, MsgKind::Act),
            vec![0, 1, 2, 5, 2, 3, 6, 3, 4, 7]
        );
        assert!(message_path(&recs, 1, MsgKind::Grad).is_empty());
        assert!(message_path(&recs, 2, MsgKind::Act).is_empty());
    }

    #[test]
    fn path_ignores_later_chunks_and_rx() {
        let mut recs = vec![tx(0, 0, 1, 10, 0), tx(5, 0, 1, 10, 0)];
        recs[1].meta.seg_index = 1;
        let mut rx = tx(9, 1, 0, 10, 0);
        rx.dir = TraceDir::Rx;
        recs.push(rx);
        assert_eq!(message_path(&recs, 1, MsgKind::Act), vec![0, 1]);
    }

    #[test]
    fn jsonl_dump_is_line_per_record() {
        let mut log = TrafficLog::default();
        log.push(tx(0, 0, 1, 1, 0));
        log.push(tx(1, 1, 2, 1, 0));
        let mut buf = Vec::new();
        log.dump_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().all(|l| l.contains("\"msg_id\":1")));
    }
}
