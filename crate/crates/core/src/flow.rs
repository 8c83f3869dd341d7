//! Flow association tables for transparent chain proxies.
//!
//! When a proxy node decapsulates an incoming packet it remembers the outer
//! header and routing header under the inner packet's 5-tuple. When the
//! proxy later opens its own connection toward the target, the stored entry
//! is re-keyed to the new connection, so every packet the proxy emits is
//! wrapped with the same routing state and keeps hitting the next segment.

use std::collections::BTreeMap;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::srv6::{
    encapsulate_with, encode_srh, five_tuple_of, process_endpoint, reverse_srh, EndpointAction,
    FiveTuple, InnerPacket, Ipv6LikeHeader, Sid, Srh, SrhError, Srv6Packet,
};

/// Keys are connection identities as seen on the inner packets.
pub type FlowKey = FiveTuple;

/// Headers to restore on egress: the outer header and the routing header
/// exactly as they stand after this node's segment processing. `decapped`
/// marks an entry written at the final segment, where the encapsulation
/// came off entirely and the headers are kept only to route responses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowValue {
    pub outer: Ipv6LikeHeader,
    pub srh: Srh,
    pub decapped: bool,
}

#[derive(Clone, Debug)]
struct Entry {
    value: FlowValue,
    last_touch_ns: u64,
    touch_seq: u64,
    /// Keys created from this one by re-keying; refreshed together.
    derived: Vec<FlowKey>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlowError {
    #[error("no flow entry for {0}")]
    MissingFlow(FiveTuple),
    #[error("packet is not addressed to this node")]
    NotLocal,
    #[error(transparent)]
    Srh(#[from] SrhError),
}

/// Result of ingress processing: the decapsulated inner packet, the headers
/// that were stored, and the victim if the table was full.
#[derive(Debug)]
pub struct IngressOutcome {
    pub inner: InnerPacket,
    pub stored: FlowValue,
    pub evicted: Option<FlowKey>,
}

/// What egress processing produced for a packet.
#[derive(Debug)]
pub enum EgressOutcome {
    /// The packet's flow had stored headers; it leaves encapsulated.
    Encapsulated(Srv6Packet),
    /// No association; the packet leaves untouched.
    PassThrough(InnerPacket),
}

/// Association table of one proxy node.
#[derive(Clone, Debug)]
pub struct FlowTable {
    entries: BTreeMap<FlowKey, Entry>,
    capacity: usize,
    idle_timeout_ns: u64,
    touch_counter: u64,
    evictions: u64,
}

pub const DEFAULT_CAPACITY: usize = 4096;
pub const DEFAULT_IDLE_TIMEOUT_NS: u64 = 300_000_000_000;

impl Default for FlowTable {
    fn default() -> Self {
        FlowTable::new(DEFAULT_CAPACITY, DEFAULT_IDLE_TIMEOUT_NS)
    }
}

impl FlowTable {
    pub fn new(capacity: usize, idle_timeout_ns: u64) -> Self {
        assert!(capacity > 0);
        FlowTable {
            entries: BTreeMap::new(),
            capacity,
            idle_timeout_ns,
            touch_counter: 0,
            evictions: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    fn touch(&mut self, key: &FlowKey, now_ns: u64) {
        self.touch_counter += 1;
        if let Some(e) = self.entries.get_mut(key) {
            e.last_touch_ns = now_ns;
            e.touch_seq = self.touch_counter;
        }
    }

    fn purge_idle(&mut self, now_ns: u64) {
        let timeout = self.idle_timeout_ns;
        let expired: Vec<FlowKey> = self
            .entries
            .iter()
            .filter(|(_, e)| now_ns.saturating_sub(e.last_touch_ns) > timeout)
            .map(|(k, _)| *k)
            .collect();
        for k in expired {
            self.entries.remove(&k);
        }
    }

    /// Store `value` under `key`, refreshing any re-keyed aliases so the
    /// whole connection family carries the same routing state. Returns the
    /// evicted key if the table was full.
    pub fn store(&mut self, key: FlowKey, value: FlowValue, now_ns: u64) -> Option<FlowKey> {
        self.purge_idle(now_ns);
        let mut evicted = None;
        if !self.entries.contains_key(&key) && self.entries.len() >= self.capacity {
            // Oldest entry by touch order goes first.
            let victim = self
                .entries
                .iter()
                .min_by_key(|(_, e)| e.touch_seq)
                .map(|(k, _)| *k);
            if let Some(v) = victim {
                log::warn!("flow table full ({}), evicting {}", self.capacity, v);
                self.entries.remove(&v);
                self.evictions += 1;
                evicted = Some(v);
            }
        }
        self.touch_counter += 1;
        let seq = self.touch_counter;
        let derived = match self.entries.get_mut(&key) {
            Some(e) => {
                e.value = value.clone();
                e.last_touch_ns = now_ns;
                e.touch_seq = seq;
                e.derived.clone()
            }
            None => {
                self.entries.insert(
                    key,
                    Entry {
                        value: value.clone(),
                        last_touch_ns: now_ns,
                        touch_seq: seq,
                        derived: Vec::new(),
                    },
                );
                Vec::new()
            }
        };
        for alias in derived {
            if let Some(e) = self.entries.get_mut(&alias) {
                e.value = value.clone();
                e.last_touch_ns = now_ns;
            }
        }
        evicted
    }

    pub fn get(&self, key: &FlowKey) -> Option<&FlowValue> {
        self.entries.get(key).map(|e| &e.value)
    }

    /// Serialize as an ordered map of canonical 5-tuple strings to the hex
    /// encoding of the stored routing header.
    pub fn dump_json(&self) -> Value {
        let mut map = Map::new();
        for (key, entry) in &self.entries {
            let bytes = encode_srh(&entry.value.srh).expect("stored header encodes");
            let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
            map.insert(key.to_string(), Value::String(hex));
        }
        Value::Object(map)
    }
}

/// Ingress side of a proxy: run segment-endpoint processing for `local_sid`,
/// strip the encapsulation, and store the updated headers under the inner
/// packet's 5-tuple.
pub fn ingress_decap(
    pkt: Srv6Packet,
    local_sid: Sid,
    table: &mut FlowTable,
    now_ns: u64,
) -> Result<IngressOutcome, FlowError> {
    let received = FlowValue {
        outer: pkt.outer,
        srh: pkt.srh.clone(),
        decapped: true,
    };
    let (value, inner) = match process_endpoint(pkt, local_sid) {
        EndpointAction::Forward(updated) => {
            let value = FlowValue {
                outer: updated.outer,
                srh: updated.srh,
                decapped: false,
            };
            (value, updated.inner)
        }
        // Final segment: keep the headers as received so responses can be
        // routed back along the chain.
        EndpointAction::DecapForward(inner) => (received, inner),
        EndpointAction::NotMine => return Err(FlowError::NotLocal),
    };
    let key = five_tuple_of(&inner);
    let evicted = table.store(key, value.clone(), now_ns);
    Ok(IngressOutcome {
        inner,
        stored: value,
        evicted,
    })
}

/// Egress policy of a flow-table node, applied to every plain packet it
/// originates or forwards.
///
/// A packet whose own 5-tuple has an entry is moving in the stored flow's
/// direction: restore the stored headers verbatim, or pass through when the
/// encapsulation already terminated here. A packet whose reversed 5-tuple
/// has an entry is a response: rebuild the routing header with the segments
/// in reverse visit order, positioned past this node, with this node as the
/// outer source. A response that has no segments left to visit goes plain.
pub fn steer_egress(
    pkt: InnerPacket,
    own_addr: Sid,
    table: &mut FlowTable,
    now_ns: u64,
) -> Result<EgressOutcome, FlowError> {
    let key = five_tuple_of(&pkt);
    if let Some(value) = table.get(&key).cloned() {
        table.touch(&key, now_ns);
        if value.decapped {
            return Ok(EgressOutcome::PassThrough(pkt));
        }
        let encapsulated = encapsulate_with(pkt, value.outer.src, value.srh)?;
        return Ok(EgressOutcome::Encapsulated(encapsulated));
    }
    let reversed = key.reversed();
    if let Some(value) = table.get(&reversed).cloned() {
        table.touch(&reversed, now_ns);
        let m = value.srh.num_segments() as i64;
        // Return position: one before this node's segment in reverse visit
        // order. A forward entry stores segments_left already advanced past
        // this node; a decapped entry was the final segment.
        let slot = if value.decapped {
            m - 2
        } else {
            m - i64::from(value.srh.segments_left) - 3
        };
        if slot < 0 {
            return Ok(EgressOutcome::PassThrough(pkt));
        }
        let mut srh = reverse_srh(&value.srh);
        srh.segments_left = slot as u8;
        let encapsulated = encapsulate_with(pkt, own_addr, srh)?;
        return Ok(EgressOutcome::Encapsulated(encapsulated));
    }
    Ok(EgressOutcome::PassThrough(pkt))
}

/// Associate the proxy's own connection with the stored state of the flow it
/// continues: the new key maps to the same headers and is refreshed whenever
/// the original flow is.
pub fn rekey(
    table: &mut FlowTable,
    old_flow: FlowKey,
    new_flow: FlowKey,
    now_ns: u64,
) -> Result<(), FlowError> {
    let value = table
        .entries
        .get(&old_flow)
        .map(|e| e.value.clone())
        .ok_or(FlowError::MissingFlow(old_flow))?;
    insert_alias(table, old_flow, new_flow, value, now_ns);
    Ok(())
}

fn insert_alias(
    table: &mut FlowTable,
    parent: FlowKey,
    alias: FlowKey,
    value: FlowValue,
    now_ns: u64,
) {
    table.touch_counter += 1;
    let seq = table.touch_counter;
    table.entries.insert(
        alias,
        Entry {
            value,
            last_touch_ns: now_ns,
            touch_seq: seq,
            derived: Vec::new(),
        },
    );
    if let Some(p) = table.entries.get_mut(&parent) {
        if !p.derived.contains(&alias) {
            p.derived.push(alias);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srv6::{
        encapsulate, test_sid as sid, SegmentKind, TransportHeader, PROTO_TCP, TRANSPORT_BYTES,
    };

    fn inner(src: Sid, dst: Sid, sport: u16, dport: u16) -> InnerPacket {
        InnerPacket {
            header: Ipv6LikeHeader::new(src, dst, PROTO_TCP, (TRANSPORT_BYTES + 4) as u16),
            transport: TransportHeader {
                src_port: sport,
                dst_port: dport,
                seq: 0,
            },
            kind: SegmentKind::Data,
            payload: vec![1, 2, 3, 4],
        }
    }

    fn chain_packet() -> Srv6Packet {
        encapsulate(inner(sid(1), sid(8), 40001, 9000), sid(2), &[sid(6), sid(7), sid(5)]).unwrap()
    }

    #[test]
    fn ingress_stores_updated_headers_under_inner_tuple() {
        let mut table = FlowTable::default();
        let out = ingress_decap(chain_packet(), sid(6), &mut table, 0).unwrap();
        assert_eq!(out.inner, inner(sid(1), sid(8), 40001, 9000));
        assert!(out.evicted.is_none());

        let key = FiveTuple::new(sid(1), sid(8), 40001, 9000);
        let stored = table.get(&key).expect("entry stored");
        // Segment processing already advanced past this node.
        assert_eq!(stored.srh.segments_left, 1);
        assert_eq!(stored.srh.active_sid(), sid(7));
        assert_eq!(stored.outer.dst, sid(7));
        assert_eq!(stored.outer.src, sid(2));
    }

    #[test]
    fn ingress_requires_matching_sid() {
        let mut table = FlowTable::default();
        assert_eq!(
            ingress_decap(chain_packet(), sid(3), &mut table, 0).unwrap_err(),
            FlowError::NotLocal
        );
    }

    #[test]
    fn rekey_then_egress_restores_identical_header() {
        let mut table = FlowTable::default();
        let stored = ingress_decap(chain_packet(), sid(6), &mut table, 0)
            .unwrap()
            .stored;

        let old = FiveTuple::new(sid(1), sid(8), 40001, 9000);
        let new = FiveTuple::new(sid(6), sid(8), 40002, 9000);
        rekey(&mut table, old, new, 10).unwrap();

        let egress = inner(sid(6), sid(8), 40002, 9000);
        match steer_egress(egress, sid(6), &mut table, 20).unwrap() {
            EgressOutcome::Encapsulated(pkt) => {
                assert_eq!(pkt.srh, stored.srh);
                assert_eq!(pkt.outer.src, stored.outer.src);
                assert_eq!(pkt.outer.dst, stored.outer.dst);
                assert_eq!(pkt.outer.dst, sid(7));
            }
            EgressOutcome::PassThrough(_) => panic!("expected encapsulation"),
        }
    }

    #[test]
    fn final_segment_ingress_keeps_received_headers() {
        let mut table = FlowTable::default();
        // Chain already advanced to its last segment when it reaches v5.
        let mut pkt = chain_packet();
        pkt.srh.segments_left = 0;
        pkt.outer.dst = sid(5);
        let out = ingress_decap(pkt, sid(5), &mut table, 0).unwrap();
        assert!(out.stored.decapped);
        assert_eq!(out.inner, inner(sid(1), sid(8), 40001, 9000));

        let key = FiveTuple::new(sid(1), sid(8), 40001, 9000);
        let stored = table.get(&key).unwrap();
        assert_eq!(stored.srh.segments_left, 0);
        assert_eq!(stored.srh.num_segments(), 3);

        // Onward egress of the same flow stays plain.
        let fwd = inner(sid(1), sid(8), 40001, 9000);
        match steer_egress(fwd.clone(), sid(5), &mut table, 1).unwrap() {
            EgressOutcome::PassThrough(p) => assert_eq!(p, fwd),
            EgressOutcome::Encapsulated(_) => panic!("terminated chain must not re-wrap"),
        }
    }

    #[test]
    fn response_at_final_segment_turns_the_chain_around() {
        let mut table = FlowTable::default();
        let mut pkt = chain_packet();
        pkt.srh.segments_left = 0;
        pkt.outer.dst = sid(5);
        ingress_decap(pkt, sid(5), &mut table, 0).unwrap();

        let response = inner(sid(8), sid(1), 9000, 40001);
        match steer_egress(response, sid(5), &mut table, 1).unwrap() {
            EgressOutcome::Encapsulated(p) => {
                // Reverse visit order skips this node: next stop is v7, then v6.
                assert_eq!(p.srh.traversal(), vec![sid(5), sid(7), sid(6)]);
                assert_eq!(p.srh.segments_left, 1);
                assert_eq!(p.outer.dst, sid(7));
                assert_eq!(p.outer.src, sid(5));
            }
            EgressOutcome::PassThrough(_) => panic!("expected turnaround encapsulation"),
        }
    }

    #[test]
    fn response_at_first_proxy_goes_plain() {
        let mut table = FlowTable::default();
        // v6 is the first of three segments; its stored header points at v7.
        ingress_decap(chain_packet(), sid(6), &mut table, 0).unwrap();

        let response = inner(sid(8), sid(1), 9000, 40001);
        match steer_egress(response.clone(), sid(6), &mut table, 1).unwrap() {
            EgressOutcome::PassThrough(p) => assert_eq!(p, response),
            EgressOutcome::Encapsulated(_) => panic!("nothing upstream of the first segment"),
        }
    }

    #[test]
    fn response_at_middle_proxy_routes_to_previous_segment() {
        let mut table = FlowTable::default();
        // As at v7: two segments already consumed, one left after this node.
        let mut pkt = chain_packet();
        pkt.srh.segments_left = 1;
        pkt.outer.dst = sid(7);
        ingress_decap(pkt, sid(7), &mut table, 0).unwrap();

        let response = inner(sid(8), sid(1), 9000, 40001);
        match steer_egress(response, sid(7), &mut table, 1).unwrap() {
            EgressOutcome::Encapsulated(p) => {
                assert_eq!(p.srh.segments_left, 0);
                assert_eq!(p.outer.dst, sid(6));
                assert_eq!(p.outer.src, sid(7));
            }
            EgressOutcome::PassThrough(_) => panic!("expected turnaround encapsulation"),
        }
    }

    #[test]
    fn single_segment_chain_response_goes_plain() {
        let mut table = FlowTable::default();
        let pkt = encapsulate(inner(sid(1), sid(8), 40001, 9000), sid(2), &[sid(5)]).unwrap();
        ingress_decap(pkt, sid(5), &mut table, 0).unwrap();

        let response = inner(sid(8), sid(1), 9000, 40001);
        match steer_egress(response.clone(), sid(5), &mut table, 1).unwrap() {
            EgressOutcome::PassThrough(p) => assert_eq!(p, response),
            EgressOutcome::Encapsulated(_) => panic!("no other segment to visit"),
        }
    }

    #[test]
    fn rekey_missing_flow_errors_and_is_idempotent() {
        let mut table = FlowTable::default();
        let old = FiveTuple::new(sid(1), sid(8), 40001, 9000);
        let new = FiveTuple::new(sid(6), sid(8), 40002, 9000);
        assert_eq!(
            rekey(&mut table, old, new, 0).unwrap_err(),
            FlowError::MissingFlow(old)
        );

        ingress_decap(chain_packet(), sid(6), &mut table, 0).unwrap();
        rekey(&mut table, old, new, 1).unwrap();
        rekey(&mut table, old, new, 2).unwrap();
        assert_eq!(table.len(), 2);
        // Old key is retained alongside the new one.
        assert!(table.get(&old).is_some());
        assert!(table.get(&new).is_some());
    }

    #[test]
    fn ingress_refresh_propagates_to_rekeyed_connection() {
        let mut table = FlowTable::default();
        ingress_decap(chain_packet(), sid(6), &mut table, 0).unwrap();
        let old = FiveTuple::new(sid(1), sid(8), 40001, 9000);
        let new = FiveTuple::new(sid(6), sid(8), 40002, 9000);
        rekey(&mut table, old, new, 1).unwrap();

        // The chain is reconfigured: subsequent ingress carries a longer
        // segment list, and the proxy's own connection must follow it.
        let detour = encapsulate(
            inner(sid(1), sid(8), 40001, 9000),
            sid(2),
            &[sid(6), sid(9), sid(10), sid(7), sid(5)],
        )
        .unwrap();
        ingress_decap(detour, sid(6), &mut table, 2).unwrap();

        let got = table.get(&new).expect("alias still present");
        assert_eq!(got.srh.num_segments(), 5);
        assert_eq!(got.srh.active_sid(), sid(9));
        assert_eq!(got.outer.dst, sid(9));
    }

    #[test]
    fn egress_without_association_passes_through() {
        let mut table = FlowTable::default();
        let pkt = inner(sid(4), sid(8), 50000, 9000);
        match steer_egress(pkt.clone(), sid(4), &mut table, 0).unwrap() {
            EgressOutcome::PassThrough(p) => assert_eq!(p, pkt),
            EgressOutcome::Encapsulated(_) => panic!("no entry, must pass through"),
        }
    }

    #[test]
    fn full_table_evicts_oldest() {
        let mut table = FlowTable::new(4, DEFAULT_IDLE_TIMEOUT_NS);
        for i in 0..4u16 {
            let pkt = encapsulate(
                inner(sid(1), sid(8), 40001 + i, 9000),
                sid(2),
                &[sid(6), sid(7), sid(5)],
            )
            .unwrap();
            ingress_decap(pkt, sid(6), &mut table, i as u64).unwrap();
        }
        assert_eq!(table.len(), 4);

        // Touch the oldest so the second-oldest becomes the victim.
        let oldest = FiveTuple::new(sid(1), sid(8), 40001, 9000);
        let refresh = encapsulate(
            inner(sid(1), sid(8), 40001, 9000),
            sid(2),
            &[sid(6), sid(7), sid(5)],
        )
        .unwrap();
        ingress_decap(refresh, sid(6), &mut table, 100).unwrap();

        let overflow = encapsulate(
            inner(sid(1), sid(8), 49999, 9000),
            sid(2),
            &[sid(6), sid(7), sid(5)],
        )
        .unwrap();
        let out = ingress_decap(overflow, sid(6), &mut table, 101).unwrap();
        assert_eq!(out.evicted, Some(FiveTuple::new(sid(1), sid(8), 40002, 9000)));
        assert_eq!(table.evictions(), 1);
        assert!(table.get(&oldest).is_some());
    }

    #[test]
    fn idle_entries_expire() {
        let mut table = FlowTable::new(16, 1_000);
        ingress_decap(chain_packet(), sid(6), &mut table, 0).unwrap();
        assert_eq!(table.len(), 1);

        // Any store past the timeout sweeps the stale entry.
        let other = encapsulate(
            inner(sid(1), sid(8), 40005, 9000),
            sid(2),
            &[sid(6), sid(7), sid(5)],
        )
        .unwrap();
        ingress_decap(other, sid(6), &mut table, 5_000).unwrap();
        assert_eq!(table.len(), 1);
        assert!(table
            .get(&FiveTuple::new(sid(1), sid(8), 40001, 9000))
            .is_none());
    }

    #[test]
    fn dump_is_ordered_tuple_to_hex() {
        let mut table = FlowTable::default();
        ingress_decap(chain_packet(), sid(6), &mut table, 0).unwrap();
        let dump = table.dump_json();
        let obj = dump.as_object().unwrap();
        assert_eq!(obj.len(), 1);
        let (key, value) = obj.iter().next().unwrap();
        assert_eq!(key, "6|[fd00::1]:40001|[fd00::8]:9000");
        let hex = value.as_str().unwrap();
        assert_eq!(hex.len(), 2 * 56);
        assert!(hex.starts_with("2906040102"), "got {hex}");
    }
}
