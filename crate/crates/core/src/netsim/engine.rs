//! The event loop tying nodes, links, streams, flow tables, and
//! applications together.
//!
//! Everything a node does in response to one event happens at one
//! timestamp; time only advances between events. Determinism rests on
//! the (time, insertion) event order and on every map being ordered.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::flow::{self, EgressOutcome, FlowTable, FlowValue};
use crate::srv6::{
    encapsulate, five_tuple_of, process_endpoint, EndpointAction, FiveTuple, InnerPacket,
    Ipv6LikeHeader, SegmentKind, Sid, Srv6Packet, TransportHeader, INNER_HEADER_BYTES, PROTO_TCP,
    TRANSPORT_BYTES,
};

use super::event::EventQueue;
use super::log::{
    ComputeKind, ComputeSpan, FrameDelivery, MetricRecord, MsgKind, PacketMeta, TraceDir,
    TraceRecord, TrafficLog,
};
use super::stream::{ConnId, Socket, SocketState};
use super::topology::{build_topology, NodeId, Role, Topology, TopologyConfig};
use super::NetError;

/// Execution cost model shared by all nodes; a node's `compute_rate`
/// scales the base rate. Short kernels are dominated by launch and
/// framework overhead, hence the floor.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ComputeModel {
    pub base_rate_flops: f64,
    pub floor_ns: u64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel {
            base_rate_flops: 1e12,
            floor_ns: 500_000,
        }
    }
}

impl ComputeModel {
    pub fn duration_ns(&self, flops: f64, rate_scale: f64) -> u64 {
        let ideal = flops / (self.base_rate_flops * rate_scale) * 1e9;
        (ideal.ceil() as u64).max(self.floor_ns)
    }
}

/// Chain-ingress rule: packets transiting this node toward the match
/// get a fresh routing header for `traversal`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteeringPolicy {
    pub dst_addr: Sid,
    pub dst_port: u16,
    pub traversal: Vec<Sid>,
}

#[derive(Clone, Debug)]
pub struct WorldConfig {
    pub topology: TopologyConfig,
    pub compute: ComputeModel,
    /// Payload bytes per stream chunk; defaults to filling the smallest
    /// link MTU with one bare packet.
    pub chunk_payload: Option<usize>,
    pub flow_capacity: usize,
    pub flow_idle_timeout_ns: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            topology: TopologyConfig::fig6(),
            compute: ComputeModel::default(),
            chunk_payload: None,
            flow_capacity: flow::DEFAULT_CAPACITY,
            flow_idle_timeout_ns: flow::DEFAULT_IDLE_TIMEOUT_NS,
        }
    }
}

/// What an application asks the engine to do. Actions run immediately,
/// in order, at the current timestamp.
#[derive(Debug)]
pub enum Action {
    /// Open a stream to `dst` from a fresh local port. With `rekey_from`,
    /// the new connection inherits the flow-table state of that existing
    /// flow before the open segment leaves.
    Open {
        dst: (Sid, u16),
        rekey_from: Option<FiveTuple>,
    },
    SendFrame {
        conn: ConnId,
        bytes: Vec<u8>,
        round: u32,
        epoch: u32,
        kind: MsgKind,
    },
    Compute {
        flops: f64,
        token: u64,
        round: u32,
        epoch: u32,
        kind: ComputeKind,
    },
    Timer {
        delay_ns: u64,
        token: u64,
    },
    /// Report a fully reassembled incoming frame for the delivery log.
    FrameDelivered {
        conn: ConnId,
        round: u32,
        epoch: u32,
        kind: MsgKind,
        bytes: usize,
        first_byte_ns: u64,
        last_byte_ns: u64,
    },
    Metric {
        name: String,
        round: u32,
        epoch: u32,
        value: f64,
    },
    Abort {
        reason: String,
    },
    Finished,
}

/// A node-local application driven by engine callbacks. Default bodies
/// ignore the event.
pub trait App {
    fn on_start(&mut self, now: u64) -> Vec<Action> {
        let _ = now;
        Vec::new()
    }
    fn on_connected(&mut self, now: u64, conn: ConnId) -> Vec<Action> {
        let _ = (now, conn);
        Vec::new()
    }
    fn on_accepted(
        &mut self,
        now: u64,
        conn: ConnId,
        local: (Sid, u16),
        peer: (Sid, u16),
    ) -> Vec<Action> {
        let _ = (now, conn, local, peer);
        Vec::new()
    }
    /// In-order stream bytes; `arrived_ns` is when this chunk hit the node.
    fn on_bytes(&mut self, now: u64, conn: ConnId, bytes: &[u8], arrived_ns: u64) -> Vec<Action> {
        let _ = (now, conn, bytes, arrived_ns);
        Vec::new()
    }
    fn on_compute_done(&mut self, now: u64, token: u64) -> Vec<Action> {
        let _ = (now, token);
        Vec::new()
    }
    fn on_timer(&mut self, now: u64, token: u64) -> Vec<Action> {
        let _ = (now, token);
        Vec::new()
    }
    /// Opt-in downcast hook so callers can inspect a concrete app after a
    /// run. Return `Some(self)` to support it.
    fn as_any(&mut self) -> Option<&mut dyn std::any::Any> {
        None
    }
}

#[derive(Clone, Debug)]
enum Wire {
    Plain(InnerPacket),
    Encap(Srv6Packet),
}

impl Wire {
    fn bytes(&self) -> usize {
        match self {
            Wire::Plain(p) => p.wire_bytes(),
            Wire::Encap(p) => p.wire_bytes(),
        }
    }

    fn encap_bytes(&self) -> usize {
        match self {
            Wire::Plain(_) => 0,
            Wire::Encap(p) => p.encap_overhead(),
        }
    }
}

#[derive(Debug)]
enum Event {
    AppStart {
        node: NodeId,
    },
    Arrival {
        to: NodeId,
        from: NodeId,
        wire: Wire,
        meta: PacketMeta,
    },
    ComputeDone {
        node: NodeId,
        token: u64,
    },
    TimerFired {
        node: NodeId,
        token: u64,
    },
    BwChange {
        link: usize,
        bw_mbps: Option<f64>,
    },
}

struct NodeState {
    flow: FlowTable,
    next_port: u16,
    intercepts: Vec<(Sid, u16)>,
    listens: Vec<u16>,
    steering: Vec<SteeringPolicy>,
    compute_busy_until: u64,
}

const FIRST_EPHEMERAL_PORT: u16 = 40001;

pub struct World {
    topo: Topology,
    compute: ComputeModel,
    chunk_payload: usize,
    now: u64,
    queue: EventQueue<Event>,
    nodes: Vec<NodeState>,
    apps: Vec<Option<Box<dyn App>>>,
    sockets: BTreeMap<ConnId, (NodeId, Socket)>,
    /// (node, local->peer tuple) to the socket serving it.
    sock_index: BTreeMap<(NodeId, FiveTuple), ConnId>,
    next_conn: u64,
    next_msg: u64,
    pub traffic: TrafficLog,
    pub compute_log: Vec<ComputeSpan>,
    pub delivery_log: Vec<FrameDelivery>,
    pub metric_log: Vec<MetricRecord>,
    aborted: Option<String>,
    finished: BTreeSet<NodeId>,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<World, NetError> {
        let topo = build_topology(&cfg.topology)?;
        let chunk_payload = cfg
            .chunk_payload
            .unwrap_or(topo.min_mtu as usize - INNER_HEADER_BYTES - TRANSPORT_BYTES);
        assert!(chunk_payload > 0 && chunk_payload + TRANSPORT_BYTES <= u16::MAX as usize);
        let n = topo.nodes.len();
        let nodes = (0..n)
            .map(|_| NodeState {
                flow: FlowTable::new(cfg.flow_capacity, cfg.flow_idle_timeout_ns),
                next_port: FIRST_EPHEMERAL_PORT,
                intercepts: Vec::new(),
                listens: Vec::new(),
                steering: Vec::new(),
                compute_busy_until: 0,
            })
            .collect();
        Ok(World {
            topo,
            compute: cfg.compute,
            chunk_payload,
            now: 0,
            queue: EventQueue::new(),
            nodes,
            apps: (0..n).map(|_| None).collect(),
            sockets: BTreeMap::new(),
            sock_index: BTreeMap::new(),
            next_conn: 1,
            next_msg: 1,
            traffic: TrafficLog::default(),
            compute_log: Vec::new(),
            delivery_log: Vec::new(),
            metric_log: Vec::new(),
            aborted: None,
            finished: BTreeSet::new(),
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn aborted(&self) -> Option<&str> {
        self.aborted.as_deref()
    }

    pub fn is_finished(&self, node: NodeId) -> bool {
        self.finished.contains(&node)
    }

    pub fn chunk_payload(&self) -> usize {
        self.chunk_payload
    }

    pub fn install_app(&mut self, node: NodeId, app: Box<dyn App>) {
        self.apps[node] = Some(app);
        self.queue.push(self.now, Event::AppStart { node });
    }

    /// The app installed on `node`, for post-run inspection.
    pub fn app_mut(&mut self, node: NodeId) -> Option<&mut (dyn App + 'static)> {
        self.apps.get_mut(node)?.as_deref_mut()
    }

    /// Accept transiting opens addressed to `dst` even though the address
    /// is not local: transparent interception.
    pub fn add_intercept(&mut self, node: NodeId, dst: (Sid, u16)) {
        if !self.nodes[node].intercepts.contains(&dst) {
            self.nodes[node].intercepts.push(dst);
        }
    }

    /// Accept opens addressed to this node's own address on `port`.
    pub fn add_listen(&mut self, node: NodeId, port: u16) {
        if !self.nodes[node].listens.contains(&port) {
            self.nodes[node].listens.push(port);
        }
    }

    /// Install or replace the steering rule for the policy's match key.
    pub fn set_steering(&mut self, node: NodeId, policy: SteeringPolicy) {
        let rules = &mut self.nodes[node].steering;
        match rules
            .iter_mut()
            .find(|p| p.dst_addr == policy.dst_addr && p.dst_port == policy.dst_port)
        {
            Some(slot) => *slot = policy,
            None => rules.push(policy),
        }
    }

    pub fn steering(&self, node: NodeId) -> &[SteeringPolicy] {
        &self.nodes[node].steering
    }

    pub fn flow_dump(&self, node: NodeId) -> serde_json::Value {
        self.nodes[node].flow.dump_json()
    }

    pub fn link_bw_mbps(&self, a: NodeId, b: NodeId) -> Option<f64> {
        let id = self.topo.link_between(a, b)?;
        Some(self.topo.links[id].bw_bps as f64 / 1e6)
    }

    /// Schedule a capacity change; `None` restores the configured rate.
    pub fn schedule_bw_change(
        &mut self,
        t_ns: u64,
        a: NodeId,
        b: NodeId,
        bw_mbps: Option<f64>,
    ) -> Result<(), NetError> {
        let link = self.topo.link_between(a, b).ok_or_else(|| {
            NetError::BadLink(
                self.topo.name(a).to_string(),
                self.topo.name(b).to_string(),
                "no such link".to_string(),
            )
        })?;
        self.queue.push(t_ns, Event::BwChange { link, bw_mbps });
        Ok(())
    }

    /// Process all events up to and including `t_end_ns`. Stops early on
    /// abort. The clock lands on `t_end_ns` when the queue runs dry.
    pub fn run_until(&mut self, t_end_ns: u64) {
        while self.aborted.is_none() {
            match self.queue.peek_time() {
                Some(t) if t <= t_end_ns => {
                    let (t, ev) = self.queue.pop().expect("peeked event");
                    debug_assert!(t >= self.now, "time went backwards");
                    self.now = t;
                    self.dispatch(ev);
                }
                _ => break,
            }
        }
        if self.aborted.is_none() && self.now < t_end_ns {
            self.now = t_end_ns;
        }
    }

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::AppStart { node } => self.with_app(node, |app, now| app.on_start(now)),
            Event::Arrival {
                to,
                from,
                wire,
                meta,
            } => self.handle_arrival(to, from, wire, meta),
            Event::ComputeDone { node, token } => {
                self.with_app(node, |app, now| app.on_compute_done(now, token))
            }
            Event::TimerFired { node, token } => {
                self.with_app(node, |app, now| app.on_timer(now, token))
            }
            Event::BwChange { link, bw_mbps } => match bw_mbps {
                Some(mbps) => self.topo.links[link].set_bw_mbps(mbps),
                None => self.topo.links[link].restore_bw(),
            },
        }
    }

    fn with_app<F>(&mut self, node: NodeId, f: F)
    where
        F: FnOnce(&mut dyn App, u64) -> Vec<Action>,
    {
        if let Some(mut app) = self.apps[node].take() {
            let actions = f(app.as_mut(), self.now);
            self.apps[node] = Some(app);
            self.execute(node, actions);
        }
    }

    fn fresh_msg(&mut self) -> u64 {
        let id = self.next_msg;
        self.next_msg += 1;
        id
    }

    fn execute(&mut self, node: NodeId, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Open { dst, rekey_from } => self.do_open(node, dst, rekey_from),
                Action::SendFrame {
                    conn,
                    bytes,
                    round,
                    epoch,
                    kind,
                } => self.do_send_frame(node, conn, bytes, round, epoch, kind),
                Action::Compute {
                    flops,
                    token,
                    round,
                    epoch,
                    kind,
                } => {
                    let rate = self.topo.nodes[node].resources.compute_rate;
                    let dur = self.compute.duration_ns(flops, rate);
                    let start = self.now.max(self.nodes[node].compute_busy_until);
                    let end = start + dur;
                    self.nodes[node].compute_busy_until = end;
                    self.compute_log.push(ComputeSpan {
                        node,
                        round,
                        epoch,
                        kind,
                        start_ns: start,
                        end_ns: end,
                    });
                    self.queue.push(end, Event::ComputeDone { node, token });
                }
                Action::Timer { delay_ns, token } => {
                    self.queue
                        .push(self.now + delay_ns, Event::TimerFired { node, token });
                }
                Action::FrameDelivered {
                    conn,
                    round,
                    epoch,
                    kind,
                    bytes,
                    first_byte_ns,
                    last_byte_ns,
                } => self.delivery_log.push(FrameDelivery {
                    node,
                    conn,
                    round,
                    epoch,
                    kind,
                    bytes,
                    first_byte_ns,
                    last_byte_ns,
                }),
                Action::Metric {
                    name,
                    round,
                    epoch,
                    value,
                } => self.metric_log.push(MetricRecord {
                    t_ns: self.now,
                    node,
                    name,
                    round,
                    epoch,
                    value,
                }),
                Action::Abort { reason } => {
                    log::error!("{}: abort: {}", self.topo.name(node), reason);
                    self.aborted = Some(reason);
                    return;
                }
                Action::Finished => {
                    self.finished.insert(node);
                }
            }
        }
    }

    fn do_open(&mut self, node: NodeId, dst: (Sid, u16), rekey_from: Option<FiveTuple>) {
        let addr = self.topo.nodes[node].addr;
        let port = self.nodes[node].next_port;
        self.nodes[node].next_port += 1;
        let tuple = FiveTuple::new(addr, dst.0, port, dst.1);
        if let Some(old) = rekey_from {
            // Associate before the open segment leaves, so it already
            // carries the inherited routing state.
            if let Err(e) = flow::rekey(&mut self.nodes[node].flow, old, tuple, self.now) {
                log::warn!("{}: rekey failed: {}", self.topo.name(node), e);
            }
        }
        let conn = ConnId(self.next_conn);
        self.next_conn += 1;
        self.sockets
            .insert(conn, (node, Socket::opener(conn, (addr, port), dst)));
        self.sock_index.insert((node, tuple), conn);
        let open = InnerPacket {
            header: Ipv6LikeHeader::new(addr, dst.0, PROTO_TCP, TRANSPORT_BYTES as u16),
            transport: TransportHeader {
                src_port: port,
                dst_port: dst.1,
                seq: 0,
            },
            kind: SegmentKind::Open,
            payload: Vec::new(),
        };
        let meta = PacketMeta {
            msg_id: self.fresh_msg(),
            origin: node,
            round: 0,
            epoch: 0,
            kind: MsgKind::Open,
            seg_index: 0,
        };
        self.egress_send(node, open, meta);
    }

    fn do_send_frame(
        &mut self,
        node: NodeId,
        conn: ConnId,
        bytes: Vec<u8>,
        round: u32,
        epoch: u32,
        kind: MsgKind,
    ) {
        let msg_id = self.fresh_msg();
        let chunk = self.chunk_payload;
        let mut packets = Vec::new();
        match self.sockets.get_mut(&conn) {
            Some((owner, sock)) => {
                debug_assert_eq!(*owner, node, "send on foreign socket");
                if sock.state != SocketState::Established {
                    log::warn!("{}: send on unestablished {:?}", self.topo.name(node), conn);
                    return;
                }
                let (local, peer) = (sock.local, sock.peer);
                let mut seg_index = 0u32;
                let mut off = 0usize;
                while off < bytes.len() {
                    let len = chunk.min(bytes.len() - off);
                    let seq = sock.take_seq(len);
                    let inner = InnerPacket {
                        header: Ipv6LikeHeader::new(
                            local.0,
                            peer.0,
                            PROTO_TCP,
                            (TRANSPORT_BYTES + len) as u16,
                        ),
                        transport: TransportHeader {
                            src_port: local.1,
                            dst_port: peer.1,
                            seq,
                        },
                        kind: SegmentKind::Data,
                        payload: bytes[off..off + len].to_vec(),
                    };
                    let meta = PacketMeta {
                        msg_id,
                        origin: node,
                        round,
                        epoch,
                        kind,
                        seg_index,
                    };
                    packets.push((inner, meta));
                    off += len;
                    seg_index += 1;
                }
            }
            None => {
                log::warn!("{}: send on unknown {:?}", self.topo.name(node), conn);
                return;
            }
        }
        for (inner, meta) in packets {
            self.egress_send(node, inner, meta);
        }
    }

    /// Egress pipeline for every packet leaving `node`, locally produced
    /// or forwarded: flow-table steering first, then chain-ingress
    /// policies, then plain shortest-path routing.
    fn egress_send(&mut self, node: NodeId, inner: InnerPacket, meta: PacketMeta) {
        let own = self.topo.nodes[node].addr;
        match flow::steer_egress(inner, own, &mut self.nodes[node].flow, self.now) {
            Ok(EgressOutcome::Encapsulated(pkt)) => self.route_encap(node, pkt, meta),
            Ok(EgressOutcome::PassThrough(inner)) => {
                let traversal = self.nodes[node]
                    .steering
                    .iter()
                    .find(|p| {
                        p.dst_addr == inner.header.dst && p.dst_port == inner.transport.dst_port
                    })
                    .map(|p| p.traversal.clone());
                match traversal {
                    Some(traversal) => match encapsulate(inner, own, &traversal) {
                        Ok(pkt) => self.route_encap(node, pkt, meta),
                        Err(e) => {
                            log::warn!("{}: steering failed: {}", self.topo.name(node), e)
                        }
                    },
                    None => self.route_plain(node, inner, meta),
                }
            }
            Err(e) => log::warn!("{}: egress failed: {}", self.topo.name(node), e),
        }
    }

    fn route_encap(&mut self, node: NodeId, pkt: Srv6Packet, meta: PacketMeta) {
        match self.topo.next_hop(node, pkt.outer.dst) {
            Ok(next) => self.transmit(node, next, Wire::Encap(pkt), meta),
            Err(e) => log::warn!("{}: no route: {}", self.topo.name(node), e),
        }
    }

    fn route_plain(&mut self, node: NodeId, inner: InnerPacket, meta: PacketMeta) {
        match self.topo.next_hop(node, inner.header.dst) {
            Ok(next) if next != node => self.transmit(node, next, Wire::Plain(inner), meta),
            Ok(_) => log::warn!("{}: refusing to route to self", self.topo.name(node)),
            Err(e) => log::warn!("{}: no route: {}", self.topo.name(node), e),
        }
    }

    fn transmit(&mut self, from: NodeId, to: NodeId, wire: Wire, meta: PacketMeta) {
        let Some(link_id) = self.topo.link_between(from, to) else {
            log::warn!(
                "no link {} -> {}",
                self.topo.name(from),
                self.topo.name(to)
            );
            return;
        };
        let bytes = wire.bytes();
        let link = &mut self.topo.links[link_id];
        let (start, arrival) = link.transmit(self.now, from, bytes);
        let ser_end = arrival - link.delay_ns;
        self.traffic.push(TraceRecord {
            t_ns: start,
            end_ns: ser_end,
            dir: TraceDir::Tx,
            node: from,
            peer: to,
            bytes,
            encap_bytes: wire.encap_bytes(),
            meta,
        });
        self.queue.push(
            arrival,
            Event::Arrival {
                to,
                from,
                wire,
                meta,
            },
        );
    }

    fn handle_arrival(&mut self, to: NodeId, from: NodeId, wire: Wire, meta: PacketMeta) {
        self.traffic.push(TraceRecord {
            t_ns: self.now,
            end_ns: self.now,
            dir: TraceDir::Rx,
            node: to,
            peer: from,
            bytes: wire.bytes(),
            encap_bytes: wire.encap_bytes(),
            meta,
        });
        match wire {
            Wire::Encap(pkt) => {
                let sid = self.topo.nodes[to].sid;
                if sid != Some(pkt.outer.dst) {
                    // Transit: keep moving toward the active segment.
                    self.route_encap(to, pkt, meta);
                } else if self.topo.nodes[to].has_role(Role::Nsf) {
                    match flow::ingress_decap(pkt, sid.unwrap(), &mut self.nodes[to].flow, self.now)
                    {
                        Ok(out) => self.deliver_inner(to, out.inner, meta),
                        Err(e) => log::warn!("{}: ingress failed: {}", self.topo.name(to), e),
                    }
                } else {
                    // Plain segment endpoint: no association on pass-through,
                    // but a terminating chain is remembered for responses.
                    let received = FlowValue {
                        outer: pkt.outer,
                        srh: pkt.srh.clone(),
                        decapped: true,
                    };
                    match process_endpoint(pkt, sid.unwrap()) {
                        EndpointAction::Forward(updated) => self.route_encap(to, updated, meta),
                        EndpointAction::DecapForward(inner) => {
                            self.nodes[to]
                                .flow
                                .store(five_tuple_of(&inner), received, self.now);
                            self.deliver_inner(to, inner, meta);
                        }
                        EndpointAction::NotMine => unreachable!("outer dst checked above"),
                    }
                }
            }
            Wire::Plain(inner) => self.deliver_inner(to, inner, meta),
        }
    }

    /// A bare packet at `node`: serve a matching socket, accept a
    /// matching open, or forward it back out.
    fn deliver_inner(&mut self, node: NodeId, inner: InnerPacket, meta: PacketMeta) {
        let tuple = five_tuple_of(&inner);
        if let Some(&conn) = self.sock_index.get(&(node, tuple.reversed())) {
            match inner.kind {
                SegmentKind::Open => {} // duplicate open of a live stream
                SegmentKind::OpenAck => {
                    let (_, sock) = self.sockets.get_mut(&conn).expect("indexed socket");
                    if sock.state == SocketState::Opening {
                        sock.state = SocketState::Established;
                        self.with_app(node, |app, now| app.on_connected(now, conn));
                    }
                }
                SegmentKind::Data => {
                    let (_, sock) = self.sockets.get_mut(&conn).expect("indexed socket");
                    sock.resequencer
                        .insert(inner.transport.seq, inner.payload, self.now);
                    let ready = sock.resequencer.drain_ready();
                    for (bytes, arrived_ns) in ready {
                        self.with_app(node, |app, now| {
                            app.on_bytes(now, conn, &bytes, arrived_ns)
                        });
                    }
                }
            }
            return;
        }

        if inner.kind == SegmentKind::Open {
            let dst = (inner.header.dst, inner.transport.dst_port);
            let src = (inner.header.src, inner.transport.src_port);
            let local_listen =
                dst.0 == self.topo.nodes[node].addr && self.nodes[node].listens.contains(&dst.1);
            let intercept = self.nodes[node].intercepts.contains(&dst);
            if local_listen || intercept {
                // On an intercepted open the local address is the original
                // destination; the peer cannot tell the stream terminates here.
                let conn = ConnId(self.next_conn);
                self.next_conn += 1;
                self.sockets
                    .insert(conn, (node, Socket::accepted(conn, dst, src)));
                self.sock_index
                    .insert((node, FiveTuple::new(dst.0, src.0, dst.1, src.1)), conn);
                let ack = InnerPacket {
                    header: Ipv6LikeHeader::new(dst.0, src.0, PROTO_TCP, TRANSPORT_BYTES as u16),
                    transport: TransportHeader {
                        src_port: dst.1,
                        dst_port: src.1,
                        seq: 0,
                    },
                    kind: SegmentKind::OpenAck,
                    payload: Vec::new(),
                };
                let ack_meta = PacketMeta {
                    msg_id: self.fresh_msg(),
                    origin: node,
                    round: 0,
                    epoch: 0,
                    kind: MsgKind::OpenAck,
                    seg_index: 0,
                };
                self.egress_send(node, ack, ack_meta);
                self.with_app(node, |app, now| app.on_accepted(now, conn, dst, src));
                return;
            }
        }

        if inner.header.dst == self.topo.nodes[node].addr {
            log::warn!(
                "{}: dropping {:?} for port {} with no listener",
                self.topo.name(node),
                inner.kind,
                inner.transport.dst_port
            );
            return;
        }

        self.egress_send(node, inner, meta);
    }
}
