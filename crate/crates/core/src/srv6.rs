//! Packet model and segment-routing header codec.
//!
//! Everything that travels on the emulated wire is either a bare
//! [`InnerPacket`] or an [`Srv6Packet`] (outer header + routing header +
//! inner packet). The routing header wire layout is:
//!
//! ```text
//!  0                   1                   2                   3
//!  0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! | next header   | hdr ext len   | routing type  | segments left |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! | last entry    | flags         | tag (big endian)              |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |                                                               |
//! |               segment list [0] (16 bytes)                     |
//! |               ...                                             |
//! |               segment list [last entry]                       |
//! |                                                               |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! ```
//!
//! The segment list is stored in reverse traversal order: index 0 is the
//! final segment, index `last_entry` the first. `segments_left` indexes the
//! active segment, so a freshly encapsulated packet has
//! `segments_left == last_entry` and the outer destination equals
//! `segment_list[segments_left]`.

use std::fmt;
use std::net::Ipv6Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Routing type value identifying a segment routing header.
pub const ROUTING_TYPE_SRH: u8 = 4;
/// Next-header value of an outer header that is followed by a routing header.
pub const NEXT_HEADER_ROUTING: u8 = 43;
/// Next-header value of a routing header that is followed by a full inner packet.
pub const NEXT_HEADER_IPV6: u8 = 41;
/// Transport protocol carried by inner packets.
pub const PROTO_TCP: u8 = 6;

/// Fixed byte cost of the header part of an [`Ipv6LikeHeader`] on the wire.
pub const INNER_HEADER_BYTES: usize = 40;
/// Fixed byte cost of the transport header on the wire.
pub const TRANSPORT_BYTES: usize = 12;
/// Byte length of a routing header carrying `m` segments.
pub const fn srh_bytes(m: usize) -> usize {
    8 + 16 * m
}

/// Segment identifier / node address. 128 bits, printed in IPv6 text form.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Sid(pub [u8; 16]);

impl Sid {
    pub fn from_ipv6(addr: Ipv6Addr) -> Self {
        Sid(addr.octets())
    }

    pub fn as_ipv6(&self) -> Ipv6Addr {
        Ipv6Addr::from(self.0)
    }
}

impl fmt::Display for Sid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_ipv6())
    }
}

impl fmt::Debug for Sid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_ipv6())
    }
}

impl FromStr for Sid {
    type Err = SrhError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let addr = Ipv6Addr::from_str(s).map_err(|_| SrhError::BadAddress {
            text: s.to_string(),
        })?;
        Ok(Sid::from_ipv6(addr))
    }
}

impl Serialize for Sid {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Sid {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Minimal outer/inner network header: the fields the emulation acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ipv6LikeHeader {
    pub src: Sid,
    pub dst: Sid,
    pub next_header: u8,
    pub payload_len: u16,
    pub hop_limit: u8,
}

impl Ipv6LikeHeader {
    pub fn new(src: Sid, dst: Sid, next_header: u8, payload_len: u16) -> Self {
        Ipv6LikeHeader {
            src,
            dst,
            next_header,
            payload_len,
            hop_limit: 64,
        }
    }
}

/// Transport header: ports plus a byte-offset sequence number.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransportHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u64,
}

/// Control role of a stream segment. Stream setup uses a two-way open
/// exchange; everything else is ordered payload bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Open,
    OpenAck,
    Data,
}

/// A bare packet as produced by stream endpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InnerPacket {
    pub header: Ipv6LikeHeader,
    pub transport: TransportHeader,
    pub kind: SegmentKind,
    pub payload: Vec<u8>,
}

impl InnerPacket {
    pub fn wire_bytes(&self) -> usize {
        INNER_HEADER_BYTES + TRANSPORT_BYTES + self.payload.len()
    }
}

/// Connection identity as seen by proxies: protocol plus addresses and ports.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct FiveTuple {
    pub protocol: u8,
    pub src: Sid,
    pub dst: Sid,
    pub src_port: u16,
    pub dst_port: u16,
}

impl FiveTuple {
    pub fn new(src: Sid, dst: Sid, src_port: u16, dst_port: u16) -> Self {
        FiveTuple {
            protocol: PROTO_TCP,
            src,
            dst,
            src_port,
            dst_port,
        }
    }

    /// Identity of the opposite direction of the same conversation.
    pub fn reversed(&self) -> FiveTuple {
        FiveTuple {
            protocol: self.protocol,
            src: self.dst,
            dst: self.src,
            src_port: self.dst_port,
            dst_port: self.src_port,
        }
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|[{}]:{}|[{}]:{}",
            self.protocol, self.src, self.src_port, self.dst, self.dst_port
        )
    }
}

impl Serialize for FiveTuple {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

/// Derive the flow identity of an inner packet.
pub fn five_tuple_of(pkt: &InnerPacket) -> FiveTuple {
    FiveTuple {
        protocol: PROTO_TCP,
        src: pkt.header.src,
        dst: pkt.header.dst,
        src_port: pkt.transport.src_port,
        dst_port: pkt.transport.dst_port,
    }
}

/// Segment routing header. `flags` and `tag` are carried for wire fidelity
/// and are zero in every header the emulation builds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Srh {
    pub next_header: u8,
    pub segments_left: u8,
    pub flags: u8,
    pub tag: u16,
    /// Reverse traversal order: index 0 is the final segment.
    pub segment_list: Vec<Sid>,
}

impl Srh {
    /// Header for a chain that visits `traversal` in the given order,
    /// positioned at the first segment.
    pub fn for_traversal(traversal: &[Sid]) -> Result<Srh, SrhError> {
        if traversal.is_empty() {
            return Err(SrhError::EmptySegmentList);
        }
        if traversal.len() > MAX_SEGMENTS {
            return Err(SrhError::TooManySegments {
                count: traversal.len(),
            });
        }
        let mut segment_list: Vec<Sid> = traversal.to_vec();
        segment_list.reverse();
        Ok(Srh {
            next_header: NEXT_HEADER_IPV6,
            segments_left: (traversal.len() - 1) as u8,
            flags: 0,
            tag: 0,
            segment_list,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.segment_list.len()
    }

    pub fn last_entry(&self) -> u8 {
        (self.segment_list.len() - 1) as u8
    }

    /// Segment the packet is currently routed toward.
    pub fn active_sid(&self) -> Sid {
        self.segment_list[self.segments_left as usize]
    }

    /// Segments in visit order (reverse of the stored list).
    pub fn traversal(&self) -> Vec<Sid> {
        let mut t = self.segment_list.clone();
        t.reverse();
        t
    }

    pub fn wire_bytes(&self) -> usize {
        srh_bytes(self.segment_list.len())
    }
}

/// Largest encodable segment count: the extension length field counts
/// 8-byte units in a u8 and each segment occupies two units.
pub const MAX_SEGMENTS: usize = 127;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SrhError {
    #[error("segment list is empty")]
    EmptySegmentList,
    #[error("segment list has {count} entries, limit is {MAX_SEGMENTS}")]
    TooManySegments { count: usize },
    #[error("buffer too small: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("routing type {found} is not {ROUTING_TYPE_SRH}")]
    BadRoutingType { found: u8 },
    #[error("header extension length {hdr_ext_len} inconsistent with last entry {last_entry}")]
    BadLength { hdr_ext_len: u8, last_entry: u8 },
    #[error("segments left {segments_left} exceeds last entry {last_entry}")]
    SegmentsLeftOutOfRange { segments_left: u8, last_entry: u8 },
    #[error("buffer is {have} bytes, header describes {expect}")]
    LengthMismatch { expect: usize, have: usize },
    #[error("not an address: {text:?}")]
    BadAddress { text: String },
    #[error("payload of {len} bytes does not fit the length field")]
    PayloadTooLarge { len: usize },
}

/// Serialize a routing header to its wire form.
pub fn encode_srh(srh: &Srh) -> Result<Vec<u8>, SrhError> {
    let m = srh.segment_list.len();
    if m == 0 {
        return Err(SrhError::EmptySegmentList);
    }
    if m > MAX_SEGMENTS {
        return Err(SrhError::TooManySegments { count: m });
    }
    let last_entry = (m - 1) as u8;
    if srh.segments_left > last_entry {
        return Err(SrhError::SegmentsLeftOutOfRange {
            segments_left: srh.segments_left,
            last_entry,
        });
    }
    let mut out = Vec::with_capacity(srh_bytes(m));
    out.push(srh.next_header);
    out.push((2 * m) as u8);
    out.push(ROUTING_TYPE_SRH);
    out.push(srh.segments_left);
    out.push(last_entry);
    out.push(srh.flags);
    out.extend_from_slice(&srh.tag.to_be_bytes());
    for sid in &srh.segment_list {
        out.extend_from_slice(&sid.0);
    }
    Ok(out)
}

/// Parse a routing header from a buffer that contains exactly one header.
pub fn decode_srh(bytes: &[u8]) -> Result<Srh, SrhError> {
    if bytes.len() < 8 {
        return Err(SrhError::Truncated {
            need: 8,
            have: bytes.len(),
        });
    }
    let next_header = bytes[0];
    let hdr_ext_len = bytes[1];
    let routing_type = bytes[2];
    let segments_left = bytes[3];
    let last_entry = bytes[4];
    let flags = bytes[5];
    let tag = u16::from_be_bytes([bytes[6], bytes[7]]);

    if routing_type != ROUTING_TYPE_SRH {
        return Err(SrhError::BadRoutingType {
            found: routing_type,
        });
    }
    if hdr_ext_len % 2 != 0 || hdr_ext_len as usize != 2 * (last_entry as usize + 1) {
        return Err(SrhError::BadLength {
            hdr_ext_len,
            last_entry,
        });
    }
    if segments_left > last_entry {
        return Err(SrhError::SegmentsLeftOutOfRange {
            segments_left,
            last_entry,
        });
    }
    let m = last_entry as usize + 1;
    let expect = srh_bytes(m);
    if bytes.len() != expect {
        return Err(SrhError::LengthMismatch {
            expect,
            have: bytes.len(),
        });
    }
    let mut segment_list = Vec::with_capacity(m);
    for i in 0..m {
        let off = 8 + 16 * i;
        let mut sid = [0u8; 16];
        sid.copy_from_slice(&bytes[off..off + 16]);
        segment_list.push(Sid(sid));
    }
    Ok(Srh {
        next_header,
        segments_left,
        flags,
        tag,
        segment_list,
    })
}

/// An encapsulated packet: outer header, routing header, untouched inner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Srv6Packet {
    pub outer: Ipv6LikeHeader,
    pub srh: Srh,
    pub inner: InnerPacket,
}

impl Srv6Packet {
    pub fn wire_bytes(&self) -> usize {
        INNER_HEADER_BYTES + self.srh.wire_bytes() + self.inner.wire_bytes()
    }

    /// Extra bytes this packet carries compared to its bare inner packet.
    pub fn encap_overhead(&self) -> usize {
        INNER_HEADER_BYTES + self.srh.wire_bytes()
    }
}

/// Wrap an inner packet for a chain visiting `traversal` in order. The outer
/// source names the encapsulating node; the outer destination is the first
/// segment.
pub fn encapsulate(
    inner: InnerPacket,
    source: Sid,
    traversal: &[Sid],
) -> Result<Srv6Packet, SrhError> {
    let srh = Srh::for_traversal(traversal)?;
    encapsulate_with(inner, source, srh)
}

/// Wrap an inner packet with an existing routing header, e.g. one restored
/// from a flow table. The outer destination is the header's active segment.
pub fn encapsulate_with(
    inner: InnerPacket,
    source: Sid,
    srh: Srh,
) -> Result<Srv6Packet, SrhError> {
    let payload_len = srh.wire_bytes() + inner.wire_bytes();
    let payload_len = u16::try_from(payload_len)
        .map_err(|_| SrhError::PayloadTooLarge { len: payload_len })?;
    let outer = Ipv6LikeHeader::new(source, srh.active_sid(), NEXT_HEADER_ROUTING, payload_len);
    Ok(Srv6Packet { outer, srh, inner })
}

/// What a segment endpoint does with an encapsulated packet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EndpointAction {
    /// Active segment advanced; forward the updated packet.
    Forward(Srv6Packet),
    /// Final segment reached; strip the encapsulation and forward the inner.
    DecapForward(InnerPacket),
    /// The packet is not addressed to this node; transit it unchanged.
    NotMine,
}

/// Segment-endpoint processing: if the outer destination matches `local_sid`,
/// either advance to the next segment or, at the final segment, decapsulate.
pub fn process_endpoint(pkt: Srv6Packet, local_sid: Sid) -> EndpointAction {
    if pkt.outer.dst != local_sid {
        return EndpointAction::NotMine;
    }
    if pkt.srh.segments_left == 0 {
        return EndpointAction::DecapForward(pkt.inner);
    }
    let mut pkt = pkt;
    pkt.srh.segments_left -= 1;
    pkt.outer.dst = pkt.srh.active_sid();
    EndpointAction::Forward(pkt)
}

/// Routing header for the return direction of a chain: the same segments in
/// reverse visit order, positioned at the first return segment.
pub fn reverse_srh(srh: &Srh) -> Srh {
    let mut segment_list = srh.segment_list.clone();
    segment_list.reverse();
    Srh {
        next_header: srh.next_header,
        segments_left: (segment_list.len() - 1) as u8,
        flags: srh.flags,
        tag: srh.tag,
        segment_list,
    }
}


#[cfg(test)]
pub(crate) use tests::sid as test_sid;
