//! Length-prefixed message frames carried on the streams between chain
//! stages, and reassembly of those frames from arbitrarily chunked bytes.
//!
//! Layout after the `u32` length prefix (which counts the rest):
//!
//! ```text
//! "NSF1" | kind u8 | dtype u8 | rank u8 | reserved u8
//! round u32 | epoch u32 | dims rank*u32 | labels_len u32
//! labels labels_len*u32 | payload f32 * prod(dims)
//! ```
//!
//! All integers and floats little-endian.

use std::collections::VecDeque;

use thiserror::Error;

use crate::netsim::MsgKind;
use crate::nn::{NnError, Tensor};

pub const FRAME_MAGIC: [u8; 4] = *b"NSF1";
pub const DTYPE_F32: u8 = 1;

// Fixed part: len prefix, magic, four u8 fields, round, epoch, labels_len.
const FIXED_BYTES: usize = 4 + 4 + 4 + 4 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    Act = 1,
    Grad = 2,
    Result = 3,
}

impl FrameKind {
    pub fn from_u8(v: u8) -> Option<FrameKind> {
        match v {
            1 => Some(FrameKind::Act),
            2 => Some(FrameKind::Grad),
            3 => Some(FrameKind::Result),
            _ => None,
        }
    }

    /// The traffic-log message kind this frame is stamped with.
    pub fn msg_kind(self) -> MsgKind {
        match self {
            FrameKind::Act => MsgKind::Act,
            FrameKind::Grad => MsgKind::Grad,
            FrameKind::Result => MsgKind::Result,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown frame kind {0}")]
    BadKind(u8),
    #[error("unsupported dtype {0}")]
    BadDtype(u8),
    #[error("frame of {got} bytes, header implies {want}")]
    LengthMismatch { want: usize, got: usize },
    #[error("frame truncated at {0} bytes")]
    Truncated(usize),
    #[error("frame length {0} exceeds limit")]
    Oversized(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MessageFrame {
    pub kind: FrameKind,
    pub round: u32,
    pub epoch: u32,
    pub dims: Vec<u32>,
    /// Class labels riding alongside a training activation; empty otherwise.
    pub labels: Vec<u32>,
    pub data: Vec<f32>,
}

impl MessageFrame {
    pub fn new(
        kind: FrameKind,
        round: u32,
        epoch: u32,
        tensor: &Tensor<f32>,
        labels: Vec<u32>,
    ) -> MessageFrame {
        MessageFrame {
            kind,
            round,
            epoch,
            dims: tensor.shape().iter().map(|&d| d as u32).collect(),
            labels,
            data: tensor.data().to_vec(),
        }
    }

    pub fn batch(&self) -> usize {
        self.dims.first().copied().unwrap_or(0) as usize
    }

    /// Trailing dimension, the per-sample feature width.
    pub fn width(&self) -> usize {
        self.dims.last().copied().unwrap_or(0) as usize
    }

    pub fn tensor(&self) -> Result<Tensor<f32>, NnError> {
        let shape: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        Tensor::from_vec(&shape, self.data.clone())
    }

    pub fn encoded_len(&self) -> usize {
        FIXED_BYTES + 4 * (self.dims.len() + self.labels.len() + self.data.len())
    }

    pub fn encode(&self) -> Vec<u8> {
        let total = self.encoded_len();
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(&((total - 4) as u32).to_le_bytes());
        out.extend_from_slice(&FRAME_MAGIC);
        out.push(self.kind as u8);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        out.push(0);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        debug_assert_eq!(out.len(), total);
        out
    }

    /// Decodes one full frame, length prefix included.
    pub fn decode(buf: &[u8]) -> Result<MessageFrame, FrameError> {
        let mut r = Reader { buf, pos: 0 };
        let total = r.u32()? as usize;
        if buf.len() != total + 4 {
            return Err(FrameError::LengthMismatch {
                want: total + 4,
                got: buf.len(),
            });
        }
        let magic = r.bytes4()?;
        if magic != FRAME_MAGIC {
            return Err(FrameError::BadMagic(magic));
        }
        let kind_raw = r.u8()?;
        let kind = FrameKind::from_u8(kind_raw).ok_or(FrameError::BadKind(kind_raw))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(FrameError::BadDtype(dtype));
        }
        let rank = r.u8()? as usize;
        r.u8()?;
        let round = r.u32()?;
        let epoch = r.u32()?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()?);
        }
        let labels_len = r.u32()? as usize;
        let mut labels = Vec::with_capacity(labels_len);
        for _ in 0..labels_len {
            labels.push(r.u32()?);
        }
        let elems: u64 = dims.iter().map(|&d| d as u64).product();
        let payload_bytes = buf.len() - r.pos;
        if payload_bytes as u64 != elems * 4 {
            return Err(FrameError::LengthMismatch {
                want: r.pos + (elems * 4) as usize,
                got: buf.len(),
            });
        }
        let mut data = Vec::with_capacity(elems as usize);
        for _ in 0..elems {
            data.push(f32::from_le_bytes(r.bytes4()?));
        }
        Ok(MessageFrame {
            kind,
            round,
            epoch,
            dims,
            labels,
            data,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, FrameError> {
        if self.pos >= self.buf.len() {
            return Err(FrameError::Truncated(self.buf.len()));
        }
        self.pos += 1;
        Ok(self.buf[self.pos - 1])
    }

    fn bytes4(&mut self) -> Result<[u8; 4], FrameError> {
        if self.pos + 4 > self.buf.len() {
            return Err(FrameError::Truncated(self.buf.len()));
        }
        let mut b = [0u8; 4];
        b.copy_from_slice(&self.buf[self.pos..self.pos + 4]);
        self.pos += 4;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.bytes4()?))
    }
}

/// Rebuilds frames from in-order stream chunks, remembering when the chunk
/// holding each frame's first and last byte arrived.
#[derive(Debug, Default)]
pub struct ReassemblyBuffer {
    segments: VecDeque<(Vec<u8>, u64)>,
    front_offset: usize,
    available: usize,
}

// Refuses length prefixes beyond this; a stream this corrupt would
// otherwise stall reassembly forever waiting for phantom bytes.
const MAX_FRAME_BYTES: u64 = 1 << 31;

impl ReassemblyBuffer {
    pub fn new() -> ReassemblyBuffer {
        ReassemblyBuffer::default()
    }

    pub fn push(&mut self, bytes: &[u8], arrived_ns: u64) {
        if bytes.is_empty() {
            return;
        }
        self.available += bytes.len();
        self.segments.push_back((bytes.to_vec(), arrived_ns));
    }

    pub fn available(&self) -> usize {
        self.available
    }

    /// Next complete frame with the arrival times of its first and last
    /// byte, or `None` until enough bytes are in.
    pub fn pop_frame(&mut self) -> Result<Option<(MessageFrame, u64, u64)>, FrameError> {
        let Some(prefix) = self.peek4() else {
            return Ok(None);
        };
        let body_len = u32::from_le_bytes(prefix) as u64;
        if body_len > MAX_FRAME_BYTES {
            return Err(FrameError::Oversized(body_len));
        }
        let frame_len = body_len as usize + 4;
        if self.available < frame_len {
            return Ok(None);
        }
        let (bytes, first_ns, last_ns) = self.take(frame_len);
        let frame = MessageFrame::decode(&bytes)?;
        Ok(Some((frame, first_ns, last_ns)))
    }

    fn peek4(&self) -> Option<[u8; 4]> {
        if self.available < 4 {
            return None;
        }
        let mut out = [0u8; 4];
        let mut filled = 0;
        let mut skip = self.front_offset;
        for (seg, _) in &self.segments {
            let seg = &seg[skip..];
            skip = 0;
            let n = seg.len().min(4 - filled);
            out[filled..filled + n].copy_from_slice(&seg[..n]);
            filled += n;
            if filled == 4 {
                return Some(out);
            }
        }
        None
    }

    fn take(&mut self, n: usize) -> (Vec<u8>, u64, u64) {
        debug_assert!(self.available >= n);
        let mut out = Vec::with_capacity(n);
        let mut first_ns = 0;
        let mut last_ns = 0;
        while out.len() < n {
            let (seg, t) = self.segments.front().expect("bytes accounted for");
            if out.is_empty() {
                first_ns = *t;
            }
            last_ns = *t;
            let rest = &seg[self.front_offset..];
            let want = n - out.len();
            if rest.len() <= want {
                out.extend_from_slice(rest);
                self.front_offset = 0;
                self.segments.pop_front();
            } else {
                out.extend_from_slice(&rest[..want]);
                self.front_offset += want;
            }
        }
        self.available -= n;
        (out, first_ns, last_ns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act_frame(elems: usize) -> MessageFrame {
        let data: Vec<f32> = (0..elems).map(|i| i as f32 * 0.5 - 3.0).collect();
        let t = Tensor::from_vec(&[2, elems / 2], data).unwrap();
        MessageFrame::new(FrameKind::Act, 7, 2, &t, vec![4, 9])
    }

    #[test]
    fn roundtrip_with_and_without_labels() {
        let f = act_frame(8);
        assert_eq!(f.encoded_len(), 24 + 8 + 8 + 32);
        let wire = f.encode();
        assert_eq!(wire.len(), f.encoded_len());
        assert_eq!(MessageFrame::decode(&wire).unwrap(), f);

        let t = Tensor::from_vec(&[3, 2], vec![1.0f32; 6]).unwrap();
        let g = MessageFrame::new(FrameKind::Grad, 1, 1, &t, Vec::new());
        let back = MessageFrame::decode(&g.encode()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.tensor().unwrap().shape(), &[3, 2]);
        assert_eq!(back.batch(), 3);
        assert_eq!(back.width(), 2);
    }

    #[test]
    fn decode_rejects_damage() {
        let wire = act_frame(8).encode();

        let mut bad = wire.clone();
        bad[4] = b'X';
        assert_eq!(
            MessageFrame::decode(&bad),
            Err(FrameError::BadMagic(*b"XSF1"))
        );

        let mut bad = wire.clone();
        bad[8] = 9;
        assert_eq!(MessageFrame::decode(&bad), Err(FrameError::BadKind(9)));

        let mut bad = wire.clone();
        bad[9] = 2;
        assert_eq!(MessageFrame::decode(&bad), Err(FrameError::BadDtype(2)));

        assert!(matches!(
            MessageFrame::decode(&wire[..wire.len() - 1]),
            Err(FrameError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn reassembles_across_chunks_with_edge_times() {
        let f = act_frame(9000);
        let wire = f.encode();
        assert!(wire.len() > 2 * 8948);

        let mut buf = ReassemblyBuffer::new();
        let mut t = 1000;
        for chunk in wire.chunks(8948) {
            assert!(buf.pop_frame().unwrap().is_none());
            buf.push(chunk, t);
            t += 1000;
        }
        let (got, first, last) = buf.pop_frame().unwrap().unwrap();
        assert_eq!(got, f);
        assert_eq!(first, 1000);
        assert_eq!(last, t - 1000);
        assert_eq!(buf.available(), 0);
        assert!(buf.pop_frame().unwrap().is_none());
    }

    #[test]
    fn back_to_back_frames_split_mid_chunk() {
        let a = act_frame(8);
        let t = Tensor::from_vec(&[1, 4], vec![0.25f32; 4]).unwrap();
        let b = MessageFrame::new(FrameKind::Result, 7, 2, &t, Vec::new());
        let mut wire = a.encode();
        wire.extend_from_slice(&b.encode());

        // Split so the boundary falls inside the second chunk.
        let cut = a.encoded_len() - 5;
        let mut buf = ReassemblyBuffer::new();
        buf.push(&wire[..cut], 10);
        buf.push(&wire[cut..], 20);

        let (got_a, first_a, last_a) = buf.pop_frame().unwrap().unwrap();
        assert_eq!(got_a, a);
        assert_eq!((first_a, last_a), (10, 20));
        let (got_b, first_b, last_b) = buf.pop_frame().unwrap().unwrap();
        assert_eq!(got_b, b);
        assert_eq!((first_b, last_b), (20, 20));
        assert!(buf.pop_frame().unwrap().is_none());
    }

    #[test]
    fn oversized_prefix_is_an_error() {
        let mut buf = ReassemblyBuffer::new();
        buf.push(&u32::MAX.to_le_bytes(), 0);
        assert_eq!(
            buf.pop_frame(),
            Err(FrameError::Oversized(u64::from(u32::MAX)))
        );
    }
}
