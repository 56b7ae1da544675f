//! TCP framing shared by workers and the emulator.
//!
//! Every frame is a fixed 24-byte little-endian header followed by
//! `payload_len` bytes:
//!
//! ```text
//! off  size  field
//!   0     4  magic "CEMU"
//!   4     1  version (1)
//!   5     1  msg_type
//!   6     4  op_id
//!  10     4  seq (schedule position)
//!  14     2  src_rank
//!  16     2  dst_rank
//!  18     2  chunk_index
//!  20     4  payload_len
//! ```

pub mod conn;
pub mod handshake;

use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CEMU";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Topo = 2,
    OpenOp = 3,
    Data = 4,
    Error = 5,
    Bye = 6,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<MsgType> {
        Some(match v {
            1 => MsgType::Hello,
            2 => MsgType::Topo,
            3 => MsgType::OpenOp,
            4 => MsgType::Data,
            5 => MsgType::Error,
            6 => MsgType::Bye,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    BadType(u8),
    #[error("truncated frame: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("payload of {len} bytes exceeds the {cap}-byte cap")]
    PayloadTooLarge { len: u32, cap: u32 },
    #[error("malformed {what} payload: {reason}")]
    Malformed { what: &'static str, reason: String },
    #[error("peer reported: {0}")]
    Remote(String),
    #[error("config digest mismatch")]
    DigestMismatch,
    #[error("handshake: {0}")]
    Handshake(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameHeader {
    pub msg_type: MsgType,
    pub op_id: u32,
    pub seq: u32,
    pub src: u16,
    pub dst: u16,
    pub chunk: u16,
    pub payload_len: u32,
}

impl FrameHeader {
    pub fn control(msg_type: MsgType) -> FrameHeader {
        FrameHeader {
            msg_type,
            op_id: 0,
            seq: 0,
            src: 0,
            dst: 0,
            chunk: 0,
            payload_len: 0,
        }
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = VERSION;
        b[5] = self.msg_type as u8;
        b[6..10].copy_from_slice(&self.op_id.to_le_bytes());
        b[10..14].copy_from_slice(&self.seq.to_le_bytes());
        b[14..16].copy_from_slice(&self.src.to_le_bytes());
        b[16..18].copy_from_slice(&self.dst.to_le_bytes());
        b[18..20].copy_from_slice(&self.chunk.to_le_bytes());
        b[20..24].copy_from_slice(&self.payload_len.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; HEADER_LEN], max_payload: u32) -> Result<FrameHeader, WireError> {
        let magic = [b[0], b[1], b[2], b[3]];
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        if b[4] != VERSION {
            return Err(WireError::BadVersion(b[4]));
        }
        let msg_type = MsgType::from_u8(b[5]).ok_or(WireError::BadType(b[5]))?;
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
        let payload_len = u32_at(20);
        if payload_len > max_payload {
            return Err(WireError::PayloadTooLarge {
                len: payload_len,
                cap: max_payload,
            });
        }
        Ok(FrameHeader {
            msg_type,
            op_id: u32_at(6),
            seq: u32_at(10),
            src: u16_at(14),
            dst: u16_at(16),
            chunk: u16_at(18),
            payload_len,
        })
    }
}

/// A header with its payload. `header.payload_len` always equals
/// `payload.len()` for frames built with [`Frame::new`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub header: FrameHeader,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(mut header: FrameHeader, payload: Vec<u8>) -> Frame {
        header.payload_len = payload.len() as u32;
        Frame { header, payload }
    }

    pub fn control(msg_type: MsgType, payload: Vec<u8>) -> Frame {
        Frame::new(FrameHeader::control(msg_type), payload)
    }

    pub fn error(reason: &str) -> Frame {
        Frame::control(MsgType::Error, reason.as_bytes().to_vec())
    }
}

pub fn encode_frame(f: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + f.payload.len());
    out.extend_from_slice(&f.header.encode());
    out.extend_from_slice(&f.payload);
    out
}

/// Decodes one frame from the front of `buf`, returning it and the number
/// of bytes consumed.
pub fn decode_frame(buf: &[u8], max_payload: u32) -> Result<(Frame, usize), WireError> {
    if buf.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            got: buf.len(),
        });
    }
    let header = FrameHeader::decode(buf[..HEADER_LEN].try_into().unwrap(), max_payload)?;
    let total = HEADER_LEN + header.payload_len as usize;
    if buf.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            got: buf.len(),
        });
    }
    let payload = buf[HEADER_LEN..total].to_vec();
    Ok((Frame { header, payload }, total))
}

/// Incremental decoder for byte streams split at arbitrary offsets.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    max_payload: u32,
}

impl FrameDecoder {
    pub fn new(max_payload: u32) -> Self {
        FrameDecoder {
            buf: Vec::new(),
            max_payload,
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, `None` if more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, WireError> {
        match decode_frame(&self.buf, self.max_payload) {
            Ok((frame, used)) => {
                self.buf.drain(..used);
                Ok(Some(frame))
            }
            Err(WireError::Truncated { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Reads one header. A clean EOF before the first byte is [`WireError::Closed`].
pub fn read_header<R: Read>(r: &mut R, max_payload: u32) -> Result<FrameHeader, WireError> {
    let mut b = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut b[got..]) {
            Ok(0) if got == 0 => return Err(WireError::Closed),
            Ok(0) => {
                return Err(WireError::Truncated {
                    needed: HEADER_LEN,
                    got,
                })
            }
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    FrameHeader::decode(&b, max_payload)
}

/// Reads a whole frame, reusing `payload` as the buffer.
pub fn read_frame_into<R: Read>(
    r: &mut R,
    max_payload: u32,
    payload: &mut Vec<u8>,
) -> Result<FrameHeader, WireError> {
    let header = read_header(r, max_payload)?;
    payload.resize(header.payload_len as usize, 0);
    r.read_exact(payload).map_err(eof_to_truncated)?;
    Ok(header)
}

pub fn read_frame<R: Read>(r: &mut R, max_payload: u32) -> Result<Frame, WireError> {
    let mut payload = Vec::new();
    let header = read_frame_into(r, max_payload, &mut payload)?;
    Ok(Frame { header, payload })
}

/// Consumes and drops `len` payload bytes.
pub fn skip_payload<R: Read>(r: &mut R, len: u32) -> Result<(), WireError> {
    let copied = io::copy(&mut r.take(len as u64), &mut io::sink())?;
    if copied < len as u64 {
        return Err(WireError::Truncated {
            needed: len as usize,
            got: copied as usize,
        });
    }
    Ok(())
}

fn eof_to_truncated(e: io::Error) -> WireError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        WireError::Closed
    } else {
        WireError::Io(e)
    }
}

pub fn write_frame<W: Write>(w: &mut W, header: &FrameHeader, payload: &[u8]) -> io::Result<()> {
    debug_assert_eq!(header.payload_len as usize, payload.len());
    w.write_all(&header.encode())?;
    w.write_all(payload)
}

/// Shared write half. Each frame is written under one lock, so frames
/// from different threads never interleave.
pub struct FrameWriter<W: Write> {
    inner: Arc<Mutex<io::BufWriter<W>>>,
}

impl<W: Write> Clone for FrameWriter<W> {
    fn clone(&self) -> Self {
        FrameWriter {
            inner: self.inner.clone(),
        }
    }
}

impl<W: Write> FrameWriter<W> {
    pub fn new(w: W) -> Self {
        FrameWriter {
            inner: Arc::new(Mutex::new(io::BufWriter::with_capacity(64 * 1024, w))),
        }
    }

    pub fn send(&self, header: FrameHeader, payload: &[u8]) -> io::Result<()> {
        let header = FrameHeader {
            payload_len: payload.len() as u32,
            ..header
        };
        let mut w = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        write_frame(&mut *w, &header, payload)?;
        w.flush()
    }

    pub fn send_frame(&self, f: &Frame) -> io::Result<()> {
        self.send(f.header, &f.payload)
    }

    /// Runs `f` on the underlying writer, e.g. to shut a socket down.
    pub fn with_inner<T>(&self, f: impl FnOnce(&mut W) -> T) -> T {
        let mut w = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let _ = w.flush();
        f(w.get_mut())
    }
}

/// Stand-in payload: `size` zero bytes. Zero is the additive identity, so a
/// real rank reducing it keeps its own contribution.
pub fn dummy_payload(size: usize) -> Vec<u8> {
    vec![0u8; size]
}
