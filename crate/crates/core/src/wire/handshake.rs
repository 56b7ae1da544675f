//! Session bootstrap: HELLO, TOPO and OPEN_OP payloads.
//!
//! The dialing side speaks first:
//!
//! ```text
//! dialer                 acceptor
//!   HELLO  ───────────▶
//!          ◀───────────  HELLO | ERROR
//!          ◀───────────  TOPO
//!   TOPO   ───────────▶
//! ```

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use crate::config::JobConfig;
use crate::dag::CollectiveKind;

use super::{read_frame, write_frame, Frame, MsgType, WireError};

pub const DIGEST_MISMATCH: &str = "config digest mismatch";

/// One collective of the per-iteration plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlanEntry {
    pub kind: CollectiveKind,
    pub elem_size: u8,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub rank: u16,
    pub world_size: u32,
    pub digest: [u8; 32],
    pub plan: Vec<PlanEntry>,
}

impl Hello {
    pub fn for_config(cfg: &JobConfig, rank: usize, plan: Vec<PlanEntry>) -> Hello {
        Hello {
            rank: rank as u16,
            world_size: cfg.world_size as u32,
            digest: cfg.digest(),
            plan,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostedRank {
    pub rank: u16,
    pub class: String,
}

/// Which ranks a process hosts. A bidirectional peer also uses the
/// connection to send back to the dialer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topo {
    pub bidirectional: bool,
    pub hosted: Vec<HostedRank>,
}

impl Topo {
    pub fn hosts(&self, rank: usize) -> bool {
        self.hosted.iter().any(|h| h.rank as usize == rank)
    }
}

/// Announces a collective call before its first DATA frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpenOp {
    pub entry: PlanEntry,
    pub plan_index: u32,
}

struct Cursor<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Malformed {
                what: self.what,
                reason: format!("needs {n} more bytes, {} left", self.buf.len()),
            });
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Malformed {
                what: self.what,
                reason: format!("{} trailing bytes", self.buf.len()),
            })
        }
    }
}

fn put_entry(out: &mut Vec<u8>, e: &PlanEntry) {
    out.push(e.kind.to_wire());
    out.push(e.elem_size);
    out.extend_from_slice(&e.bytes.to_le_bytes());
}

fn get_entry(c: &mut Cursor<'_>) -> Result<PlanEntry, WireError> {
    let k = c.u8()?;
    let kind = CollectiveKind::from_wire(k).ok_or_else(|| WireError::Malformed {
        what: c.what,
        reason: format!("unknown collective kind {k}"),
    })?;
    Ok(PlanEntry {
        kind,
        elem_size: c.u8()?,
        bytes: c.u64()?,
    })
}

pub fn encode_hello(h: &Hello) -> Vec<u8> {
    let mut out = Vec::with_capacity(42 + 10 * h.plan.len());
    out.extend_from_slice(&h.digest);
    out.extend_from_slice(&h.world_size.to_le_bytes());
    out.extend_from_slice(&h.rank.to_le_bytes());
    out.extend_from_slice(&(h.plan.len() as u32).to_le_bytes());
    for e in &h.plan {
        put_entry(&mut out, e);
    }
    out
}

pub fn decode_hello(buf: &[u8]) -> Result<Hello, WireError> {
    let mut c = Cursor { buf, what: "HELLO" };
    let digest: [u8; 32] = c.take(32)?.try_into().unwrap();
    let world_size = c.u32()?;
    let rank = c.u16()?;
    let count = c.u32()? as usize;
    if count > c.buf.len() / 10 {
        return Err(WireError::Malformed {
            what: "HELLO",
            reason: format!("plan of {count} entries does not fit the payload"),
        });
    }
    let plan = (0..count)
        .map(|_| get_entry(&mut c))
        .collect::<Result<_, _>>()?;
    c.finish()?;
    Ok(Hello {
        rank,
        world_size,
        digest,
        plan,
    })
}

pub fn encode_topo(t: &Topo) -> Vec<u8> {
    let mut out = vec![u8::from(t.bidirectional)];
    out.extend_from_slice(&(t.hosted.len() as u32).to_le_bytes());
    for h in &t.hosted {
        out.extend_from_slice(&h.rank.to_le_bytes());
        out.extend_from_slice(&(h.class.len() as u16).to_le_bytes());
        out.extend_from_slice(h.class.as_bytes());
    }
    out
}

pub fn decode_topo(buf: &[u8]) -> Result<Topo, WireError> {
    let mut c = Cursor { buf, what: "TOPO" };
    let flags = c.u8()?;
    let count = c.u32()? as usize;
    let mut hosted = Vec::new();
    for _ in 0..count {
        let rank = c.u16()?;
        let len = c.u16()? as usize;
        let class = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| WireError::Malformed {
            what: "TOPO",
            reason: e.to_string(),
        })?;
        hosted.push(HostedRank { rank, class });
    }
    c.finish()?;
    Ok(Topo {
        bidirectional: flags & 1 != 0,
        hosted,
    })
}

pub fn encode_open_op(o: &OpenOp) -> Vec<u8> {
    let mut out = Vec::with_capacity(14);
    put_entry(&mut out, &o.entry);
    out.extend_from_slice(&o.plan_index.to_le_bytes());
    out
}

pub fn decode_open_op(buf: &[u8]) -> Result<OpenOp, WireError> {
    let mut c = Cursor {
        buf,
        what: "OPEN_OP",
    };
    let entry = get_entry(&mut c)?;
    let plan_index = c.u32()?;
    c.finish()?;
    Ok(OpenOp { entry, plan_index })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Dial,
    Accept,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeOutcome {
    pub peer: Hello,
    pub peer_topo: Topo,
}

fn send<W: Write>(w: &mut W, f: &Frame) -> Result<(), WireError> {
    write_frame(w, &f.header, &f.payload)?;
    w.flush()?;
    Ok(())
}

fn recv<R: Read>(r: &mut R, want: MsgType, cap: u32) -> Result<Frame, WireError> {
    let f = read_frame(r, cap).map_err(|e| match e {
        WireError::Io(io)
            if matches!(
                io.kind(),
                io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
            ) =>
        {
            WireError::Timeout(format!("waiting for {want:?}"))
        }
        other => other,
    })?;
    match f.header.msg_type {
        t if t == want => Ok(f),
        MsgType::Error => Err(WireError::Remote(
            String::from_utf8_lossy(&f.payload).into_owned(),
        )),
        other => Err(WireError::Handshake(format!(
            "expected {want:?}, got {other:?}"
        ))),
    }
}

/// Runs the bootstrap exchange. On a digest mismatch the acceptor answers
/// with an ERROR frame before failing.
pub fn perform_handshake(
    stream: &mut TcpStream,
    side: Side,
    hello: &Hello,
    topo: &Topo,
    timeout: Duration,
    max_payload: u32,
) -> Result<HandshakeOutcome, WireError> {
    stream.set_read_timeout(Some(timeout))?;
    let out = exchange(stream, side, hello, topo, max_payload);
    stream.set_read_timeout(None)?;
    out
}

/// [`perform_handshake`] over any byte stream, without timeouts.
pub fn exchange<S: Read + Write>(
    s: &mut S,
    side: Side,
    hello: &Hello,
    topo: &Topo,
    max_payload: u32,
) -> Result<HandshakeOutcome, WireError> {
    let my_hello = Frame::control(MsgType::Hello, encode_hello(hello));
    let my_topo = Frame::control(MsgType::Topo, encode_topo(topo));
    let compatible =
        |peer: &Hello| peer.digest == hello.digest && peer.world_size == hello.world_size;
    match side {
        Side::Dial => {
            send(s, &my_hello)?;
            let peer = decode_hello(&recv(s, MsgType::Hello, max_payload)?.payload)?;
            if !compatible(&peer) {
                let _ = send(s, &Frame::error(DIGEST_MISMATCH));
                return Err(WireError::DigestMismatch);
            }
            let peer_topo = decode_topo(&recv(s, MsgType::Topo, max_payload)?.payload)?;
            send(s, &my_topo)?;
            Ok(HandshakeOutcome { peer, peer_topo })
        }
        Side::Accept => {
            let peer = decode_hello(&recv(s, MsgType::Hello, max_payload)?.payload)?;
            if !compatible(&peer) {
                let _ = send(s, &Frame::error(DIGEST_MISMATCH));
                return Err(WireError::DigestMismatch);
            }
            send(s, &my_hello)?;
            send(s, &my_topo)?;
            let peer_topo = decode_topo(&recv(s, MsgType::Topo, max_payload)?.payload)?;
            Ok(HandshakeOutcome { peer, peer_topo })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;
    use std::thread;

    fn hello(world: u32, rank: u16) -> Hello {
        Hello {
            rank,
            world_size: world,
            digest: [world as u8; 32],
            plan: vec![
                PlanEntry {
                    kind: CollectiveKind::AllReduce,
                    elem_size: 8,
                    bytes: 1 << 20,
                },
                PlanEntry {
                    kind: CollectiveKind::AllGather,
                    elem_size: 1,
                    bytes: 3,
                },
            ],
        }
    }

    fn topo(bidir: bool, ranks: &[u16]) -> Topo {
        Topo {
            bidirectional: bidir,
            hosted: ranks
                .iter()
                .map(|&rank| HostedRank {
                    rank,
                    class: "default".into(),
                })
                .collect(),
        }
    }

    #[test]
    fn payload_round_trips() {
        let h = hello(4, 2);
        assert_eq!(decode_hello(&encode_hello(&h)).unwrap(), h);
        let t = topo(true, &[1, 2, 3]);
        assert_eq!(decode_topo(&encode_topo(&t)).unwrap(), t);
        let o = OpenOp {
            entry: h.plan[1],
            plan_index: 9,
        };
        assert_eq!(decode_open_op(&encode_open_op(&o)).unwrap(), o);
    }

    #[test]
    fn malformed_payloads() {
        let mut bytes = encode_hello(&hello(4, 2));
        bytes.pop();
        assert!(matches!(
            decode_hello(&bytes),
            Err(WireError::Malformed { .. })
        ));
        let mut bytes = encode_open_op(&OpenOp {
            entry: hello(2, 0).plan[0],
            plan_index: 0,
        });
        bytes[0] = 7;
        assert!(decode_open_op(&bytes).is_err());
        bytes.push(0);
        assert!(decode_open_op(&bytes).is_err());
    }

    fn run_pair(
        dial: Hello,
        accept: Hello,
    ) -> (
        Result<HandshakeOutcome, WireError>,
        Result<HandshakeOutcome, WireError>,
    ) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            perform_handshake(
                &mut s,
                Side::Accept,
                &accept,
                &topo(true, &[1]),
                Duration::from_secs(5),
                1 << 20,
            )
        });
        let mut c = TcpStream::connect(addr).unwrap();
        let client = perform_handshake(
            &mut c,
            Side::Dial,
            &dial,
            &topo(false, &[0]),
            Duration::from_secs(5),
            1 << 20,
        );
        (client, server.join().unwrap())
    }

    #[test]
    fn matching_digests_establish_a_session() {
        let (c, s) = run_pair(hello(2, 0), hello(2, 1));
        let c = c.unwrap();
        let s = s.unwrap();
        assert_eq!(c.peer.rank, 1);
        assert!(c.peer_topo.bidirectional && c.peer_topo.hosts(1));
        assert_eq!(s.peer.plan.len(), 2);
        assert!(!s.peer_topo.bidirectional);
    }

    #[test]
    fn mismatched_world_size_gets_an_error_frame() {
        let (c, s) = run_pair(hello(2, 0), hello(3, 1));
        assert!(matches!(s, Err(WireError::DigestMismatch)));
        match c {
            Err(WireError::Remote(reason)) => assert_eq!(reason, DIGEST_MISMATCH),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn silent_peer_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hold = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            thread::sleep(Duration::from_millis(300));
            drop(s);
        });
        let mut c = TcpStream::connect(addr).unwrap();
        let r = perform_handshake(
            &mut c,
            Side::Dial,
            &hello(2, 0),
            &topo(false, &[0]),
            Duration::from_millis(50),
            1 << 20,
        );
        assert!(matches!(r, Err(WireError::Timeout(_))), "{r:?}");
        hold.join().unwrap();
    }
}
