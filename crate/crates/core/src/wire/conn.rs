//! Connection setup: dialing with retry and a cancellable acceptor.

use std::io;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::handshake::{perform_handshake, HandshakeOutcome, Hello, Side, Topo};
use super::WireError;

const RETRY: Duration = Duration::from_millis(10);

pub fn bind(addr: &str) -> Result<TcpListener, WireError> {
    TcpListener::bind(addr)
        .map_err(|e| WireError::Io(io::Error::new(e.kind(), format!("bind {addr}: {e}"))))
}

/// Connects to `addr`, retrying refused connections until `timeout` passes.
pub fn dial(addr: &str, timeout: Duration) -> Result<TcpStream, WireError> {
    let deadline = Instant::now() + timeout;
    let target = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| WireError::Handshake(format!("cannot resolve {addr}")))?;
    loop {
        match TcpStream::connect_timeout(&target, timeout.max(RETRY)) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if Instant::now() >= deadline => {
                return Err(WireError::Timeout(format!("connecting to {addr}: {e}")));
            }
            Err(_) => thread::sleep(RETRY),
        }
    }
}

type Accepted = Option<(TcpStream, HandshakeOutcome)>;

/// Accepts one connection in the background and runs the acceptor side of
/// the handshake on it.
pub struct Acceptor {
    cancel: Arc<AtomicBool>,
    handle: JoinHandle<Result<Accepted, WireError>>,
}

impl Acceptor {
    pub fn spawn(
        listener: TcpListener,
        hello: Hello,
        topo: Topo,
        timeout: Duration,
        max_payload: u32,
    ) -> Acceptor {
        let cancel = Arc::new(AtomicBool::new(false));
        let flag = cancel.clone();
        let handle = thread::Builder::new()
            .name("cemu-accept".into())
            .spawn(move || {
                let deadline = Instant::now() + timeout;
                listener.set_nonblocking(true)?;
                loop {
                    if flag.load(Ordering::Acquire) {
                        return Ok(None);
                    }
                    match listener.accept() {
                        Ok((mut s, _)) => {
                            s.set_nonblocking(false)?;
                            s.set_nodelay(true)?;
                            let out = perform_handshake(
                                &mut s,
                                Side::Accept,
                                &hello,
                                &topo,
                                timeout,
                                max_payload,
                            )?;
                            return Ok(Some((s, out)));
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            if Instant::now() >= deadline {
                                return Err(WireError::Timeout(
                                    "waiting for the predecessor to connect".into(),
                                ));
                            }
                            thread::sleep(Duration::from_millis(2));
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            })
            .expect("spawn acceptor");
        Acceptor { cancel, handle }
    }

    /// Stops waiting for a connection.
    pub fn cancel(self) {
        self.cancel.store(true, Ordering::Release);
        let _ = self.handle.join();
    }

    pub fn join(self) -> Result<(TcpStream, HandshakeOutcome), WireError> {
        match self.handle.join() {
            Ok(Ok(Some(v))) => Ok(v),
            Ok(Ok(None)) => Err(WireError::Closed),
            Ok(Err(e)) => Err(e),
            Err(_) => Err(WireError::Handshake("acceptor thread panicked".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::CollectiveKind;
    use crate::wire::handshake::{HostedRank, PlanEntry};

    fn hello(rank: u16) -> Hello {
        Hello {
            rank,
            world_size: 2,
            digest: [1; 32],
            plan: vec![PlanEntry {
                kind: CollectiveKind::AllReduce,
                elem_size: 1,
                bytes: 8,
            }],
        }
    }

    fn topo(rank: u16) -> Topo {
        Topo {
            bidirectional: false,
            hosted: vec![HostedRank {
                rank,
                class: "default".into(),
            }],
        }
    }

    #[test]
    fn dial_retries_until_listener_appears() {
        let probe = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = probe.local_addr().unwrap().to_string();
        drop(probe);
        let a = addr.clone();
        let late = thread::spawn(move || {
            thread::sleep(Duration::from_millis(50));
            let l = TcpListener::bind(&a).unwrap();
            let acc = Acceptor::spawn(l, hello(1), topo(1), Duration::from_secs(5), 1024);
            acc.join().map(|(_, o)| o.peer.rank)
        });
        let mut s = dial(&addr, Duration::from_secs(5)).unwrap();
        let out = perform_handshake(
            &mut s,
            Side::Dial,
            &hello(0),
            &topo(0),
            Duration::from_secs(5),
            1024,
        )
        .unwrap();
        assert_eq!(out.peer.rank, 1);
        assert_eq!(late.join().unwrap().unwrap(), 0);
    }

    #[test]
    fn dial_gives_up() {
        let probe = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = probe.local_addr().unwrap().to_string();
        drop(probe);
        assert!(matches!(
            dial(&addr, Duration::from_millis(30)),
            Err(WireError::Timeout(_))
        ));
    }

    #[test]
    fn acceptor_can_be_cancelled() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let acc = Acceptor::spawn(l, hello(1), topo(1), Duration::from_secs(30), 1024);
        let t = Instant::now();
        acc.cancel();
        assert!(t.elapsed() < Duration::from_secs(1));
    }
}
