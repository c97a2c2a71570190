//! Thread-per-connection TCP server over a shared registry.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, error, info, warn};

use crate::protocol::{read_frame, write_frame, Incoming, Opcode};
use crate::registry::Registry;
use crate::Result;

const ACCEPT_POLL: Duration = Duration::from_millis(20);

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for the accept loop to exit.
    /// Connections already open finish their current request.
    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    /// Flag that stops the server when set; for signal handlers.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Blocks until the stop flag is set, then shuts down.
    pub fn wait(mut self) {
        while !self.stop.load(Ordering::SeqCst) {
            thread::sleep(ACCEPT_POLL);
        }
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
            info!("broker on {} stopped", self.addr);
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

/// Binds `address` and serves the registry until the handle is shut down.
pub fn serve<A: ToSocketAddrs>(address: A, registry: Arc<Registry>) -> Result<ServerHandle> {
    let listener = TcpListener::bind(address)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let accept = thread::spawn(move || {
        while !flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    debug!("connection from {peer}");
                    let registry = registry.clone();
                    thread::spawn(move || {
                        if let Err(e) = handle(stream, &registry) {
                            warn!("connection from {peer} ended: {e}");
                        }
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
                Err(e) => {
                    error!("accept failed: {e}");
                    thread::sleep(ACCEPT_POLL);
                }
            }
        }
    });
    info!("broker listening on {addr}");
    Ok(ServerHandle {
        addr,
        stop,
        accept: Some(accept),
    })
}

fn handle(stream: TcpStream, registry: &Registry) -> Result<()> {
    stream.set_nonblocking(false)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(frame) = read_frame(&mut reader)? {
        let (op, payload) = respond(frame, registry)?;
        write_frame(&mut writer, op, &payload)?;
    }
    Ok(())
}

fn err(reason: impl Into<String>) -> (Opcode, Vec<u8>) {
    (Opcode::Err, reason.into().into_bytes())
}

fn respond(frame: Incoming, registry: &Registry) -> Result<(Opcode, Vec<u8>)> {
    Ok(match frame {
        Incoming::UnknownOpcode(op) => err(format!("malformed: unknown opcode {op:#04x}")),
        Incoming::Oversized(len) => err(format!("malformed: frame of {len} bytes exceeds the limit")),
        Incoming::Frame(Opcode::Publish, bytes) => match registry.publish(&bytes)? {
            Ok(digest) => (Opcode::Ok, digest.into_bytes()),
            Err(refusal) => {
                info!("publish refused: {}", refusal.wire());
                err(refusal.wire())
            }
        },
        Incoming::Frame(Opcode::Fetch, digest) => {
            let digest = match std::str::from_utf8(&digest) {
                Ok(d) if d.len() == 64 && d.bytes().all(|b| b.is_ascii_hexdigit()) => d.to_ascii_lowercase(),
                _ => return Ok(err("malformed: digest must be 64 hex characters")),
            };
            match registry.fetch(&digest)? {
                Some(bytes) => (Opcode::Ok, bytes),
                None => err("not-found"),
            }
        }
        Incoming::Frame(Opcode::List, _) => (Opcode::Ok, serde_json::to_vec(&registry.list())?),
        Incoming::Frame(op @ (Opcode::Ok | Opcode::Err), _) => {
            err(format!("malformed: {op:?} is a response opcode"))
        }
    })
}
