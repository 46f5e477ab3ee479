//! Robot backend reached over a stream socket, and a conformance stub that
//! acknowledges every step.

use std::io::BufWriter;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread::JoinHandle;
use std::time::Duration;

use tracing::debug;

use super::wire::{read_message, write_message, WireMessage};
use super::Backend;
use crate::error::{BackendError, ProtocolError};
use crate::planner::ActionPolicy;

pub const ACK_OK: &str = "ok";

/// Acknowledgment id for step `index` of `policy`.
pub fn ack_id(policy: &ActionPolicy, index: usize) -> String {
    format!("{}:{}:{}", policy.agent_id, policy.turn_index, index)
}

pub struct RemoteBackend {
    stream: TcpStream,
}

impl RemoteBackend {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, BackendError> {
        let addrs: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|e| BackendError::Unreachable(e.to_string()))?
            .collect();
        let mut last = String::from("no address");
        for a in addrs {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    stream
                        .set_read_timeout(Some(timeout))
                        .map_err(|e| BackendError::Unreachable(e.to_string()))?;
                    stream.set_nodelay(true).ok();
                    return Ok(Self { stream });
                }
                Err(e) => last = format!("{a}: {e}"),
            }
        }
        Err(BackendError::Unreachable(last))
    }

    fn unreachable(e: ProtocolError) -> BackendError {
        match e {
            ProtocolError::Io(io) => BackendError::Unreachable(io.to_string()),
            other => BackendError::Protocol(other),
        }
    }
}

impl Backend for RemoteBackend {
    fn begin(&mut self, policy: &ActionPolicy) -> Result<(), BackendError> {
        write_message(&mut BufWriter::new(&self.stream), &WireMessage::PolicyExecute(policy.clone()))
            .map_err(Self::unreachable)
    }

    fn perform(&mut self, policy: &ActionPolicy, index: usize) -> Result<(), BackendError> {
        let want = ack_id(policy, index);
        loop {
            match read_message(&mut self.stream).map_err(Self::unreachable)? {
                None => return Err(BackendError::Unreachable("backend closed the connection".into())),
                Some(WireMessage::EventAck { event_id, status }) if event_id == want => {
                    return if status == ACK_OK {
                        Ok(())
                    } else {
                        Err(BackendError::Rejected { step: index, status })
                    };
                }
                Some(other) => debug!(?other, "ignoring unrelated backend message"),
            }
        }
    }

    fn paces_itself(&self) -> bool {
        true
    }
}

/// Conformance stub: acknowledges every step of every policy with `ok`.
pub struct StubRobot {
    listener: TcpListener,
}

impl StubRobot {
    pub fn bind(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves connections one at a time until the listener fails.
    pub fn serve(self) -> std::io::Result<()> {
        for conn in self.listener.incoming() {
            let stream = conn?;
            if let Err(e) = serve_connection(stream) {
                debug!(error = %e, "stub connection ended");
            }
        }
        Ok(())
    }

    pub fn spawn(self) -> JoinHandle<std::io::Result<()>> {
        std::thread::spawn(move || self.serve())
    }
}

fn serve_connection(mut stream: TcpStream) -> Result<(), ProtocolError> {
    while let Some(msg) = read_message(&mut stream)? {
        if let WireMessage::PolicyExecute(p) = msg {
            for i in 0..p.steps.len() {
                write_message(
                    &mut stream,
                    &WireMessage::EventAck {
                        event_id: ack_id(&p, i),
                        status: ACK_OK.into(),
                    },
                )?;
            }
        }
    }
    Ok(())
}
