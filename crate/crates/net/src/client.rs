//! The debugger side of a VM connection.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, TrySendError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use oot_core::monitor::{BreakpointPolicy, BreakpointSpec, DumpMode, Interrupt, Response, VmReport};
use oot_core::proxy::{ProxyReply, RemoteLink};
use oot_core::wire::DecodeError;
use oot_core::Value;
use thiserror::Error;

use crate::transport::{self, Closer, FrameWriter, LinkConditions, LinkStats, StatsSnapshot, TransportError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("opcode {opcode:#04x} rejected: {message}")]
    Rejected { opcode: u8, message: String },
    #[error("malformed response: {0}")]
    Decode(#[from] DecodeError),
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("connection closed")]
    Disconnected,
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
/// Events buffered before new ones are dropped.
pub const EVENT_BUFFER: usize = 64;

pub struct DebugClient {
    writer: FrameWriter,
    stats: Arc<LinkStats>,
    closer: Closer,
    responses: Mutex<Receiver<Response>>,
    events: Mutex<Receiver<Response>>,
    events_dropped: Arc<AtomicU64>,
    timeout: Duration,
}

impl DebugClient {
    pub fn connect(host: &str, port: u16) -> Result<Self, TransportError> {
        let ep = transport::connect(host, port)?;
        let closer = ep.closer();
        let stats = ep.shared_stats();
        let (mut reader, writer) = ep.split();
        let (resp_tx, resp_rx) = mpsc::channel();
        let (ev_tx, ev_rx) = mpsc::sync_channel(EVENT_BUFFER);
        let events_dropped = Arc::new(AtomicU64::new(0));
        let dropped = events_dropped.clone();
        std::thread::spawn(move || {
            while let Ok(frame) = reader.recv_frame() {
                let Ok(r) = Response::decode(&frame) else { break };
                if r.is_event() {
                    if let Err(TrySendError::Full(_)) = ev_tx.try_send(r) {
                        dropped.fetch_add(1, Ordering::SeqCst);
                    }
                } else if resp_tx.send(r).is_err() {
                    break;
                }
            }
        });
        Ok(DebugClient {
            writer,
            stats,
            closer,
            responses: Mutex::new(resp_rx),
            events: Mutex::new(ev_rx),
            events_dropped,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub fn with_timeout(mut self, t: Duration) -> Self {
        self.timeout = t;
        self
    }

    /// Sends one interrupt and waits for its response, whatever its status.
    pub fn request(&self, msg: &Interrupt) -> Result<Response, ClientError> {
        self.request_raw(&msg.encode())
    }

    pub fn request_raw(&self, bytes: &[u8]) -> Result<Response, ClientError> {
        // Holding the receiver keeps request and response paired.
        let rx = self.responses.lock().unwrap();
        self.writer.send_frame(bytes)?;
        match rx.recv_timeout(self.timeout) {
            Ok(r) => Ok(r),
            Err(RecvTimeoutError::Timeout) => Err(ClientError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(ClientError::Disconnected),
        }
    }

    /// Like [`request`](Self::request) but turns error responses into `Err`.
    pub fn call(&self, msg: &Interrupt) -> Result<Vec<u8>, ClientError> {
        let r = self.request(msg)?;
        match r.error_message() {
            Some(message) => Err(ClientError::Rejected { opcode: r.opcode, message }),
            None => Ok(r.payload),
        }
    }

    fn report(&self, msg: &Interrupt) -> Result<VmReport, ClientError> {
        Ok(VmReport::decode(&self.call(msg)?)?)
    }

    pub fn run(&self) -> Result<VmReport, ClientError> {
        self.report(&Interrupt::Run)
    }

    pub fn pause(&self) -> Result<VmReport, ClientError> {
        self.report(&Interrupt::Pause)
    }

    pub fn step(&self) -> Result<VmReport, ClientError> {
        self.report(&Interrupt::Step)
    }

    pub fn step_over(&self) -> Result<VmReport, ClientError> {
        self.report(&Interrupt::StepOver)
    }

    pub fn add_breakpoint(&self, b: BreakpointSpec) -> Result<Vec<u8>, ClientError> {
        self.call(&Interrupt::AddBreakpoint(b))
    }

    pub fn remove_breakpoint(&self, b: BreakpointSpec) -> Result<Vec<u8>, ClientError> {
        self.call(&Interrupt::RemoveBreakpoint(b))
    }

    pub fn set_policy(&self, p: BreakpointPolicy) -> Result<(), ClientError> {
        self.call(&Interrupt::SetPolicy(p)).map(drop)
    }

    pub fn dump(&self, mode: DumpMode) -> Result<Vec<u8>, ClientError> {
        self.call(&Interrupt::Dump(mode))
    }

    pub fn receive_state(&self, stream: Vec<u8>) -> Result<VmReport, ClientError> {
        self.report(&Interrupt::ReceiveState(stream))
    }

    pub fn update_module(&self, blob: Vec<u8>) -> Result<Vec<u8>, ClientError> {
        self.call(&Interrupt::UpdateModule(blob))
    }

    pub fn proxy_call(&self, fidx: u32, args: &[Value]) -> Result<ProxyReply, ClientError> {
        let payload = self.call(&Interrupt::ProxyCall { fidx, args: args.to_vec() })?;
        Ok(ProxyReply::decode(&payload)?)
    }

    /// Next unsolicited event, waiting up to `timeout`.
    pub fn next_event(&self, timeout: Duration) -> Option<Response> {
        self.events.lock().unwrap().recv_timeout(timeout).ok()
    }

    /// Buffered events, without waiting.
    pub fn drain_events(&self) -> Vec<Response> {
        self.events.lock().unwrap().try_iter().collect()
    }

    pub fn events_dropped(&self) -> u64 {
        self.events_dropped.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    pub fn set_conditions(&self, c: LinkConditions) {
        self.writer.set_conditions(c);
    }

    pub fn close(&self) {
        self.closer.close();
    }
}

impl Drop for DebugClient {
    fn drop(&mut self) {
        self.closer.close();
    }
}

/// Proxy calls from a local VM to the device over a dedicated connection.
pub struct DeviceLink {
    client: DebugClient,
}

impl DeviceLink {
    pub fn connect(host: &str, port: u16) -> Result<Self, TransportError> {
        Ok(DeviceLink { client: DebugClient::connect(host, port)? })
    }

    pub fn client(&self) -> &DebugClient {
        &self.client
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.client.stats()
    }
}

impl RemoteLink for DeviceLink {
    fn proxy_call(&self, fidx: u32, args: &[Value]) -> Result<ProxyReply, String> {
        self.client.proxy_call(fidx, args).map_err(|e| e.to_string())
    }
}
