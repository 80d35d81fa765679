//! Hosts a monitored VM behind a listening socket.
//!
//! One thread owns the monitor and alternates between handling a queued
//! interrupt and running a slice of the application. Per connection, a
//! reader thread queues incoming frames and a writer thread drains a bounded
//! outbox. Unsolicited events are dropped when a client's outbox is full;
//! responses never are.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TryRecvError, TrySendError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use oot_core::monitor::{Monitor, Opcode};
use oot_core::vm::{RunControl, Status};

use crate::transport::{Closer, Endpoint, LinkStats, Listener, StatsSnapshot};

#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    /// Instructions per run slice between interrupt checks of the queue.
    pub slice: u64,
    /// Outbox capacity per connection.
    pub outbox: usize,
    /// Wait for interrupts while the application is not running.
    pub idle_poll: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { slice: 20_000, outbox: 32, idle_poll: Duration::from_millis(20) }
    }
}

type Job = Box<dyn FnOnce(&mut Monitor) + Send>;

enum Inbound {
    Connected { id: u64, outbox: SyncSender<Vec<u8>>, closer: Closer, stats: Arc<LinkStats> },
    Frame { id: u64, bytes: Vec<u8> },
    Closed { id: u64 },
    Exec(Job),
    Stats(Sender<Vec<StatsSnapshot>>),
    Shutdown,
}

struct Conn {
    outbox: SyncSender<Vec<u8>>,
    closer: Closer,
    stats: Arc<LinkStats>,
    /// Sent something other than a proxy call: receives events.
    client: bool,
}

#[derive(Default)]
struct Shared {
    status: AtomicU8,
    traps: AtomicU64,
    executed: AtomicU64,
    events_dropped: AtomicU64,
    shutdown: AtomicBool,
    pending: AtomicBool,
}

/// A running server. Dropping it shuts the server down.
pub struct ServerHandle {
    port: u16,
    shared: Arc<Shared>,
    inbox: Sender<Inbound>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn status(&self) -> Status {
        Status::from_code(self.shared.status.load(Ordering::SeqCst)).unwrap_or(Status::Running)
    }

    pub fn trap_count(&self) -> u64 {
        self.shared.traps.load(Ordering::SeqCst)
    }

    pub fn instructions_executed(&self) -> u64 {
        self.shared.executed.load(Ordering::SeqCst)
    }

    pub fn events_dropped(&self) -> u64 {
        self.shared.events_dropped.load(Ordering::SeqCst)
    }

    /// Runs `f` on the monitor between two instructions and returns its
    /// result. For inspection and setup, not part of the wire protocol.
    pub fn exec<R: Send + 'static>(&self, f: impl FnOnce(&mut Monitor) -> R + Send + 'static) -> Option<R> {
        let (tx, rx) = mpsc::channel();
        self.inbox
            .send(Inbound::Exec(Box::new(move |m| {
                let _ = tx.send(f(m));
            })))
            .ok()?;
        self.shared.pending.store(true, Ordering::SeqCst);
        rx.recv().ok()
    }

    /// Byte counters of every live connection, as seen by the server.
    pub fn connection_stats(&self) -> Vec<StatsSnapshot> {
        let (tx, rx) = mpsc::channel();
        if self.inbox.send(Inbound::Stats(tx)).is_err() {
            return Vec::new();
        }
        self.shared.pending.store(true, Ordering::SeqCst);
        rx.recv().unwrap_or_default()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.pending.store(true, Ordering::SeqCst);
        let _ = self.inbox.send(Inbound::Shutdown);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Starts serving `monitor` on `listener`.
pub fn spawn(monitor: Monitor, listener: Listener, cfg: ServerConfig) -> ServerHandle {
    let shared = Arc::new(Shared::default());
    let (tx, rx) = mpsc::channel();
    let port = listener.port();
    shared.status.store(monitor.vm.status().code(), Ordering::SeqCst);

    let acceptor = {
        let shared = shared.clone();
        let tx = tx.clone();
        std::thread::Builder::new()
            .name(format!("oot-accept-{port}"))
            .spawn(move || accept_loop(listener, tx, shared, cfg))
            .expect("spawn acceptor")
    };
    let vm = {
        let shared = shared.clone();
        std::thread::Builder::new()
            .name(format!("oot-vm-{port}"))
            .spawn(move || vm_loop(monitor, rx, shared, cfg))
            .expect("spawn vm thread")
    };
    ServerHandle { port, shared, inbox: tx, threads: vec![vm, acceptor] }
}

fn accept_loop(listener: Listener, inbox: Sender<Inbound>, shared: Arc<Shared>, cfg: ServerConfig) {
    let mut next_id = 0u64;
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.try_accept() {
            Ok(ep) => {
                next_id += 1;
                start_connection(next_id, ep, &inbox, &shared, cfg);
            }
            Err(_) => std::thread::sleep(Duration::from_millis(5)),
        }
    }
}

fn start_connection(id: u64, ep: Endpoint, inbox: &Sender<Inbound>, shared: &Arc<Shared>, cfg: ServerConfig) {
    let closer = ep.closer();
    let stats = ep.shared_stats();
    let (mut reader, writer) = ep.split();
    let (out_tx, out_rx) = mpsc::sync_channel::<Vec<u8>>(cfg.outbox);
    if inbox.send(Inbound::Connected { id, outbox: out_tx, closer, stats }).is_err() {
        return;
    }
    std::thread::spawn(move || {
        for bytes in out_rx {
            if writer.send_frame(&bytes).is_err() {
                break;
            }
        }
    });
    let inbox = inbox.clone();
    let shared = shared.clone();
    std::thread::spawn(move || {
        while let Ok(bytes) = reader.recv_frame() {
            if inbox.send(Inbound::Frame { id, bytes }).is_err() {
                return;
            }
            shared.pending.store(true, Ordering::SeqCst);
        }
        let _ = inbox.send(Inbound::Closed { id });
        shared.pending.store(true, Ordering::SeqCst);
    });
}

struct VmLoop {
    monitor: Monitor,
    conns: HashMap<u64, Conn>,
    shared: Arc<Shared>,
}

impl VmLoop {
    fn publish(&self) {
        self.shared.status.store(self.monitor.vm.status().code(), Ordering::SeqCst);
        self.shared.traps.store(self.monitor.trap_count(), Ordering::SeqCst);
        self.shared.executed.store(self.monitor.vm.instructions_executed(), Ordering::SeqCst);
    }

    fn flush_events(&mut self) {
        let events: Vec<_> = self.monitor.take_events().collect();
        for ev in events {
            let bytes = ev.response().encode();
            for c in self.conns.values().filter(|c| c.client) {
                if let Err(TrySendError::Full(_)) = c.outbox.try_send(bytes.clone()) {
                    self.shared.events_dropped.fetch_add(1, Ordering::SeqCst);
                }
            }
        }
    }

    fn refresh_client_flag(&mut self) {
        self.monitor.ctx.client_connected = self.conns.values().any(|c| c.client);
    }

    /// Returns false on shutdown.
    fn handle(&mut self, msg: Inbound) -> bool {
        match msg {
            Inbound::Connected { id, outbox, closer, stats } => {
                self.conns.insert(id, Conn { outbox, closer, stats, client: false });
            }
            Inbound::Closed { id } => {
                self.conns.remove(&id);
                self.refresh_client_flag();
            }
            Inbound::Frame { id, bytes } => {
                let is_proxy = bytes.first() == Some(&(Opcode::ProxyCall as u8));
                if !is_proxy {
                    if let Some(c) = self.conns.get_mut(&id) {
                        c.client = true;
                    }
                    self.refresh_client_flag();
                }
                let response = self.monitor.handle_bytes(&bytes);
                self.publish();
                // Events raised while handling (a step onto a breakpoint)
                // go out after the acknowledgement.
                if let Some(c) = self.conns.get(&id) {
                    let _ = c.outbox.send(response.encode());
                }
            }
            Inbound::Exec(job) => job(&mut self.monitor),
            Inbound::Stats(tx) => {
                let _ = tx.send(self.conns.values().map(|c| c.stats.snapshot()).collect());
            }
            Inbound::Shutdown => return false,
        }
        self.publish();
        self.flush_events();
        true
    }
}

fn vm_loop(monitor: Monitor, inbox: Receiver<Inbound>, shared: Arc<Shared>, cfg: ServerConfig) {
    let mut s = VmLoop { monitor, conns: HashMap::new(), shared: shared.clone() };
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let running = s.monitor.vm.status() == Status::Running;
        shared.pending.store(false, Ordering::SeqCst);
        let next = if running {
            match inbox.try_recv() {
                Ok(m) => Some(m),
                Err(TryRecvError::Empty) => None,
                Err(TryRecvError::Disconnected) => break,
            }
        } else {
            match inbox.recv_timeout(cfg.idle_poll) {
                Ok(m) => Some(m),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => break,
            }
        };
        if let Some(m) = next {
            if !s.handle(m) {
                break;
            }
            // More may be queued: check again before a long slice.
            shared.pending.store(true, Ordering::SeqCst);
        }
        if s.monitor.vm.status() == Status::Running {
            let ctl = RunControl { budget: Some(cfg.slice), interrupt: Some(&shared.pending), return_depth: None };
            s.monitor.run_slice(ctl);
            s.publish();
            s.flush_events();
            std::thread::yield_now();
        }
    }
    for c in s.conns.values() {
        c.closer.close();
    }
}
