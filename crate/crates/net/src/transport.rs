//! Length-prefixed frames over TCP with per-link byte accounting.
//!
//! A frame is a u32 little-endian body length followed by the body.

use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

pub const FRAME_HEADER_LEN: usize = 4;
/// Larger announced lengths are treated as a corrupt stream.
pub const MAX_FRAME_LEN: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection refused by {0}")]
    ConnectRefused(String),
    #[error("timed out")]
    Timeout,
    #[error("disconnected")]
    Disconnected,
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            ErrorKind::WouldBlock | ErrorKind::TimedOut => TransportError::Timeout,
            ErrorKind::UnexpectedEof
            | ErrorKind::ConnectionReset
            | ErrorKind::ConnectionAborted
            | ErrorKind::BrokenPipe
            | ErrorKind::NotConnected => TransportError::Disconnected,
            _ => TransportError::Io(e),
        }
    }
}

/// Cumulative counters of one link, framing included.
#[derive(Debug, Default)]
pub struct LinkStats {
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
    messages_sent: AtomicU64,
    messages_received: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
}

impl StatsSnapshot {
    /// Bytes in both directions.
    pub fn total_bytes(&self) -> u64 {
        self.bytes_sent + self.bytes_received
    }

    /// Counter growth since `earlier`.
    pub fn since(&self, earlier: &StatsSnapshot) -> StatsSnapshot {
        StatsSnapshot {
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            bytes_received: self.bytes_received - earlier.bytes_received,
            messages_sent: self.messages_sent - earlier.messages_sent,
            messages_received: self.messages_received - earlier.messages_received,
        }
    }
}

impl LinkStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            bytes_sent: self.bytes_sent.load(Ordering::SeqCst),
            bytes_received: self.bytes_received.load(Ordering::SeqCst),
            messages_sent: self.messages_sent.load(Ordering::SeqCst),
            messages_received: self.messages_received.load(Ordering::SeqCst),
        }
    }
}

/// Latency injected on the sending side of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LinkConditions {
    pub one_way_delay: Duration,
    pub enabled: bool,
}

impl LinkConditions {
    pub fn delay(d: Duration) -> Self {
        LinkConditions { one_way_delay: d, enabled: true }
    }
}

/// Sending half. Clones share the socket, the stats and the conditions.
#[derive(Clone)]
pub struct FrameWriter {
    out: Arc<Mutex<BufWriter<TcpStream>>>,
    stats: Arc<LinkStats>,
    conditions: Arc<Mutex<LinkConditions>>,
}

impl FrameWriter {
    pub fn send_frame(&self, body: &[u8]) -> Result<(), TransportError> {
        if body.len() > MAX_FRAME_LEN {
            return Err(TransportError::FrameTooLarge(body.len()));
        }
        let cond = *self.conditions.lock().unwrap();
        if cond.enabled && !cond.one_way_delay.is_zero() {
            std::thread::sleep(cond.one_way_delay);
        }
        let mut out = self.out.lock().unwrap();
        out.write_all(&(body.len() as u32).to_le_bytes())?;
        out.write_all(body)?;
        out.flush()?;
        self.stats.bytes_sent.fetch_add((FRAME_HEADER_LEN + body.len()) as u64, Ordering::SeqCst);
        self.stats.messages_sent.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    pub fn stats(&self) -> &Arc<LinkStats> {
        &self.stats
    }

    pub fn set_conditions(&self, c: LinkConditions) {
        *self.conditions.lock().unwrap() = c;
    }
}

/// Receiving half.
pub struct FrameReader {
    input: BufReader<TcpStream>,
    stats: Arc<LinkStats>,
}

impl FrameReader {
    pub fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        self.input.read_exact(&mut header)?;
        let len = u32::from_le_bytes(header) as usize;
        if len > MAX_FRAME_LEN {
            return Err(TransportError::FrameTooLarge(len));
        }
        let mut body = vec![0u8; len];
        self.input.read_exact(&mut body)?;
        self.stats.bytes_received.fetch_add((FRAME_HEADER_LEN + len) as u64, Ordering::SeqCst);
        self.stats.messages_received.fetch_add(1, Ordering::SeqCst);
        Ok(body)
    }

    /// `None` blocks forever.
    pub fn set_timeout(&self, t: Option<Duration>) -> Result<(), TransportError> {
        Ok(self.input.get_ref().set_read_timeout(t)?)
    }
}

/// One connected link.
pub struct Endpoint {
    pub reader: FrameReader,
    pub writer: FrameWriter,
    stream: TcpStream,
}

impl Endpoint {
    fn new(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        let stats = Arc::new(LinkStats::default());
        Ok(Endpoint {
            reader: FrameReader { input: BufReader::new(stream.try_clone()?), stats: stats.clone() },
            writer: FrameWriter {
                out: Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?))),
                stats,
                conditions: Arc::default(),
            },
            stream,
        })
    }

    pub fn send_frame(&self, body: &[u8]) -> Result<(), TransportError> {
        self.writer.send_frame(body)
    }

    pub fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        self.reader.recv_frame()
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.writer.stats.snapshot()
    }

    pub fn shared_stats(&self) -> Arc<LinkStats> {
        self.writer.stats.clone()
    }

    pub fn set_conditions(&self, c: LinkConditions) {
        self.writer.set_conditions(c);
    }

    /// Handle that can close the link from another thread.
    pub fn closer(&self) -> Closer {
        Closer(self.stream.try_clone().ok())
    }

    pub fn peer(&self) -> String {
        self.stream.peer_addr().map(|a| a.to_string()).unwrap_or_default()
    }

    pub fn split(self) -> (FrameReader, FrameWriter) {
        (self.reader, self.writer)
    }
}

/// Shuts a link down, unblocking its reader.
pub struct Closer(Option<TcpStream>);

impl Closer {
    pub fn close(&self) {
        if let Some(s) = &self.0 {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

pub struct Listener {
    inner: TcpListener,
}

impl Listener {
    pub fn port(&self) -> u16 {
        self.inner.local_addr().map(|a| a.port()).unwrap_or(0)
    }

    pub fn accept(&self) -> Result<Endpoint, TransportError> {
        let (stream, _) = self.inner.accept()?;
        stream.set_nonblocking(false)?;
        Endpoint::new(stream)
    }

    /// Like accept, but gives up with `Timeout` once nothing is pending.
    pub fn try_accept(&self) -> Result<Endpoint, TransportError> {
        self.inner.set_nonblocking(true)?;
        let r = self.inner.accept();
        self.inner.set_nonblocking(false)?;
        let (stream, _) = r?;
        stream.set_nonblocking(false)?;
        Endpoint::new(stream)
    }
}

/// Listens on localhost; port 0 picks a free one.
pub fn listen(port: u16) -> Result<Listener, TransportError> {
    Ok(Listener { inner: TcpListener::bind(("127.0.0.1", port))? })
}

pub fn connect(host: &str, port: u16) -> Result<Endpoint, TransportError> {
    connect_timeout(host, port, Duration::from_secs(5))
}

pub fn connect_timeout(host: &str, port: u16, timeout: Duration) -> Result<Endpoint, TransportError> {
    let addr = (host, port)
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| TransportError::Io(io::Error::new(ErrorKind::NotFound, format!("cannot resolve {host}"))))?;
    match TcpStream::connect_timeout(&addr, timeout) {
        Ok(s) => Endpoint::new(s),
        Err(e) if e.kind() == ErrorKind::ConnectionRefused => Err(TransportError::ConnectRefused(addr.to_string())),
        Err(e) => Err(e.into()),
    }
}
