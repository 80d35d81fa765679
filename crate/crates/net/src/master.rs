//! The node that collects what devices send with `write_f32`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use oot_core::device::Sink;

use crate::transport::{self, Listener, TransportError};

/// One received value and when it arrived, in ms since the node started.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading {
    pub at_ms: f64,
    pub value: f32,
}

pub struct MasterNode {
    port: u16,
    log: Arc<Mutex<Vec<Reading>>>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl MasterNode {
    pub fn spawn(listener: Listener) -> Self {
        let port = listener.port();
        let log: Arc<Mutex<Vec<Reading>>> = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        let start = Instant::now();
        let acceptor = {
            let (log, stop) = (log.clone(), stop.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let Ok(ep) = listener.try_accept() else {
                        std::thread::sleep(Duration::from_millis(5));
                        continue;
                    };
                    let log = log.clone();
                    let (mut reader, _) = ep.split();
                    std::thread::spawn(move || {
                        while let Ok(frame) = reader.recv_frame() {
                            let Ok(b) = <[u8; 4]>::try_from(frame.as_slice()) else { continue };
                            let r = Reading { at_ms: start.elapsed().as_secs_f64() * 1000.0, value: f32::from_le_bytes(b) };
                            log.lock().unwrap().push(r);
                        }
                    });
                }
            })
        };
        MasterNode { port, log, stop, acceptor: Some(acceptor) }
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn log(&self) -> Vec<Reading> {
        self.log.lock().unwrap().clone()
    }

    /// Waits until at least `n` readings arrived.
    pub fn wait_for(&self, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.log.lock().unwrap().len() >= n {
                return true;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        self.log.lock().unwrap().len() >= n
    }
}

impl Drop for MasterNode {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
    }
}

/// A device sink that forwards each value as a 4-byte frame. Send failures
/// are dropped, as a device would drop packets.
pub fn master_sink(host: &str, port: u16) -> Result<Sink, TransportError> {
    let ep = transport::connect(host, port)?;
    let (_, writer) = ep.split();
    Ok(Arc::new(move |v: f32| {
        let _ = writer.send_frame(&v.to_le_bytes());
    }))
}
