//! Timing disturbance of proxy calls on a periodic device application.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{ensure, Context, Result};
use oot_core::corpus;
use oot_core::device::{ClockMode, Device, SensorScript};
use oot_core::proxy::{ProxyBridge, RemoteLink};
use oot_net::{listen, master_sink, DeviceLink, MasterNode};

use crate::node::{parse, remote_vm, RemoteOptions};
use crate::report::ScenarioResult;
use crate::stats::{summarize, Summary};

#[derive(Debug, Clone, Copy)]
pub struct ProxyConfig {
    /// Inter-arrival samples per mode.
    pub samples: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig { samples: 30 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyResult {
    /// Inter-arrival times in seconds.
    pub without: Vec<f64>,
    pub with_proxy: Vec<f64>,
    pub proxy_calls: u64,
}

impl ProxyResult {
    pub fn without_summary(&self) -> Summary {
        summarize(&self.without)
    }

    pub fn proxy_summary(&self) -> Summary {
        summarize(&self.with_proxy)
    }

    /// Relative growth of the mean inter-arrival under proxying.
    pub fn mean_increase(&self) -> f64 {
        self.proxy_summary().mean / self.without_summary().mean - 1.0
    }

    pub fn to_result(&self) -> ScenarioResult {
        let mut r = ScenarioResult::default();
        for (i, s) in self.without.iter().enumerate() {
            r.push("interarrival_s_without", i as f64, *s);
        }
        for (i, s) in self.with_proxy.iter().enumerate() {
            r.push("interarrival_s_proxy", i as f64, *s);
        }
        for (mode, s) in [("without", self.without_summary()), ("proxy", self.proxy_summary())] {
            r.push(&format!("{mode}_mean_s"), s.n as f64, s.mean);
            r.push(&format!("{mode}_min_s"), s.n as f64, s.min);
            r.push(&format!("{mode}_max_s"), s.n as f64, s.max);
            r.push(&format!("{mode}_std_s"), s.n as f64, s.std);
        }
        r.push("proxy_calls", self.with_proxy.len() as f64, self.proxy_calls as f64);
        r
    }
}

/// Runs the broadcast application on a real clock until `samples`
/// inter-arrival times are logged. With `proxy`, a second connection keeps
/// calling `$ctemp` on the device the whole time.
fn run_mode(samples: usize, proxy: bool) -> Result<(Vec<f64>, u64)> {
    let master = MasterNode::spawn(listen(0)?);
    let script = SensorScript { clock: ClockMode::Real, ..SensorScript::default() };
    let dev = Device::new(&script);
    dev.set_sink(master_sink("127.0.0.1", master.port())?);
    let m = parse(corpus::TEMP_BROADCAST)?;
    let ctemp = ProxyBridge::new(&m, None).import_index("$ctemp").context("no $ctemp import")?;
    let h = remote_vm(m, &dev, RemoteOptions::default())?;

    let stop = Arc::new(AtomicBool::new(false));
    let calls = Arc::new(AtomicU64::new(0));
    let hammer = proxy
        .then(|| -> Result<_> {
            let link = DeviceLink::connect("127.0.0.1", h.port())?;
            let (stop, calls) = (stop.clone(), calls.clone());
            Ok(std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    if link.proxy_call(ctemp, &[]).is_err() {
                        break;
                    }
                    calls.fetch_add(1, Ordering::SeqCst);
                }
            }))
        })
        .transpose()?;

    let wait = Duration::from_millis(1000 * samples as u64 + 10_000);
    let got = master.wait_for(samples + 1, wait);
    stop.store(true, Ordering::SeqCst);
    if let Some(t) = hammer {
        let _ = t.join();
    }
    drop(h);
    ensure!(got, "master received fewer than {} values", samples + 1);
    let log = master.log();
    let gaps = log.windows(2).take(samples).map(|w| (w[1].at_ms - w[0].at_ms) / 1000.0).collect();
    Ok((gaps, calls.load(Ordering::SeqCst)))
}

pub fn proxy_overhead(cfg: &ProxyConfig) -> Result<ProxyResult> {
    let (without, _) = run_mode(cfg.samples, false)?;
    let (with_proxy, proxy_calls) = run_mode(cfg.samples, true)?;
    Ok(ProxyResult { without, with_proxy, proxy_calls })
}
