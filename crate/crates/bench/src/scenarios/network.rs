//! Device-link traffic of a breakpoint followed by single steps, debugged
//! out of things versus on the device itself.

use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use oot_core::corpus;
use oot_core::device::{Device, SensorScript};
use oot_core::monitor::{BreakpointSpec, DumpMode, EventKind};
use oot_core::vm::StackLimits;
use oot_net::{DebugClient, ServerHandle, StatsSnapshot};

use crate::node::{local_vm, parse, remote_vm, RemoteOptions};
use crate::report::ScenarioResult;

#[derive(Debug, Clone, Copy)]
pub struct NetworkConfig {
    pub arg: i64,
    pub steps: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { arg: 2, steps: 5 }
    }
}

/// Cumulative device-link bytes after step 0 (the breakpoint) and after
/// each following step, both directions counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkResult {
    pub out_of_things: Vec<u64>,
    pub baseline: Vec<u64>,
}

impl NetworkResult {
    pub fn to_result(&self) -> ScenarioResult {
        let mut r = ScenarioResult::default();
        for (i, b) in self.out_of_things.iter().enumerate() {
            r.push("oot_cumulative_bytes", i as f64, *b as f64);
        }
        for (i, b) in self.baseline.iter().enumerate() {
            r.push("baseline_cumulative_bytes", i as f64, *b as f64);
        }
        r
    }
}

const EVENT_WAIT: Duration = Duration::from_secs(10);

fn remote(cfg: &NetworkConfig, payload: DumpMode) -> Result<ServerHandle> {
    let m = parse(&corpus::countdown_with_arg(cfg.arg))?;
    let dev = Device::new(&SensorScript::default());
    remote_vm(m, &dev, RemoteOptions { event_payload: payload, ..RemoteOptions::default() })
}

/// Stops the device, arms the breakpoint and resumes it. Returns the event
/// payload and the link counters from just before the resume, so traffic
/// from the resume on is counted.
fn reach_breakpoint(c: &DebugClient) -> Result<(Vec<u8>, StatsSnapshot)> {
    c.pause()?;
    c.add_breakpoint(BreakpointSpec::Line(corpus::COUNTDOWN_BASE_LINE))?;
    let start = c.stats();
    c.run()?;
    let ev = c.next_event(EVENT_WAIT).context("no breakpoint event")?;
    ensure!(ev.opcode == EventKind::BreakpointHit as u8, "unexpected event {:#04x}", ev.opcode);
    let (_, data) = ev.event_data().context("malformed event")?;
    Ok((data.to_vec(), start))
}

fn link_bytes(c: &DebugClient, start: &StatsSnapshot) -> u64 {
    c.stats().since(start).total_bytes()
}

/// The session is pulled once; the steps run on a local VM.
pub fn out_of_things(cfg: &NetworkConfig) -> Result<Vec<u64>> {
    let h = remote(cfg, DumpMode::Session)?;
    let c = DebugClient::connect("127.0.0.1", h.port())?;
    let (session, start) = reach_breakpoint(&c)?;
    let mut out = vec![link_bytes(&c, &start)];

    let m = parse(&corpus::countdown_with_arg(cfg.arg))?;
    let local = local_vm(m, None, &[], 0, StackLimits::default())?;
    let lc = DebugClient::connect("127.0.0.1", local.port())?;
    lc.receive_state(session)?;
    for _ in 0..cfg.steps {
        lc.step()?;
        out.push(link_bytes(&c, &start));
    }
    Ok(out)
}

/// Every step happens on the device and the new position is fetched with a
/// dump.
pub fn remote_baseline(cfg: &NetworkConfig) -> Result<Vec<u64>> {
    let h = remote(cfg, DumpMode::Remote)?;
    let c = DebugClient::connect("127.0.0.1", h.port())?;
    let (_, start) = reach_breakpoint(&c)?;
    let mut out = vec![link_bytes(&c, &start)];
    for _ in 0..cfg.steps {
        c.step()?;
        c.dump(DumpMode::Remote)?;
        out.push(link_bytes(&c, &start));
    }
    Ok(out)
}

pub fn network_overhead(cfg: &NetworkConfig) -> Result<NetworkResult> {
    let r = NetworkResult { out_of_things: out_of_things(cfg)?, baseline: remote_baseline(cfg)? };
    if r.out_of_things.len() != cfg.steps + 1 || r.baseline.len() != cfg.steps + 1 {
        bail!("missing steps");
    }
    Ok(r)
}
