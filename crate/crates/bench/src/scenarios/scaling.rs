//! Session size and reconstruction time against countdown depth.

use std::time::Instant;

use anyhow::{bail, Result};
use oot_core::corpus;
use oot_core::monitor::{BreakpointSpec, DumpMode, Interrupt, Monitor};
use oot_core::proxy::ProxyBridge;
use oot_core::session::SessionError;
use oot_core::vm::{PrimitiveTable, RunControl, RunExit, StackLimits};

use crate::node::parse;
use crate::report::ScenarioResult;

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub args: Vec<i64>,
    /// Limits of the local VM; deeper sessions are refused.
    pub local_limits: StackLimits,
    /// Timed batches per argument; the fastest is reported.
    pub reps: usize,
    /// Reconstructions per timed batch.
    pub batch: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig { args: (0..=14).map(|e| 1i64 << e).collect(), local_limits: StackLimits::default(), reps: 25, batch: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPoint {
    pub arg: i64,
    pub session_bytes: usize,
    pub dump_bytes: usize,
    /// `None` when the local VM refused the session.
    pub reconstruct_ms: Option<f64>,
}

impl ScalingPoint {
    pub fn capacity_exceeded(&self) -> bool {
        self.reconstruct_ms.is_none()
    }
}

/// The device side, paused on the base case of countdown(`arg`). Its limits
/// are raised to fit, as one would on the device.
pub fn paused_countdown(arg: i64) -> Result<Monitor> {
    let depth = arg.max(0) as usize + 16;
    let limits = StackLimits { max_call_depth: depth, max_value_stack: 2 * depth + 64 };
    let m = parse(&corpus::countdown_with_arg(arg))?;
    let mut mon = Monitor::new_remote(m, PrimitiveTable::new(), limits)?;
    let r = mon.handle(Interrupt::AddBreakpoint(BreakpointSpec::Line(corpus::COUNTDOWN_BASE_LINE)));
    if let Some(e) = r.error_message() {
        bail!("breakpoint: {e}");
    }
    match mon.run_slice(RunControl::default()) {
        RunExit::Breakpoint(_) => {}
        other => bail!("countdown({arg}) stopped with {other:?}"),
    }
    mon.take_events().for_each(drop);
    Ok(mon)
}

fn dump(mon: &mut Monitor, mode: DumpMode) -> Vec<u8> {
    mon.handle(Interrupt::Dump(mode)).payload
}

/// A paused device and a local VM ready to reconstruct its session.
struct Pair {
    arg: i64,
    remote: Monitor,
    local: Monitor,
    session_bytes: usize,
    dump_bytes: usize,
    best: Option<f64>,
}

impl Pair {
    fn new(arg: i64, cfg: &ScalingConfig) -> Result<Self> {
        let mut remote = paused_countdown(arg)?;
        let session_bytes = dump(&mut remote, DumpMode::Session).len();
        let dump_bytes = dump(&mut remote, DumpMode::Remote).len();
        let m = remote.vm.module().clone();
        let bridge = ProxyBridge::new(&m, None).shared();
        let local = Monitor::new_local(m, bridge, cfg.local_limits)?;
        Ok(Pair { arg, remote, local, session_bytes, dump_bytes, best: None })
    }

    /// Extract, transfer and apply once. Ok(false) when the local VM refuses.
    fn reconstruct(&mut self) -> Result<bool> {
        let stream = dump(&mut self.remote, DumpMode::Session);
        match self.local.receive_state(&stream) {
            Ok(()) => Ok(true),
            Err(SessionError::CapacityExceeded(_)) => Ok(false),
            Err(e) => bail!("countdown({}): {e}", self.arg),
        }
    }

    fn time_batch(&mut self, batch: usize) -> Result<()> {
        let t = Instant::now();
        for _ in 0..batch {
            self.reconstruct()?;
        }
        let ms = t.elapsed().as_secs_f64() * 1000.0 / batch as f64;
        self.best = Some(self.best.map_or(ms, |b| b.min(ms)));
        Ok(())
    }
}

pub fn measure(arg: i64, cfg: &ScalingConfig) -> Result<ScalingPoint> {
    let cfg = ScalingConfig { args: vec![arg], ..cfg.clone() };
    Ok(session_scaling(&cfg)?.remove(0))
}

/// Timed batches go round-robin over the arguments, so drift in machine
/// speed hits every size alike.
pub fn session_scaling(cfg: &ScalingConfig) -> Result<Vec<ScalingPoint>> {
    let mut pairs = Vec::with_capacity(cfg.args.len());
    let mut fits = Vec::with_capacity(cfg.args.len());
    for &arg in &cfg.args {
        let mut p = Pair::new(arg, cfg)?;
        fits.push(p.reconstruct()?);
        pairs.push(p);
    }
    for _ in 0..cfg.reps.max(1) {
        for (p, _) in pairs.iter_mut().zip(&fits).filter(|(_, f)| **f) {
            p.time_batch(cfg.batch.max(1))?;
        }
    }
    Ok(pairs
        .into_iter()
        .map(|p| ScalingPoint {
            arg: p.arg,
            session_bytes: p.session_bytes,
            dump_bytes: p.dump_bytes,
            reconstruct_ms: p.best,
        })
        .collect())
}

pub fn to_result(points: &[ScalingPoint]) -> ScenarioResult {
    let mut r = ScenarioResult::default();
    for p in points {
        r.push("session_bytes", p.arg as f64, p.session_bytes as f64);
        r.push("dump_bytes", p.arg as f64, p.dump_bytes as f64);
        match p.reconstruct_ms {
            Some(ms) => r.push("reconstruct_ms", p.session_bytes as f64, ms),
            None => r.push("capacity_exceeded", p.arg as f64, p.session_bytes as f64),
        }
    }
    r
}
