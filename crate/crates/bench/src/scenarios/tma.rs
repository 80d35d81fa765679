//! The temperature monitor walkthrough: find the division by zero that
//! only happens when every sensor is unreachable, reproduce it locally,
//! fix it locally and commit the fix to the device.

use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use oot_core::corpus;
use oot_core::device::{Device, SensorScript};
use oot_core::monitor::{BreakpointSpec, DumpMode, EventKind, Interrupt, Response};
use oot_core::proxy::{AccessStrategy, ProxyBridge};
use oot_core::session::{decode_session_bytes, DebugSession, RemoteDump};
use oot_core::vm::{StackLimits, Status};
use oot_core::wat::encode_module;
use oot_core::{CodeOffset, SourceModule, Value};
use oot_net::{DebugClient, ServerHandle};

use crate::config::DebuggerConfig;
use crate::node::{local_vm, parse, remote_vm, RemoteOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Both sensors offline: the bug shows.
    Bug,
    /// Both sensors online throughout: nothing to find.
    Control,
    /// As `Bug`, but the committed blob is damaged in transit.
    CorruptCommit,
}

#[derive(Debug, Clone, Copy)]
pub struct TmaConfig {
    pub variant: Variant,
    /// Device loop iterations that must pass trap-free after the commit.
    pub iterations: u64,
}

impl Default for TmaConfig {
    fn default() -> Self {
        TmaConfig { variant: Variant::Bug, iterations: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub checkpoints: Vec<Checkpoint>,
    /// The device refused the committed module.
    pub commit_failed: bool,
}

impl Transcript {
    pub fn passed(&self) -> bool {
        !self.checkpoints.is_empty() && self.checkpoints.iter().all(|c| c.pass)
    }

    fn check(&mut self, name: &'static str, pass: bool, detail: impl Into<String>) -> bool {
        self.checkpoints.push(Checkpoint { name, pass, detail: detail.into() });
        pass
    }

    pub fn lines(&self) -> Vec<String> {
        self.checkpoints
            .iter()
            .map(|c| format!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect()
    }
}

const WAIT: Duration = Duration::from_secs(10);

fn wait_until(mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + WAIT;
    loop {
        if cond() {
            return true;
        }
        if Instant::now() > deadline {
            return false;
        }
        std::thread::sleep(Duration::from_millis(1));
    }
}

/// Waits for an event of `kind`, skipping others.
fn next_event(c: &DebugClient, kind: EventKind) -> Result<DebugSession> {
    let deadline = Instant::now() + WAIT;
    while Instant::now() < deadline {
        if let Some(ev) = c.next_event(Duration::from_millis(50)) {
            if ev.opcode == kind as u8 {
                let (_, data) = ev.event_data().context("malformed event")?;
                return Ok(decode_session_bytes(data)?);
            }
        }
    }
    anyhow::bail!("no {kind:?} event")
}

fn line_of(m: &SourceModule, at: Option<CodeOffset>) -> Option<u32> {
    m.instr(at?).map(|i| i.src_line)
}

fn loop_iterations(dev: &Device) -> u64 {
    dev.counters.delays.load(Ordering::SeqCst)
}

/// Lets the device run `n` more loop iterations and reports whether it
/// trapped meanwhile.
fn runs_clean(h: &ServerHandle, dev: &Device, n: u64) -> (bool, String) {
    let (t0, i0) = (h.trap_count(), loop_iterations(dev));
    let reached = wait_until(|| loop_iterations(dev) >= i0 + n || h.trap_count() > t0);
    let (t1, i1) = (h.trap_count(), loop_iterations(dev));
    (reached && t1 == t0, format!("{} iterations, {} traps", i1 - i0, t1 - t0))
}

pub fn tma_walkthrough(cfg: &TmaConfig) -> Result<Transcript> {
    let mut t = Transcript::default();
    let conf = DebuggerConfig::from_json(corpus::DEBUGGER_CONFIG)?;
    let online = cfg.variant == Variant::Control;
    let m = parse(corpus::TEMP_MONITOR)?;
    let dev = Device::new(&SensorScript::tma(online, 21.5));
    let remote = remote_vm(m.clone(), &dev, RemoteOptions::default())?;

    if !online {
        // The device has been crashing and rebooting before anyone looks.
        wait_until(|| remote.trap_count() > 0);
    }
    let rc = DebugClient::connect("127.0.0.1", remote.port())?;
    let policy = conf.remote_policy()?;
    rc.set_policy(policy)?;
    t.check("configure", true, format!("policy {policy:?}, proxies {:?}", conf.proxy));

    rc.add_breakpoint(BreakpointSpec::Line(corpus::TMA_LOOP_LINE))?;
    let session = next_event(&rc, EventKind::BreakpointHit)?;
    let line = line_of(&m, Some(session.pc));
    t.check("session pulled at loop start", line == Some(corpus::TMA_LOOP_LINE), format!("pc on line {line:?}"));

    let running = wait_until(|| remote.status() == Status::Running);
    let dump = RemoteDump::decode(&rc.dump(DumpMode::Remote)?)?;
    t.check(
        "remote keeps running",
        running && dump.breakpoints.is_empty(),
        format!("status {:?}, {} breakpoints left", remote.status(), dump.breakpoints.len()),
    );

    let err_line = line_of(&m, session.error_counter);
    if online {
        t.check("no error recorded", session.error_counter.is_none(), format!("error counter {:?}", session.error_counter));
        let (clean, detail) = runs_clean(&remote, &dev, cfg.iterations);
        t.check("no trap", clean && remote.trap_count() == 0, detail);
        return Ok(t);
    }
    t.check("error counter on the division", err_line == Some(corpus::TMA_DIV_LINE), format!("line {err_line:?}"));

    // Reproduce locally, with connectivity mocked as lost.
    let local = local_vm(m.clone(), Some(("127.0.0.1", remote.port())), &conf.proxy, 0, StackLimits::default())?;
    let lc = DebugClient::connect("127.0.0.1", local.port())?;
    lc.receive_state(encode(&session))?;
    let is_connected = ProxyBridge::new(&m, None).import_index("$isConnected").context("no $isConnected")?;
    lc.call(&Interrupt::MonitorProxies(vec![(is_connected, AccessStrategy::Mock(Some(Value::I32(0))))]))?;
    lc.add_breakpoint(BreakpointSpec::Line(corpus::TMA_DIV_LINE))?;
    lc.run()?;
    let at_div = next_event(&lc, EventKind::BreakpointHit)?;
    let denom = at_div.value_stack.last().copied();
    t.check(
        "denominator reproduced",
        line_of(&m, Some(at_div.pc)) == Some(corpus::TMA_DIV_LINE) && denom == Some(Value::f32(0.0)),
        format!("top of stack {denom:?}"),
    );

    // Fix locally first.
    let fixed = encode_module(&parse(corpus::TEMP_MONITOR_FIXED)?).bytes;
    lc.update_module(fixed.clone())?;
    let before = local.instructions_executed();
    let progressed = wait_until(|| local.instructions_executed() > before + 10_000);
    t.check(
        "fix holds locally",
        progressed && local.trap_count() == 0 && local.status() == Status::Running,
        format!("{} instructions, {} traps", local.instructions_executed() - before, local.trap_count()),
    );

    let old_hash = remote.exec(|m| m.vm.module_hash()).context("remote gone")?;
    if cfg.variant == Variant::CorruptCommit {
        let mut blob = fixed;
        blob.truncate(blob.len() - 7);
        let r = rc.request(&Interrupt::UpdateModule(blob))?;
        t.commit_failed = !r.is_ok();
        t.check("corrupt commit rejected", t.commit_failed, reason(&r));
        let new_hash = remote.exec(|m| m.vm.module_hash()).context("remote gone")?;
        let t0 = remote.trap_count();
        let still = wait_until(|| remote.trap_count() > t0);
        t.check("remote unaffected", new_hash == old_hash && still, "old module still running".to_string());
        return Ok(t);
    }

    let r = rc.request(&Interrupt::UpdateModule(fixed))?;
    t.commit_failed = !r.is_ok();
    t.check("fix committed", r.is_ok(), reason(&r));
    let (clean, detail) = runs_clean(&remote, &dev, cfg.iterations);
    t.check("remote trap-free", clean, detail);
    Ok(t)
}

fn reason(r: &Response) -> String {
    r.error_message().unwrap_or_else(|| "accepted".into())
}

fn encode(d: &DebugSession) -> Vec<u8> {
    oot_core::session::encode_session_bytes(d)
}
