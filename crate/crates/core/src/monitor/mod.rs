//! The debug monitor embedded in every VM: interrupt dispatch, breakpoint
//! policies, state transfer, proxy servicing, module and state updates.

mod interrupt;

pub use interrupt::{
    BreakpointPolicy, BreakpointSpec, DumpMode, EventKind, Interrupt, Opcode, Response, ResponseStatus, StackTarget,
    VmReport,
};

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::module::{CodeOffset, Op, SourceModule};
use crate::proxy::{proxy_primitives, serve_proxy_call, AccessStrategy, ProxyBridge};
use crate::session::{
    apply_session, decode_session, encode_session_bytes, read_stream, snapshot, MemMgmtMsg, RemoteDump,
    SessionError, MEM_MSG_LEN,
};
use crate::value::Value;
use crate::vm::{InstantiateError, PrimitiveTable, RunControl, RunExit, StackLimits, Status, StepOutcome, VmState};
use crate::wat::{decode_module, resolve_breakpoint, validate_module, ModuleBlob};
use crate::wire::{ByteReader, DecodeError};

/// How imports are bound when a module is (re)instantiated.
#[derive(Clone)]
pub enum Bindings {
    /// Real device primitives.
    Fixed(PrimitiveTable),
    /// Every import goes through the proxy bridge.
    Proxy(Arc<Mutex<ProxyBridge>>),
}

impl Bindings {
    pub fn bind(&self, m: &SourceModule) -> PrimitiveTable {
        match self {
            Bindings::Fixed(t) => t.clone(),
            Bindings::Proxy(b) => proxy_primitives(b, m),
        }
    }
}

pub type RestartHook = Arc<dyn Fn() + Send + Sync>;

pub struct MonitorContext {
    pub policy: BreakpointPolicy,
    /// Serves ProxyCall interrupts.
    pub serves_proxy_calls: bool,
    /// Accepts MonitorProxies / ProxyUseCache / ProxyNoCache.
    pub configures_proxies: bool,
    pub bindings: Bindings,
    /// Traps are only reported while a debugger is attached.
    pub client_connected: bool,
    /// Reboot into `main` after a trap, as a device watchdog would.
    pub restart_on_trap: bool,
    pub on_restart: Option<RestartHook>,
    /// Payload of breakpoint and trap events.
    pub event_payload: DumpMode,
    /// Instruction budget for one step-over.
    pub step_over_budget: u64,
}

impl MonitorContext {
    pub fn remote(prims: PrimitiveTable) -> Self {
        MonitorContext {
            policy: BreakpointPolicy::Pause,
            serves_proxy_calls: true,
            configures_proxies: false,
            bindings: Bindings::Fixed(prims),
            client_connected: false,
            restart_on_trap: true,
            on_restart: None,
            event_payload: DumpMode::Session,
            step_over_budget: 50_000_000,
        }
    }

    pub fn local(bridge: Arc<Mutex<ProxyBridge>>) -> Self {
        MonitorContext {
            policy: BreakpointPolicy::Pause,
            serves_proxy_calls: false,
            configures_proxies: true,
            bindings: Bindings::Proxy(bridge),
            client_connected: false,
            restart_on_trap: false,
            on_restart: None,
            event_payload: DumpMode::Session,
            step_over_budget: 50_000_000,
        }
    }

    pub fn bridge(&self) -> Option<&Arc<Mutex<ProxyBridge>>> {
        match &self.bindings {
            Bindings::Proxy(b) => Some(b),
            Bindings::Fixed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UpdateError {
    #[error("module blob rejected: {0}")]
    Decode(#[from] DecodeError),
    #[error("updated module does not validate: {0}")]
    Invalid(String),
    #[error("updated module cannot start: {0}")]
    Instantiate(#[from] InstantiateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateEdit {
    StackSlot { index: u32, value: Value },
    Local { frame: u32, index: u32, value: Value },
    Global { index: u32, value: Value },
    TableEntry { index: u32, func: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EditError {
    #[error("kind mismatch")]
    KindMismatch,
    #[error("index out of range")]
    IndexOutOfRange,
    #[error("global is immutable")]
    ImmutableGlobal,
    #[error("state can only be edited while paused")]
    NotPaused,
}

/// Applies `e` if it keeps every slot at its declared kind.
pub fn apply_state_edit(vm: &mut VmState, e: StateEdit) -> Result<(), EditError> {
    if vm.status != Status::Paused {
        return Err(EditError::NotPaused);
    }
    match e {
        StateEdit::StackSlot { index, value } => {
            let slot = vm.value_stack.get_mut(index as usize).ok_or(EditError::IndexOutOfRange)?;
            if slot.kind() != value.kind() {
                return Err(EditError::KindMismatch);
            }
            *slot = value;
        }
        StateEdit::Local { frame, index, value } => {
            let f = vm.call_stack.get_mut(frame as usize).ok_or(EditError::IndexOutOfRange)?;
            let slot = f.locals.get_mut(index as usize).ok_or(EditError::IndexOutOfRange)?;
            if slot.kind() != value.kind() {
                return Err(EditError::KindMismatch);
            }
            *slot = value;
        }
        StateEdit::Global { index, value } => {
            let decl = vm.module.globals.get(index as usize).ok_or(EditError::IndexOutOfRange)?;
            if !decl.mutable {
                return Err(EditError::ImmutableGlobal);
            }
            if decl.kind != value.kind() {
                return Err(EditError::KindMismatch);
            }
            vm.globals[index as usize] = value;
        }
        StateEdit::TableEntry { index, func } => {
            let old = *vm.table.get(index as usize).ok_or(EditError::IndexOutOfRange)?;
            let new_sig = vm.module.sig(func).ok_or(EditError::IndexOutOfRange)?;
            if vm.module.sig(old) != Some(new_sig) {
                return Err(EditError::KindMismatch);
            }
            vm.table[index as usize] = func;
        }
    }
    Ok(())
}

/// Unsolicited notification produced while running.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub kind: EventKind,
    pub mode: DumpMode,
    pub data: Vec<u8>,
}

impl Event {
    pub fn response(&self) -> Response {
        Response::event(self.kind, self.mode, &self.data)
    }
}

pub struct Monitor {
    pub vm: VmState,
    pub ctx: MonitorContext,
    events: VecDeque<Event>,
    traps: u64,
}

fn state_bytes(vm: &VmState, mode: DumpMode) -> Vec<u8> {
    match mode {
        DumpMode::Session => encode_session_bytes(&snapshot(vm)),
        DumpMode::Remote => RemoteDump::of(vm).encode(),
    }
}

impl Monitor {
    pub fn new(vm: VmState, ctx: MonitorContext) -> Self {
        Monitor { vm, ctx, events: VecDeque::new(), traps: 0 }
    }

    pub fn new_remote(m: SourceModule, prims: PrimitiveTable, limits: StackLimits) -> Result<Self, InstantiateError> {
        let vm = VmState::instantiate(m, &prims, limits)?;
        Ok(Self::new(vm, MonitorContext::remote(prims)))
    }

    /// A local VM waits paused for a session.
    pub fn new_local(m: SourceModule, bridge: Arc<Mutex<ProxyBridge>>, limits: StackLimits) -> Result<Self, InstantiateError> {
        let prims = proxy_primitives(&bridge, &m);
        let mut vm = VmState::instantiate(m, &prims, limits)?;
        vm.pause();
        Ok(Self::new(vm, MonitorContext::local(bridge)))
    }

    pub fn take_events(&mut self) -> impl Iterator<Item = Event> + '_ {
        self.events.drain(..)
    }

    /// Traps raised by the application so far.
    pub fn trap_count(&self) -> u64 {
        self.traps
    }

    pub fn report(&self) -> VmReport {
        VmReport { status: self.vm.status(), pc: self.vm.pc() }
    }

    /// Runs the application if it is running and reacts to how it stopped.
    pub fn run_slice(&mut self, ctl: RunControl<'_>) -> RunExit {
        let exit = self.vm.run_with::<true>(ctl);
        match &exit {
            RunExit::Breakpoint(at) => self.on_breakpoint_hit(*at),
            RunExit::Trapped(_) => self.on_trap(),
            _ => {}
        }
        exit
    }

    /// Ships the state as an event and applies the breakpoint policy.
    pub fn on_breakpoint_hit(&mut self, at: CodeOffset) {
        let mode = self.ctx.event_payload;
        self.events.push_back(Event { kind: EventKind::BreakpointHit, mode, data: state_bytes(&self.vm, mode) });
        match self.ctx.policy {
            BreakpointPolicy::Pause => {}
            BreakpointPolicy::SingleStop => {
                self.vm.clear_breakpoints();
                self.vm.resume();
            }
            BreakpointPolicy::RemoveAndProceed => {
                self.vm.remove_breakpoint(at);
                self.vm.resume();
            }
        }
    }

    pub fn on_trap(&mut self) {
        self.traps += 1;
        if self.ctx.client_connected {
            let mode = self.ctx.event_payload;
            self.events.push_back(Event { kind: EventKind::Trapped, mode, data: state_bytes(&self.vm, mode) });
        }
        if self.ctx.restart_on_trap {
            if let Some(hook) = &self.ctx.on_restart {
                hook();
            }
            self.vm.restart();
        }
    }

    fn after_execution(&mut self) {
        if self.vm.status() == Status::Trapped {
            self.on_trap();
        } else if self.vm.status() == Status::Running {
            self.vm.pause();
        }
    }

    /// Executes one instruction and stays paused; ignores breakpoints.
    pub fn step(&mut self) -> StepOutcome {
        let out = self.vm.step();
        self.after_execution();
        out
    }

    /// Like step, but a call to a defined function runs until it returns.
    /// Breakpoints inside the callee still stop it.
    pub fn step_over(&mut self) -> StepOutcome {
        let is_call = matches!(
            self.vm.module().instr(self.vm.pc()).map(|i| i.op),
            Some(Op::Call(f)) if !self.vm.module().funcs[f as usize].is_import()
        );
        if !is_call {
            return self.step();
        }
        let depth = self.vm.call_stack().len();
        let first = self.vm.step();
        if first != StepOutcome::Executed {
            self.after_execution();
            return first;
        }
        self.vm.status = Status::Running;
        let exit = self.vm.run_with::<true>(RunControl {
            budget: Some(self.ctx.step_over_budget),
            return_depth: Some(depth),
            ..Default::default()
        });
        let out = match exit {
            RunExit::Breakpoint(at) => {
                self.on_breakpoint_hit(at);
                return StepOutcome::Executed;
            }
            RunExit::Trapped(t) => StepOutcome::Trapped(t),
            RunExit::Halted => StepOutcome::Halted,
            _ => StepOutcome::Executed,
        };
        self.after_execution();
        out
    }

    /// Pre-checks the announced lengths, then decodes and applies the session
    /// in one go.
    pub fn receive_state(&mut self, stream: &[u8]) -> Result<(), SessionError> {
        let mem = MemMgmtMsg::decode(&mut ByteReader::new(stream.get(..MEM_MSG_LEN).ok_or_else(|| {
            SessionError::Decode(DecodeError::new("truncated memory management message"))
        })?))?;
        mem.check_capacity(self.vm.limits())?;
        let (mem, chunks) = read_stream(stream)?;
        let d = decode_session(&mem, &chunks)?;
        apply_session(&mut self.vm, d)
    }

    /// Replaces the module and restarts from `main`. The old module keeps
    /// running on any error.
    pub fn update_module(&mut self, blob: &[u8]) -> Result<(), UpdateError> {
        let m = decode_module(&ModuleBlob { bytes: blob.to_vec() })?;
        let report = validate_module(&m);
        if !report.is_empty() {
            return Err(UpdateError::Invalid(report.to_string()));
        }
        let prims = self.ctx.bindings.bind(&m);
        let vm = VmState::instantiate(m, &prims, self.vm.limits())?;
        if let Some(b) = self.ctx.bridge() {
            b.lock().unwrap().retarget(vm.module());
        }
        self.vm = vm;
        Ok(())
    }

    pub fn handle_bytes(&mut self, bytes: &[u8]) -> Response {
        match Interrupt::decode(bytes) {
            Ok(msg) => self.handle(msg),
            Err((op, e)) => Response::error(op, format!("malformed interrupt: {e}")),
        }
    }

    pub fn handle(&mut self, msg: Interrupt) -> Response {
        let op = msg.opcode();
        match self.dispatch(msg) {
            Ok(payload) => Response::ok(op, payload),
            Err(e) => Response::error(op as u8, e),
        }
    }

    fn resolve(&self, b: BreakpointSpec) -> Result<CodeOffset, String> {
        match b {
            BreakpointSpec::At(at) => self.vm.module().instr(at).map(|_| at).ok_or_else(|| format!("no instruction at {at}")),
            BreakpointSpec::Line(l) => resolve_breakpoint(self.vm.module(), l).map_err(|e| e.to_string()),
        }
    }

    fn bridge_for_config(&self) -> Result<&Arc<Mutex<ProxyBridge>>, String> {
        if !self.ctx.configures_proxies {
            return Err("proxy configuration not supported by this VM".into());
        }
        self.ctx.bridge().ok_or_else(|| "no proxy bridge".into())
    }

    fn set_all(&self, list: &[u32], s: AccessStrategy) -> Result<Vec<u8>, String> {
        let changes: Vec<_> = list.iter().map(|f| (*f, s)).collect();
        let b = self.bridge_for_config()?;
        b.lock().unwrap().set_strategies(&changes).map_err(|e| e.to_string())?;
        Ok(vec![])
    }

    fn dispatch(&mut self, msg: Interrupt) -> Result<Vec<u8>, String> {
        match msg {
            Interrupt::Run => {
                match self.vm.status() {
                    Status::Paused => self.vm.resume(),
                    Status::Running => {}
                    other => return Err(format!("cannot run: VM is {other:?}")),
                }
                Ok(self.report().encode())
            }
            Interrupt::Pause => {
                self.vm.pause();
                Ok(self.report().encode())
            }
            Interrupt::Step | Interrupt::StepOver => {
                if !matches!(self.vm.status(), Status::Running | Status::Paused) {
                    return Err(format!("cannot step: VM is {:?}", self.vm.status()));
                }
                if msg == Interrupt::Step {
                    self.step();
                } else {
                    self.step_over();
                }
                Ok(self.report().encode())
            }
            Interrupt::AddBreakpoint(b) => {
                let at = self.resolve(b)?;
                self.vm.add_breakpoint(at);
                let mut w = crate::wire::ByteWriter::new();
                w.offset(at);
                Ok(w.into_inner())
            }
            Interrupt::RemoveBreakpoint(b) => {
                let at = self.resolve(b)?;
                if !self.vm.remove_breakpoint(at) {
                    return Err(format!("no breakpoint at {at}"));
                }
                Ok(vec![])
            }
            Interrupt::Dump(mode) => Ok(state_bytes(&self.vm, mode)),
            Interrupt::ReceiveState(stream) => {
                self.receive_state(&stream).map_err(|e| e.to_string())?;
                Ok(self.report().encode())
            }
            Interrupt::ProxyCall { fidx, args } => {
                if !self.ctx.serves_proxy_calls {
                    return Err("proxy calls not served by this VM".into());
                }
                let m = self.vm.module();
                let f = m.func(fidx).ok_or_else(|| format!("no function {fidx}"))?;
                if !f.is_import() {
                    return Err(format!("function {fidx} is not a primitive"));
                }
                let sig = m.sig(fidx).expect("validated");
                if args.len() != sig.params.len() || args.iter().zip(&sig.params).any(|(a, k)| a.kind() != *k) {
                    return Err(format!("arguments do not match function {fidx}"));
                }
                Ok(serve_proxy_call(&mut self.vm, fidx, &args).encode())
            }
            Interrupt::MonitorProxies(list) => {
                let b = self.bridge_for_config()?;
                b.lock().unwrap().set_strategies(&list).map_err(|e| e.to_string())?;
                Ok(vec![])
            }
            Interrupt::ProxyUseCache(list) => self.set_all(&list, AccessStrategy::Cache),
            Interrupt::ProxyNoCache(list) => self.set_all(&list, AccessStrategy::Remote),
            Interrupt::UpdateModule(blob) => {
                self.update_module(&blob).map_err(|e| e.to_string())?;
                Ok(self.report().encode())
            }
            Interrupt::UpdateStackValue { target, value } => {
                let e = match target {
                    StackTarget::Slot(index) => StateEdit::StackSlot { index, value },
                    StackTarget::Local { frame, index } => StateEdit::Local { frame, index, value },
                };
                apply_state_edit(&mut self.vm, e).map_err(|e| e.to_string())?;
                Ok(vec![])
            }
            Interrupt::UpdateGlobal { index, value } => {
                apply_state_edit(&mut self.vm, StateEdit::Global { index, value }).map_err(|e| e.to_string())?;
                Ok(vec![])
            }
            Interrupt::UpdateTableEntry { index, func } => {
                apply_state_edit(&mut self.vm, StateEdit::TableEntry { index, func }).map_err(|e| e.to_string())?;
                Ok(vec![])
            }
            Interrupt::SetPolicy(p) => {
                self.ctx.policy = p;
                Ok(vec![])
            }
        }
    }
}
