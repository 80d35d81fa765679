//! The interpreter: a flat dispatch loop over lowered function bodies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::module::{CodeOffset, Op, SourceModule, TypeSig, PAGE_SIZE};
use crate::value::{Value, ValueKind};
use crate::wat::{encode_module, validate_module, ValidationReport};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostFailure(pub String);

impl HostFailure {
    pub fn new(msg: impl Into<String>) -> Self {
        HostFailure(msg.into())
    }
}

pub type HostFn = Arc<dyn Fn(&[Value]) -> Result<Option<Value>, HostFailure> + Send + Sync>;

#[derive(Clone)]
pub struct Primitive {
    pub sig: TypeSig,
    pub func: HostFn,
}

/// Host functions keyed by import symbol.
#[derive(Clone, Default)]
pub struct PrimitiveTable {
    entries: BTreeMap<(String, String), Primitive>,
}

impl PrimitiveTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<F>(&mut self, ns: &str, name: &str, sig: TypeSig, func: F)
    where
        F: Fn(&[Value]) -> Result<Option<Value>, HostFailure> + Send + Sync + 'static,
    {
        self.entries.insert((ns.to_string(), name.to_string()), Primitive { sig, func: Arc::new(func) });
    }

    pub fn insert_primitive(&mut self, ns: &str, name: &str, p: Primitive) {
        self.entries.insert((ns.to_string(), name.to_string()), p);
    }

    pub fn get(&self, ns: &str, name: &str) -> Option<&Primitive> {
        self.entries.get(&(ns.to_string(), name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn symbols(&self) -> impl Iterator<Item = &(String, String)> {
        self.entries.keys()
    }
}

impl fmt::Debug for PrimitiveTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.entries.keys()).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackLimits {
    pub max_call_depth: usize,
    pub max_value_stack: usize,
}

impl Default for StackLimits {
    fn default() -> Self {
        Self { max_call_depth: 2048, max_value_stack: 8192 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrapKind {
    DivisionByZero,
    OutOfBoundsMemory,
    StackExhausted,
    UndefinedTableEntry,
    HostError,
    /// The state is not one the module could have produced, e.g. a session
    /// with wrongly typed stack slots.
    InvalidState,
}

impl TrapKind {
    pub const fn code(self) -> u8 {
        match self {
            TrapKind::DivisionByZero => 0,
            TrapKind::OutOfBoundsMemory => 1,
            TrapKind::StackExhausted => 2,
            TrapKind::UndefinedTableEntry => 3,
            TrapKind::HostError => 4,
            TrapKind::InvalidState => 5,
        }
    }

    pub const fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => TrapKind::DivisionByZero,
            1 => TrapKind::OutOfBoundsMemory,
            2 => TrapKind::StackExhausted,
            3 => TrapKind::UndefinedTableEntry,
            4 => TrapKind::HostError,
            5 => TrapKind::InvalidState,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} at {at}: {message}")]
pub struct Trap {
    pub kind: TrapKind,
    pub at: CodeOffset,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub func_index: u32,
    /// `None` for the entry frame.
    pub return_pc: Option<CodeOffset>,
    pub value_stack_base: u32,
    pub locals: Vec<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Running,
    /// Stopped at a breakpoint or by request; the instruction at `pc` has not
    /// executed yet.
    Paused,
    Trapped,
    Halted,
}

impl Status {
    pub const fn code(self) -> u8 {
        match self {
            Status::Running => 0,
            Status::Paused => 1,
            Status::Trapped => 2,
            Status::Halted => 3,
        }
    }

    pub const fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Status::Running,
            1 => Status::Paused,
            2 => Status::Trapped,
            3 => Status::Halted,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstantiateError {
    #[error("module does not validate: {0}")]
    Invalid(ValidationReport),
    #[error("unbound import {0}.{1}")]
    UnboundImport(String, String),
    #[error("import {0}.{1} bound with a different signature")]
    ImportSignature(String, String),
    #[error("no \"main\" export")]
    NoMainExport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Executed,
    Halted,
    Trapped(Trap),
    /// Nothing executed because the VM is trapped or halted.
    NotRunnable(Status),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunExit {
    /// Paused before the breakpointed instruction.
    Breakpoint(CodeOffset),
    Trapped(Trap),
    Halted,
    BudgetExhausted,
    /// The interrupt flag was raised; nothing was executed for it.
    Interrupted,
    /// The call stack unwound to the requested depth.
    Returned,
    NotRunnable(Status),
}

/// Optional stop conditions for [`VmState::run_with`].
#[derive(Default, Clone, Copy)]
pub struct RunControl<'a> {
    pub budget: Option<u64>,
    pub interrupt: Option<&'a AtomicBool>,
    /// Stop once the call stack is no deeper than this.
    pub return_depth: Option<usize>,
}

/// One executed instruction as seen from outside: where, and what the stack
/// looked like before it ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TracePoint {
    pub pc: CodeOffset,
    pub stack_height: usize,
    pub top: Option<Value>,
    pub depth: usize,
}

#[derive(Debug)]
struct FuncInfo {
    params: usize,
    has_result: bool,
    locals: Vec<ValueKind>,
}

#[derive(Clone)]
pub struct VmState {
    pub(crate) module: Arc<SourceModule>,
    pub(crate) module_hash: [u8; 32],
    info: Arc<Vec<FuncInfo>>,
    hosts: Arc<Vec<Option<HostFn>>>,
    pub(crate) pc: CodeOffset,
    pub(crate) value_stack: Vec<Value>,
    pub(crate) call_stack: Vec<Frame>,
    pub(crate) globals: Vec<Value>,
    pub(crate) memory: Vec<u8>,
    pub(crate) table: Vec<u32>,
    pub(crate) breakpoints: BTreeSet<CodeOffset>,
    pub(crate) error_counter: Option<CodeOffset>,
    pub(crate) status: Status,
    pub(crate) last_trap: Option<Trap>,
    pub(crate) limits: StackLimits,
    /// Set on resume so the breakpoint at the resume pc does not fire again.
    skip_breakpoint: bool,
    executed: u64,
}

impl fmt::Debug for VmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VmState")
            .field("pc", &self.pc)
            .field("status", &self.status)
            .field("value_stack", &self.value_stack)
            .field("call_depth", &self.call_stack.len())
            .field("globals", &self.globals)
            .field("breakpoints", &self.breakpoints)
            .field("error_counter", &self.error_counter)
            .finish_non_exhaustive()
    }
}

enum Flow {
    Next,
    Halted,
}

impl VmState {
    pub fn instantiate(m: SourceModule, prims: &PrimitiveTable, limits: StackLimits) -> Result<Self, InstantiateError> {
        Self::instantiate_arc(Arc::new(m), prims, limits)
    }

    pub fn instantiate_arc(
        m: Arc<SourceModule>,
        prims: &PrimitiveTable,
        limits: StackLimits,
    ) -> Result<Self, InstantiateError> {
        let report = validate_module(&m);
        if !report.is_empty() {
            return Err(InstantiateError::Invalid(report));
        }
        let mut hosts = Vec::with_capacity(m.funcs.len());
        let mut info = Vec::with_capacity(m.funcs.len());
        for (i, f) in m.funcs.iter().enumerate() {
            let sig = m.sig(i as u32).expect("validated");
            info.push(FuncInfo { params: sig.params.len(), has_result: !sig.results.is_empty(), locals: f.locals.clone() });
            match &f.import {
                Some((ns, name)) => {
                    let p = prims
                        .get(ns, name)
                        .ok_or_else(|| InstantiateError::UnboundImport(ns.clone(), name.clone()))?;
                    if &p.sig != sig {
                        return Err(InstantiateError::ImportSignature(ns.clone(), name.clone()));
                    }
                    hosts.push(Some(p.func.clone()));
                }
                None => hosts.push(None),
            }
        }
        if m.main_index().is_none() {
            return Err(InstantiateError::NoMainExport);
        }
        let module_hash = encode_module(&m).hash();
        let mut vm = VmState {
            module: m,
            module_hash,
            info: Arc::new(info),
            hosts: Arc::new(hosts),
            pc: CodeOffset::new(0, 0),
            value_stack: Vec::new(),
            call_stack: Vec::new(),
            globals: Vec::new(),
            memory: Vec::new(),
            table: Vec::new(),
            breakpoints: BTreeSet::new(),
            error_counter: None,
            status: Status::Running,
            last_trap: None,
            limits,
            skip_breakpoint: false,
            executed: 0,
        };
        vm.restart();
        Ok(vm)
    }

    /// Resets the application to a fresh start of `main`. Breakpoints, the
    /// error counter and the last trap survive, as they do across a device
    /// reboot.
    pub fn restart(&mut self) {
        let m = &self.module;
        let main = m.main_index().expect("checked at instantiation");
        self.globals = m.globals.iter().map(|g| g.init).collect();
        self.memory = vec![0; m.memory_pages as usize * PAGE_SIZE];
        self.table = m.table.clone();
        self.value_stack.clear();
        self.call_stack.clear();
        let info = &self.info[main as usize];
        let mut locals: Vec<Value> = m.sig(main).expect("validated").params.iter().map(|k| k.zero()).collect();
        locals.extend(info.locals.iter().map(|k| k.zero()));
        self.call_stack.push(Frame { func_index: main, return_pc: None, value_stack_base: 0, locals });
        self.pc = CodeOffset::new(main, 0);
        self.status = Status::Running;
        self.skip_breakpoint = false;
    }

    pub fn module(&self) -> &SourceModule {
        &self.module
    }

    pub fn module_arc(&self) -> &Arc<SourceModule> {
        &self.module
    }

    pub fn module_hash(&self) -> [u8; 32] {
        self.module_hash
    }

    pub fn pc(&self) -> CodeOffset {
        self.pc
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn value_stack(&self) -> &[Value] {
        &self.value_stack
    }

    pub fn call_stack(&self) -> &[Frame] {
        &self.call_stack
    }

    pub fn globals(&self) -> &[Value] {
        &self.globals
    }

    pub fn memory(&self) -> &[u8] {
        &self.memory
    }

    pub fn table(&self) -> &[u32] {
        &self.table
    }

    pub fn breakpoints(&self) -> &BTreeSet<CodeOffset> {
        &self.breakpoints
    }

    pub fn error_counter(&self) -> Option<CodeOffset> {
        self.error_counter
    }

    pub fn last_trap(&self) -> Option<&Trap> {
        self.last_trap.as_ref()
    }

    pub fn limits(&self) -> StackLimits {
        self.limits
    }

    pub fn set_limits(&mut self, limits: StackLimits) {
        self.limits = limits;
    }

    /// Instructions executed since instantiation, isolated calls included.
    pub fn instructions_executed(&self) -> u64 {
        self.executed
    }

    pub fn add_breakpoint(&mut self, at: CodeOffset) -> bool {
        if self.module.instr(at).is_none() {
            return false;
        }
        self.breakpoints.insert(at);
        true
    }

    pub fn remove_breakpoint(&mut self, at: CodeOffset) -> bool {
        self.breakpoints.remove(&at)
    }

    pub fn clear_breakpoints(&mut self) {
        self.breakpoints.clear();
    }

    pub fn pause(&mut self) {
        if self.status == Status::Running {
            self.status = Status::Paused;
        }
    }

    /// Paused → Running. The breakpoint at the current pc, if any, is skipped
    /// once.
    pub fn resume(&mut self) {
        if self.status == Status::Paused {
            self.status = Status::Running;
            self.skip_breakpoint = true;
        }
    }

    /// Current position and stack shape.
    pub fn trace_point(&self) -> TracePoint {
        TracePoint {
            pc: self.pc,
            stack_height: self.value_stack.len(),
            top: self.value_stack.last().copied(),
            depth: self.call_stack.len(),
        }
    }

    /// Executes exactly one instruction. Works while Running or Paused and
    /// leaves that status in place unless the instruction halts or traps.
    pub fn step(&mut self) -> StepOutcome {
        match self.status {
            Status::Running | Status::Paused => {}
            other => return StepOutcome::NotRunnable(other),
        }
        self.skip_breakpoint = false;
        match self.exec() {
            Ok(Flow::Next) => StepOutcome::Executed,
            Ok(Flow::Halted) => {
                self.status = Status::Halted;
                StepOutcome::Halted
            }
            Err(trap) => {
                self.record_trap(&trap);
                StepOutcome::Trapped(trap)
            }
        }
    }

    fn record_trap(&mut self, trap: &Trap) {
        self.status = Status::Trapped;
        self.error_counter = Some(trap.at);
        self.last_trap = Some(trap.clone());
    }

    /// Runs with debug hooks until a breakpoint, trap, halt or the budget.
    pub fn run(&mut self, budget: Option<u64>) -> RunExit {
        self.run_with::<true>(RunControl { budget, ..Default::default() })
    }

    /// The run loop. With `HOOKS == false` breakpoints, the interrupt flag
    /// and the return depth are ignored and compiled out.
    pub fn run_with<const HOOKS: bool>(&mut self, ctl: RunControl<'_>) -> RunExit {
        if self.status != Status::Running {
            return RunExit::NotRunnable(self.status);
        }
        let mut left = ctl.budget.unwrap_or(u64::MAX);
        loop {
            if left == 0 {
                return RunExit::BudgetExhausted;
            }
            if HOOKS {
                if let Some(flag) = ctl.interrupt {
                    if flag.load(Ordering::Acquire) {
                        return RunExit::Interrupted;
                    }
                }
                let skip = std::mem::take(&mut self.skip_breakpoint);
                if !skip && !self.breakpoints.is_empty() && self.breakpoints.contains(&self.pc) {
                    self.status = Status::Paused;
                    return RunExit::Breakpoint(self.pc);
                }
            }
            left -= 1;
            match self.exec() {
                Ok(Flow::Next) => {}
                Ok(Flow::Halted) => {
                    self.status = Status::Halted;
                    return RunExit::Halted;
                }
                Err(trap) => {
                    self.record_trap(&trap);
                    return RunExit::Trapped(trap);
                }
            }
            if HOOKS {
                if let Some(d) = ctl.return_depth {
                    if self.call_stack.len() <= d {
                        return RunExit::Returned;
                    }
                }
            }
        }
    }

    /// Calls `fidx` to completion on this state and puts pc, stacks, status
    /// and trap bookkeeping back afterwards, whatever the outcome. Globals and
    /// memory written by the callee stay written. Breakpoints do not fire.
    pub fn invoke_isolated(&mut self, fidx: u32, args: &[Value]) -> Result<Option<Value>, Trap> {
        let at = self.pc;
        let Some(info) = self.info.get(fidx as usize) else {
            return Err(Trap { kind: TrapKind::HostError, at, message: format!("no function {fidx}") });
        };
        let sig = self.module.sig(fidx).expect("validated");
        if args.len() != info.params || args.iter().zip(&sig.params).any(|(a, k)| a.kind() != *k) {
            return Err(Trap { kind: TrapKind::HostError, at, message: "argument kinds do not match".into() });
        }
        if let Some(host) = &self.hosts[fidx as usize] {
            let host = host.clone();
            self.executed += 1;
            return host(args).map_err(|e| Trap { kind: TrapKind::HostError, at, message: e.0 });
        }

        let saved_pc = self.pc;
        let saved_height = self.value_stack.len();
        let saved_depth = self.call_stack.len();
        let saved_status = self.status;
        let saved_counter = self.error_counter;
        let saved_trap = self.last_trap.clone();
        let saved_skip = self.skip_breakpoint;

        let result = (|| {
            if saved_depth >= self.limits.max_call_depth {
                return Err(Trap { kind: TrapKind::StackExhausted, at, message: "call stack exhausted".into() });
            }
            let mut locals = args.to_vec();
            locals.extend(self.info[fidx as usize].locals.iter().map(|k| k.zero()));
            self.call_stack.push(Frame {
                func_index: fidx,
                return_pc: None,
                value_stack_base: saved_height as u32,
                locals,
            });
            self.pc = CodeOffset::new(fidx, 0);
            loop {
                match self.exec() {
                    Ok(_) if self.call_stack.len() == saved_depth => {
                        let has_result = self.info[fidx as usize].has_result;
                        return Ok(if has_result { self.value_stack.last().copied() } else { None });
                    }
                    Ok(_) => {}
                    Err(trap) => return Err(trap),
                }
            }
        })();

        self.pc = saved_pc;
        self.value_stack.truncate(saved_height);
        self.call_stack.truncate(saved_depth);
        self.status = saved_status;
        self.error_counter = saved_counter;
        self.last_trap = saved_trap;
        self.skip_breakpoint = saved_skip;
        result
    }

    fn trap(&self, kind: TrapKind, message: impl Into<String>) -> Trap {
        Trap { kind, at: self.pc, message: message.into() }
    }

    fn invalid(&self, what: &str) -> Trap {
        self.trap(TrapKind::InvalidState, what)
    }

    #[inline]
    fn pop(&mut self) -> Result<Value, Trap> {
        let base = self.call_stack.last().map_or(0, |f| f.value_stack_base as usize);
        if self.value_stack.len() <= base {
            return Err(self.invalid("value stack underflow"));
        }
        Ok(self.value_stack.pop().expect("checked"))
    }

    #[inline]
    fn pop_i32(&mut self) -> Result<i32, Trap> {
        match self.pop()? {
            Value::I32(v) => Ok(v),
            other => {
                self.value_stack.push(other);
                Err(self.invalid("expected i32 operand"))
            }
        }
    }

    #[inline]
    fn pop_i64(&mut self) -> Result<i64, Trap> {
        match self.pop()? {
            Value::I64(v) => Ok(v),
            other => {
                self.value_stack.push(other);
                Err(self.invalid("expected i64 operand"))
            }
        }
    }

    #[inline]
    fn pop_f32(&mut self) -> Result<f32, Trap> {
        match self.pop()? {
            Value::F32(b) => Ok(f32::from_bits(b)),
            other => {
                self.value_stack.push(other);
                Err(self.invalid("expected f32 operand"))
            }
        }
    }

    /// Pops two operands of one kind, leaving the stack untouched on failure.
    #[inline]
    fn pop2<T>(&mut self, pop: fn(&mut Self) -> Result<T, Trap>, restore: fn(T) -> Value) -> Result<(T, T), Trap> {
        let b = pop(self)?;
        match pop(self) {
            Ok(a) => Ok((a, b)),
            Err(e) => {
                self.value_stack.push(restore(b));
                Err(e)
            }
        }
    }

    #[inline]
    fn push(&mut self, v: Value) -> Result<(), Trap> {
        if self.value_stack.len() >= self.limits.max_value_stack {
            return Err(self.trap(TrapKind::StackExhausted, "value stack exhausted"));
        }
        self.value_stack.push(v);
        Ok(())
    }

    fn frame(&self) -> Result<&Frame, Trap> {
        self.call_stack.last().ok_or_else(|| self.invalid("no active frame"))
    }

    fn check_push(&self) -> Result<(), Trap> {
        if self.value_stack.len() >= self.limits.max_value_stack {
            return Err(self.trap(TrapKind::StackExhausted, "value stack exhausted"));
        }
        Ok(())
    }

    fn effective_address(&self, addr: i32, offset: u32) -> Result<usize, Trap> {
        let ea = addr as u32 as u64 + offset as u64;
        if ea + 4 > self.memory.len() as u64 {
            return Err(self.trap(TrapKind::OutOfBoundsMemory, format!("access at {ea} outside {} bytes", self.memory.len())));
        }
        Ok(ea as usize)
    }

    fn do_return(&mut self) -> Result<Flow, Trap> {
        let frame = self.frame()?;
        let (fidx, base) = (frame.func_index, frame.value_stack_base as usize);
        let result = if self.info[fidx as usize].has_result { Some(self.pop()?) } else { None };
        self.value_stack.truncate(base);
        if let Some(r) = result {
            self.value_stack.push(r);
        }
        let frame = self.call_stack.pop().expect("checked");
        match frame.return_pc {
            Some(p) => {
                self.pc = p;
                Ok(Flow::Next)
            }
            None => Ok(Flow::Halted),
        }
    }

    fn call(&mut self, f: u32) -> Result<Flow, Trap> {
        let Some(info) = self.info.get(f as usize) else {
            return Err(self.invalid("call target out of range"));
        };
        let np = info.params;
        let base = self.frame()?.value_stack_base as usize;
        if self.value_stack.len() < base + np {
            return Err(self.invalid("value stack underflow"));
        }
        if let Some(host) = &self.hosts[f as usize] {
            if np == 0 && info.has_result {
                self.check_push()?;
            }
            let split = self.value_stack.len() - np;
            let out = host(&self.value_stack[split..]);
            return match out {
                Ok(r) => {
                    self.value_stack.truncate(split);
                    if let Some(v) = r {
                        self.value_stack.push(v);
                    }
                    self.pc.offset += 1;
                    Ok(Flow::Next)
                }
                Err(e) => Err(self.trap(TrapKind::HostError, e.0)),
            };
        }
        if self.call_stack.len() >= self.limits.max_call_depth {
            return Err(self.trap(TrapKind::StackExhausted, "call stack exhausted"));
        }
        let split = self.value_stack.len() - np;
        let mut locals = Vec::with_capacity(np + info.locals.len());
        locals.extend(self.value_stack.drain(split..));
        locals.extend(info.locals.iter().map(|k| k.zero()));
        self.call_stack.push(Frame {
            func_index: f,
            return_pc: Some(CodeOffset::new(self.pc.func, self.pc.offset + 1)),
            value_stack_base: split as u32,
            locals,
        });
        self.pc = CodeOffset::new(f, 0);
        Ok(Flow::Next)
    }

    #[inline]
    fn exec(&mut self) -> Result<Flow, Trap> {
        self.executed += 1;
        let pc = self.pc;
        let (op, last) = {
            let Some(f) = self.module.funcs.get(pc.func as usize) else {
                return Err(self.invalid("pc outside the module"));
            };
            let Some(ins) = f.body.get(pc.offset as usize) else {
                return Err(self.invalid("pc outside the function body"));
            };
            (ins.op, f.body.len() - 1 == pc.offset as usize)
        };
        match op {
            Op::Nop | Op::Block { .. } | Op::Loop { .. } => {}
            Op::Drop => {
                self.pop()?;
            }
            Op::Return => return self.do_return(),
            Op::End => {
                if last {
                    return self.do_return();
                }
            }
            Op::Else { end } => {
                self.pc.offset = end + 1;
                return Ok(Flow::Next);
            }
            Op::If { else_pc, .. } => {
                if self.pop_i32()? == 0 {
                    self.pc.offset = else_pc;
                    return Ok(Flow::Next);
                }
            }
            Op::Br { target, arity, height, .. } => {
                let base = self.frame()?.value_stack_base as usize + height as usize;
                let len = self.value_stack.len();
                let keep = arity as usize;
                if len < base + keep {
                    return Err(self.invalid("value stack underflow"));
                }
                self.value_stack.drain(base..len - keep);
                self.pc.offset = target;
                return Ok(Flow::Next);
            }
            Op::Call(f) => return self.call(f),
            Op::I32Const(v) => self.push(Value::I32(v))?,
            Op::I64Const(v) => self.push(Value::I64(v))?,
            Op::F32Const(b) => self.push(Value::F32(b))?,
            Op::I32Add => {
                let (a, b) = self.pop2(Self::pop_i32, Value::I32)?;
                self.value_stack.push(Value::I32(a.wrapping_add(b)));
            }
            Op::I32Sub => {
                let (a, b) = self.pop2(Self::pop_i32, Value::I32)?;
                self.value_stack.push(Value::I32(a.wrapping_sub(b)));
            }
            Op::I32Eq => {
                let (a, b) = self.pop2(Self::pop_i32, Value::I32)?;
                self.value_stack.push(Value::I32((a == b) as i32));
            }
            Op::I64GtS => {
                let (a, b) = self.pop2(Self::pop_i64, Value::I64)?;
                self.value_stack.push(Value::I32((a > b) as i32));
            }
            Op::I64Sub => {
                let (a, b) = self.pop2(Self::pop_i64, Value::I64)?;
                self.value_stack.push(Value::I64(a.wrapping_sub(b)));
            }
            Op::F32Add => {
                let (a, b) = self.pop2(Self::pop_f32, Value::f32)?;
                self.value_stack.push(Value::f32(a + b));
            }
            Op::F32Div => {
                let (a, b) = self.pop2(Self::pop_f32, Value::f32)?;
                if b == 0.0 {
                    self.value_stack.push(Value::f32(a));
                    self.value_stack.push(Value::f32(b));
                    return Err(self.trap(TrapKind::DivisionByZero, "f32.div by zero"));
                }
                self.value_stack.push(Value::f32(a / b));
            }
            Op::F32Eq => {
                let (a, b) = self.pop2(Self::pop_f32, Value::f32)?;
                self.value_stack.push(Value::I32((a == b) as i32));
            }
            Op::LocalGet(i) => {
                let v = self.frame()?.locals.get(i as usize).copied().ok_or_else(|| self.invalid("local out of range"))?;
                self.push(v)?;
            }
            Op::LocalSet(i) => {
                let v = self.pop()?;
                let frame = self.call_stack.last_mut().expect("pop checked the frame");
                match frame.locals.get_mut(i as usize) {
                    Some(slot) if slot.kind() == v.kind() => *slot = v,
                    _ => {
                        self.value_stack.push(v);
                        return Err(self.invalid("bad local write"));
                    }
                }
            }
            Op::GlobalGet(i) => {
                let v = self.globals.get(i as usize).copied().ok_or_else(|| self.invalid("global out of range"))?;
                self.push(v)?;
            }
            Op::GlobalSet(i) => {
                let v = self.pop()?;
                match self.globals.get_mut(i as usize) {
                    Some(slot) if slot.kind() == v.kind() => *slot = v,
                    _ => {
                        self.value_stack.push(v);
                        return Err(self.invalid("bad global write"));
                    }
                }
            }
            Op::I32Load(offset) => {
                let addr = self.pop_i32()?;
                match self.effective_address(addr, offset) {
                    Ok(ea) => {
                        let v = i32::from_le_bytes(self.memory[ea..ea + 4].try_into().unwrap());
                        self.value_stack.push(Value::I32(v));
                    }
                    Err(t) => {
                        self.value_stack.push(Value::I32(addr));
                        return Err(t);
                    }
                }
            }
            Op::I32Store(offset) => {
                let (addr, v) = self.pop2(Self::pop_i32, Value::I32)?;
                match self.effective_address(addr, offset) {
                    Ok(ea) => self.memory[ea..ea + 4].copy_from_slice(&v.to_le_bytes()),
                    Err(t) => {
                        self.value_stack.push(Value::I32(addr));
                        self.value_stack.push(Value::I32(v));
                        return Err(t);
                    }
                }
            }
        }
        self.pc.offset += 1;
        Ok(Flow::Next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::wat::{parse_module, resolve_breakpoint};

    fn vm(src: &str) -> VmState {
        VmState::instantiate(parse_module(src).unwrap(), &PrimitiveTable::new(), StackLimits::default()).unwrap()
    }

    /// Runs the body as `main` up to its final `end` and returns the value
    /// stack.
    fn eval(body: &str) -> Result<Vec<Value>, Trap> {
        eval_as("(result i32)", body)
    }

    fn eval_as(result: &str, body: &str) -> Result<Vec<Value>, Trap> {
        let src = format!("(module (memory 1) (export \"main\" (func $main)) (func $main {result} {body}))");
        let mut v = vm(&src);
        loop {
            match v.step() {
                StepOutcome::Executed => {
                    if v.pc.offset as usize == v.module.funcs[0].body.len() - 1 {
                        return Ok(v.value_stack.clone());
                    }
                }
                StepOutcome::Trapped(t) => return Err(t),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn countdown_instantiates_at_main() {
        let v = vm(corpus::COUNTDOWN);
        let main = v.module.main_index().unwrap();
        assert_eq!(v.pc, CodeOffset::new(main, 0));
        assert!(v.value_stack.is_empty());
        assert_eq!(v.call_stack.len(), 1);
        assert_eq!(v.status, Status::Running);
        assert_eq!(v.memory.len(), PAGE_SIZE);
        assert_eq!(v.globals, vec![Value::I32(0), Value::I32(0)]);
    }

    #[test]
    fn instantiate_errors() {
        let m = parse_module("(module (func $f))").unwrap();
        assert_eq!(
            VmState::instantiate(m, &PrimitiveTable::new(), StackLimits::default()).unwrap_err(),
            InstantiateError::NoMainExport
        );
        let m = parse_module(corpus::TEMP_MONITOR).unwrap();
        assert!(matches!(
            VmState::instantiate(m, &PrimitiveTable::new(), StackLimits::default()),
            Err(InstantiateError::UnboundImport(..))
        ));
        let mut prims = PrimitiveTable::new();
        prims.insert("env", "f", TypeSig::new(vec![], vec![]), |_| Ok(None));
        let m = parse_module(
            "(module (import \"env\" \"f\" (func $f (param i32))) (export \"main\" (func $m)) (func $m))",
        )
        .unwrap();
        assert!(matches!(
            VmState::instantiate(m, &prims, StackLimits::default()),
            Err(InstantiateError::ImportSignature(..))
        ));
    }

    #[test]
    fn arithmetic() {
        assert_eq!(eval_as("(result i64)", "(i64.sub (i64.const 5) (i64.const 1))").unwrap(), vec![Value::I64(4)]);
        assert_eq!(eval("(i32.add (i32.const 2147483647) (i32.const 1))").unwrap(), vec![Value::I32(i32::MIN)]);
        assert_eq!(eval("(i32.sub (i32.const 3) (i32.const 5))").unwrap(), vec![Value::I32(-2)]);
        assert_eq!(eval("(i32.eq (i32.const 3) (i32.const 3))").unwrap(), vec![Value::I32(1)]);
        assert_eq!(eval("(i64.gt_s (i64.const -1) (i64.const 0))").unwrap(), vec![Value::I32(0)]);
        assert_eq!(eval_as("(result f32)", "(f32.add (f32.const 1.5) (f32.const 2))").unwrap(), vec![Value::f32(3.5)]);
        assert_eq!(eval_as("(result f32)", "(f32.div (f32.const 1) (f32.const 4))").unwrap(), vec![Value::f32(0.25)]);
        assert_eq!(eval("(f32.eq (f32.const nan) (f32.const nan))").unwrap(), vec![Value::I32(0)]);
    }

    #[test]
    fn divide_by_zero_freezes_state() {
        let src = "(module (export \"main\" (func $main)) (func $main (result f32) (f32.div (f32.const 3) (f32.const -0))))";
        let mut v = vm(src);
        v.step();
        v.step();
        let before = v.value_stack.clone();
        let at = v.pc;
        match v.step() {
            StepOutcome::Trapped(t) => {
                assert_eq!(t.kind, TrapKind::DivisionByZero);
                assert_eq!(t.at, at);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(v.status, Status::Trapped);
        assert_eq!(v.error_counter, Some(at));
        assert_eq!(v.pc, at);
        assert_eq!(v.value_stack, before);
        assert_eq!(v.step(), StepOutcome::NotRunnable(Status::Trapped));
    }

    #[test]
    fn memory_roundtrip_and_bounds() {
        let ok = eval("(i32.store offset=4 (i32.const 8) (i32.const -7)) (i32.load (i32.const 12))").unwrap();
        assert_eq!(ok, vec![Value::I32(-7)]);
        let err = eval("(i32.load offset=65533 (i32.const 0))").unwrap_err();
        assert_eq!(err.kind, TrapKind::OutOfBoundsMemory);
        let err = eval("(i32.load (i32.const -1))").unwrap_err();
        assert_eq!(err.kind, TrapKind::OutOfBoundsMemory);
    }

    #[test]
    fn countdown_base_case() {
        let mut v = vm(corpus::COUNTDOWN);
        let cd = v.module.func_index("countdown").unwrap();
        assert_eq!(v.invoke_isolated(cd, &[Value::I64(0)]), Ok(Some(Value::I64(0))));
        assert_eq!(v.invoke_isolated(cd, &[Value::I64(37)]), Ok(Some(Value::I64(0))));
        assert_eq!(v.pc, CodeOffset::new(v.module.main_index().unwrap(), 0));
        assert_eq!(v.call_stack.len(), 1);
    }

    #[test]
    fn breakpoint_pauses_before_instruction() {
        let mut v = vm(corpus::COUNTDOWN);
        let bp = resolve_breakpoint(&v.module, corpus::COUNTDOWN_BASE_LINE).unwrap();
        v.add_breakpoint(bp);
        assert_eq!(v.run(Some(10_000)), RunExit::Breakpoint(bp));
        assert_eq!(v.status, Status::Paused);
        assert_eq!(v.pc, bp);
        // main plus countdown(2), countdown(1), countdown(0)
        assert_eq!(v.call_stack.len(), 4);
        assert_eq!(v.run(None), RunExit::NotRunnable(Status::Paused));
        v.resume();
        let after = v.run(Some(10_000));
        assert_eq!(after, RunExit::Breakpoint(bp));
    }

    #[test]
    fn zero_budget_is_a_no_op() {
        let mut v = vm(corpus::COUNTDOWN);
        let before = v.trace_point();
        assert_eq!(v.run(Some(0)), RunExit::BudgetExhausted);
        assert_eq!(v.trace_point(), before);
        assert_eq!(v.instructions_executed(), 0);
    }

    #[test]
    fn stack_exhaustion_traps() {
        let m = parse_module(corpus::COUNTDOWN).unwrap();
        let limits = StackLimits { max_call_depth: 8, max_value_stack: 64 };
        let mut v = VmState::instantiate(m, &PrimitiveTable::new(), limits).unwrap();
        let cd = v.module.func_index("countdown").unwrap();
        let t = v.invoke_isolated(cd, &[Value::I64(20)]).unwrap_err();
        assert_eq!(t.kind, TrapKind::StackExhausted);
        assert_eq!(v.status, Status::Running);
        assert_eq!(v.error_counter, None);

        let mut v = vm("(module (export \"main\" (func $m)) (func $m (i32.const 1) (call $m) (drop)))");
        v.set_limits(StackLimits { max_call_depth: 8, max_value_stack: 5 });
        match v.run(Some(100)) {
            RunExit::Trapped(t) => assert_eq!(t.kind, TrapKind::StackExhausted),
            other => panic!("{other:?}"),
        }
        assert_eq!(v.value_stack.len(), 5);
    }

    #[test]
    fn host_failure_is_a_trap_at_the_call() {
        let mut prims = PrimitiveTable::new();
        prims.insert("env", "boom", TypeSig::new(vec![ValueKind::I32], vec![]), |_| Err(HostFailure::new("nope")));
        let m = parse_module(
            "(module (import \"env\" \"boom\" (func $b (param i32))) (export \"main\" (func $m)) (func $m (call $b (i32.const 1))))",
        )
        .unwrap();
        let mut v = VmState::instantiate(m, &prims, StackLimits::default()).unwrap();
        match v.run(None) {
            RunExit::Trapped(t) => {
                assert_eq!(t.kind, TrapKind::HostError);
                assert_eq!(v.module.instr(t.at).unwrap().op, Op::Call(0));
                assert_eq!(v.value_stack, vec![Value::I32(1)]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn halts_when_main_returns() {
        let mut v = vm("(module (export \"main\" (func $m)) (func $m (i32.const 1) (drop)))");
        assert_eq!(v.run(None), RunExit::Halted);
        assert_eq!(v.status, Status::Halted);
        assert!(v.call_stack.is_empty());
    }

    #[test]
    fn block_branch_keeps_result() {
        assert_eq!(
            eval_as("", "(block $b (result i32) (i32.const 1) (i32.const 9) (br $b)) (drop)").unwrap(),
            Vec::<Value>::new()
        );
        assert_eq!(eval("(block $b (result i32) (i32.const 1) (drop) (i32.const 9) (br $b))").unwrap(), vec![Value::I32(9)]);
    }

    #[test]
    fn interrupt_flag_yields_without_executing() {
        let mut v = vm(corpus::COUNTDOWN);
        let flag = AtomicBool::new(true);
        let exit = v.run_with::<true>(RunControl { interrupt: Some(&flag), ..Default::default() });
        assert_eq!(exit, RunExit::Interrupted);
        assert_eq!(v.instructions_executed(), 0);
    }

    #[test]
    fn hooks_disabled_ignores_breakpoints() {
        let mut v = vm(corpus::COUNTDOWN);
        let bp = resolve_breakpoint(&v.module, corpus::COUNTDOWN_BASE_LINE).unwrap();
        v.add_breakpoint(bp);
        let exit = v.run_with::<false>(RunControl { budget: Some(1000), ..Default::default() });
        assert_eq!(exit, RunExit::BudgetExhausted);
        assert_eq!(v.instructions_executed(), 1000);
    }
}
