//! Debug sessions: the transferable snapshot of a paused VM, its chunked
//! binary stream, and the smaller pc/call-stack/breakpoint dump.
//!
//! Stream layout: a memory management message of five u32 lengths, then one
//! chunk per kind in a fixed order. A chunk is `kind u8, len u32, payload,
//! done u8`; only the final ModuleHash chunk has `done == 1`.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::module::{CodeOffset, PAGE_SIZE};
use crate::value::Value;
use crate::vm::{Frame, StackLimits, Status, VmState};
use crate::wire::{ByteReader, ByteWriter, DecodeError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DebugSession {
    pub pc: CodeOffset,
    pub error_counter: Option<CodeOffset>,
    pub breakpoints: BTreeSet<CodeOffset>,
    pub value_stack: Vec<Value>,
    pub call_stack: Vec<Frame>,
    pub globals: Vec<Value>,
    /// Linear memory, a whole number of pages.
    pub memory: Vec<u8>,
    pub table: Vec<u32>,
    pub module_hash: [u8; 32],
}

impl DebugSession {
    pub fn memory_page_count(&self) -> u32 {
        (self.memory.len() / PAGE_SIZE) as u32
    }

    pub fn mem_msg(&self) -> MemMgmtMsg {
        MemMgmtMsg {
            value_stack_len: self.value_stack.len() as u32,
            call_stack_len: self.call_stack.len() as u32,
            globals_len: self.globals.len() as u32,
            table_len: self.table.len() as u32,
            memory_page_count: self.memory_page_count(),
        }
    }

    pub fn dump(&self) -> RemoteDump {
        RemoteDump {
            pc: self.pc,
            call_stack: self.call_stack.iter().map(|f| (f.func_index, f.return_pc)).collect(),
            breakpoints: self.breakpoints.clone(),
        }
    }
}

/// Sent ahead of the chunks so the receiver can size its buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MemMgmtMsg {
    pub value_stack_len: u32,
    pub call_stack_len: u32,
    pub globals_len: u32,
    pub table_len: u32,
    pub memory_page_count: u32,
}

pub const MEM_MSG_LEN: usize = 20;

impl MemMgmtMsg {
    pub fn encode(&self, w: &mut ByteWriter) {
        w.u32(self.value_stack_len)
            .u32(self.call_stack_len)
            .u32(self.globals_len)
            .u32(self.table_len)
            .u32(self.memory_page_count);
    }

    pub fn decode(r: &mut ByteReader<'_>) -> Result<Self, DecodeError> {
        Ok(MemMgmtMsg {
            value_stack_len: r.u32()?,
            call_stack_len: r.u32()?,
            globals_len: r.u32()?,
            table_len: r.u32()?,
            memory_page_count: r.u32()?,
        })
    }

    /// Rejects sessions the receiver could not hold, before any chunk is read.
    pub fn check_capacity(&self, limits: StackLimits) -> Result<(), SessionError> {
        if self.call_stack_len as usize > limits.max_call_depth {
            return Err(SessionError::CapacityExceeded(format!(
                "call stack of {} frames exceeds limit {}",
                self.call_stack_len, limits.max_call_depth
            )));
        }
        if self.value_stack_len as usize > limits.max_value_stack {
            return Err(SessionError::CapacityExceeded(format!(
                "value stack of {} exceeds limit {}",
                self.value_stack_len, limits.max_value_stack
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ChunkKind {
    Pc = 1,
    ErrorCounter = 2,
    Breakpoints = 3,
    Globals = 4,
    Table = 5,
    ValueStack = 6,
    CallStack = 7,
    MemoryPages = 8,
    ModuleHash = 9,
}

impl ChunkKind {
    pub const ORDER: [ChunkKind; 9] = [
        ChunkKind::Pc,
        ChunkKind::ErrorCounter,
        ChunkKind::Breakpoints,
        ChunkKind::Globals,
        ChunkKind::Table,
        ChunkKind::ValueStack,
        ChunkKind::CallStack,
        ChunkKind::MemoryPages,
        ChunkKind::ModuleHash,
    ];

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ORDER.get((c as usize).wrapping_sub(1)).copied()
    }
}

pub const DONE_MORE: u8 = 0x00;
pub const DONE_LAST: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateChunk {
    pub kind: ChunkKind,
    pub payload: Vec<u8>,
    pub done_flag: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("session was taken from a different module")]
    ModuleMismatch,
    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),
    #[error("session does not fit the module: {0}")]
    Inconsistent(String),
    #[error("state can only be extracted while paused, trapped or halted (status {0:?})")]
    NotStopped(Status),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

pub fn extract_session(vm: &VmState) -> Result<DebugSession, SessionError> {
    match vm.status {
        Status::Paused | Status::Trapped | Status::Halted => Ok(snapshot(vm)),
        other => Err(SessionError::NotStopped(other)),
    }
}

/// Copies the state regardless of status.
pub fn snapshot(vm: &VmState) -> DebugSession {
    DebugSession {
        pc: vm.pc,
        error_counter: vm.error_counter,
        breakpoints: vm.breakpoints.clone(),
        value_stack: vm.value_stack.clone(),
        call_stack: vm.call_stack.clone(),
        globals: vm.globals.clone(),
        memory: vm.memory.clone(),
        table: vm.table.clone(),
        module_hash: vm.module_hash,
    }
}

/// Checks that `d` describes a state of the module `vm` runs.
pub fn check_session(vm: &VmState, d: &DebugSession) -> Result<(), SessionError> {
    let m = &vm.module;
    if d.module_hash != vm.module_hash {
        return Err(SessionError::ModuleMismatch);
    }
    d.mem_msg().check_capacity(vm.limits)?;
    let bad = |msg: String| Err(SessionError::Inconsistent(msg));
    if d.globals.len() != m.globals.len() {
        return bad(format!("{} globals, module has {}", d.globals.len(), m.globals.len()));
    }
    for (i, (v, g)) in d.globals.iter().zip(&m.globals).enumerate() {
        if v.kind() != g.kind {
            return bad(format!("global {i} is {}, declared {}", v.kind(), g.kind));
        }
    }
    if d.memory.len() != m.memory_pages as usize * PAGE_SIZE {
        return bad(format!("memory of {} bytes, module has {} pages", d.memory.len(), m.memory_pages));
    }
    if d.table.len() != m.table.len() {
        return bad("table length differs".into());
    }
    for (slot, (&new, &old)) in d.table.iter().zip(&m.table).enumerate() {
        if m.sig(new).is_none() || m.sig(new) != m.sig(old) {
            return bad(format!("table entry {slot} has an incompatible function"));
        }
    }
    for bp in &d.breakpoints {
        if m.instr(*bp).is_none() {
            return bad(format!("breakpoint {bp} outside the module"));
        }
    }
    if let Some(at) = d.error_counter {
        if m.instr(at).is_none() {
            return bad(format!("error counter {at} outside the module"));
        }
    }
    if m.instr(d.pc).is_none() {
        return bad(format!("pc {} outside the module", d.pc));
    }
    let mut prev_base = 0u32;
    for (i, f) in d.call_stack.iter().enumerate() {
        let Some(kinds) = m.frame_local_kinds(f.func_index) else {
            return bad(format!("frame {i} names a missing function"));
        };
        if m.funcs[f.func_index as usize].is_import() {
            return bad(format!("frame {i} is an import"));
        }
        if f.locals.len() != kinds.len() || f.locals.iter().zip(&kinds).any(|(v, k)| v.kind() != *k) {
            return bad(format!("frame {i} locals do not match function {}", f.func_index));
        }
        if f.value_stack_base < prev_base || f.value_stack_base as usize > d.value_stack.len() {
            return bad(format!("frame {i} stack base out of order"));
        }
        prev_base = f.value_stack_base;
        if let Some(rp) = f.return_pc {
            if m.instr(rp).is_none() {
                return bad(format!("frame {i} return pc outside the module"));
            }
        }
    }
    match d.call_stack.last() {
        Some(top) if top.func_index == d.pc.func => Ok(()),
        None => Ok(()),
        Some(_) => bad("pc is not in the top frame".into()),
    }
}

/// Replaces the execution and application state of `vm` with `d` and leaves
/// it paused. Nothing changes unless the session is accepted.
pub fn apply_session(vm: &mut VmState, d: DebugSession) -> Result<(), SessionError> {
    check_session(vm, &d)?;
    vm.pc = d.pc;
    vm.error_counter = d.error_counter;
    vm.breakpoints = d.breakpoints;
    vm.value_stack = d.value_stack;
    vm.call_stack = d.call_stack;
    vm.globals = d.globals;
    vm.memory = d.memory;
    vm.table = d.table;
    vm.last_trap = None;
    vm.status = if vm.call_stack.is_empty() { Status::Halted } else { Status::Paused };
    Ok(())
}

fn chunk_payload(d: &DebugSession, kind: ChunkKind) -> Vec<u8> {
    let mut w = ByteWriter::new();
    match kind {
        ChunkKind::Pc => {
            w.offset(d.pc);
        }
        ChunkKind::ErrorCounter => match d.error_counter {
            Some(at) => {
                w.u8(1).offset(at);
            }
            None => {
                w.u8(0);
            }
        },
        ChunkKind::Breakpoints => {
            w.u32(d.breakpoints.len() as u32);
            for bp in &d.breakpoints {
                w.offset(*bp);
            }
        }
        ChunkKind::Globals => {
            w.u32(d.globals.len() as u32);
            for v in &d.globals {
                w.value(v);
            }
        }
        ChunkKind::Table => {
            w.u32(d.table.len() as u32);
            for t in &d.table {
                w.u32(*t);
            }
        }
        ChunkKind::ValueStack => {
            w.u32(d.value_stack.len() as u32);
            for v in &d.value_stack {
                w.value(v);
            }
        }
        ChunkKind::CallStack => {
            w.u32(d.call_stack.len() as u32);
            for f in &d.call_stack {
                w.u32(f.func_index);
                opt_offset(&mut w, f.return_pc);
                w.u32(f.value_stack_base);
                w.u32(f.locals.len() as u32);
                for v in &f.locals {
                    w.value(v);
                }
            }
        }
        ChunkKind::MemoryPages => {
            // All-zero pages are implied by the page count.
            let pages: Vec<(usize, &[u8])> =
                d.memory.chunks(PAGE_SIZE).enumerate().filter(|(_, p)| p.iter().fold(0, |a, b| a | b) != 0).collect();
            w.u32(d.memory_page_count()).u32(pages.len() as u32);
            for (i, p) in pages {
                w.u32(i as u32).bytes(p);
            }
        }
        ChunkKind::ModuleHash => {
            w.bytes(&d.module_hash);
        }
    }
    w.into_inner()
}

fn opt_offset(w: &mut ByteWriter, at: Option<CodeOffset>) {
    match at {
        Some(at) => {
            w.u8(1).offset(at);
        }
        None => {
            w.u8(0);
        }
    }
}

fn read_opt_offset(r: &mut ByteReader<'_>) -> Result<Option<CodeOffset>, DecodeError> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(r.offset()?)),
        b => Err(DecodeError::new(format!("bad presence byte {b}"))),
    }
}

pub fn encode_session(d: &DebugSession) -> (MemMgmtMsg, Vec<StateChunk>) {
    let chunks = ChunkKind::ORDER
        .iter()
        .map(|&kind| StateChunk {
            kind,
            payload: chunk_payload(d, kind),
            done_flag: if kind == ChunkKind::ModuleHash { DONE_LAST } else { DONE_MORE },
        })
        .collect();
    (d.mem_msg(), chunks)
}

pub fn write_stream(mem: &MemMgmtMsg, chunks: &[StateChunk]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    mem.encode(&mut w);
    for c in chunks {
        w.u8(c.kind as u8).u32(c.payload.len() as u32).bytes(&c.payload).u8(c.done_flag);
    }
    w.into_inner()
}

/// The session as one byte stream.
pub fn encode_session_bytes(d: &DebugSession) -> Vec<u8> {
    let (mem, chunks) = encode_session(d);
    write_stream(&mem, &chunks)
}

/// Splits a stream into its memory management message and raw chunks.
/// Checks framing only; [`decode_session`] checks content.
pub fn read_stream(bytes: &[u8]) -> Result<(MemMgmtMsg, Vec<StateChunk>), DecodeError> {
    let mut r = ByteReader::new(bytes);
    let mem = MemMgmtMsg::decode(&mut r)?;
    let mut chunks = Vec::new();
    loop {
        if r.is_empty() {
            return Err(DecodeError::new("unterminated session"));
        }
        let code = r.u8()?;
        let kind = ChunkKind::from_code(code).ok_or_else(|| DecodeError::new(format!("bad chunk kind {code}")))?;
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        let done_flag = r.u8()?;
        chunks.push(StateChunk { kind, payload, done_flag });
        match done_flag {
            DONE_MORE => {}
            DONE_LAST => break,
            f => return Err(DecodeError::new(format!("bad done flag {f}"))),
        }
    }
    r.finish()?;
    Ok((mem, chunks))
}

pub fn decode_session(mem: &MemMgmtMsg, chunks: &[StateChunk]) -> Result<DebugSession, DecodeError> {
    if chunks.last().map(|c| c.done_flag) != Some(DONE_LAST) {
        return Err(DecodeError::new("unterminated session"));
    }
    if chunks.len() != ChunkKind::ORDER.len() {
        return Err(DecodeError::new(format!("expected {} chunks, got {}", ChunkKind::ORDER.len(), chunks.len())));
    }
    let mut d = DebugSession {
        pc: CodeOffset::new(0, 0),
        error_counter: None,
        breakpoints: BTreeSet::new(),
        value_stack: Vec::with_capacity(mem.value_stack_len as usize),
        call_stack: Vec::with_capacity(mem.call_stack_len as usize),
        globals: Vec::with_capacity(mem.globals_len as usize),
        memory: Vec::new(),
        table: Vec::with_capacity(mem.table_len as usize),
        module_hash: [0; 32],
    };
    for (i, (c, want)) in chunks.iter().zip(ChunkKind::ORDER).enumerate() {
        if c.kind != want {
            return Err(DecodeError::new(format!("chunk {i} is {:?}, expected {want:?}", c.kind)));
        }
        if i + 1 < chunks.len() && c.done_flag != DONE_MORE {
            return Err(DecodeError::new("early terminator"));
        }
        let mut r = ByteReader::new(&c.payload);
        let count_matches = |n: usize, declared: u32, what: &str| {
            if n == declared as usize {
                Ok(())
            } else {
                Err(DecodeError::new(format!("{what} has {n} entries, announced {declared}")))
            }
        };
        match c.kind {
            ChunkKind::Pc => d.pc = r.offset()?,
            ChunkKind::ErrorCounter => d.error_counter = read_opt_offset(&mut r)?,
            ChunkKind::Breakpoints => {
                let n = r.count(8)?;
                for _ in 0..n {
                    if !d.breakpoints.insert(r.offset()?) {
                        return Err(DecodeError::new("duplicate breakpoint"));
                    }
                }
            }
            ChunkKind::Globals => {
                let n = r.count(5)?;
                count_matches(n, mem.globals_len, "globals")?;
                for _ in 0..n {
                    d.globals.push(r.value()?);
                }
            }
            ChunkKind::Table => {
                let n = r.count(4)?;
                count_matches(n, mem.table_len, "table")?;
                for _ in 0..n {
                    d.table.push(r.u32()?);
                }
            }
            ChunkKind::ValueStack => {
                let n = r.count(5)?;
                count_matches(n, mem.value_stack_len, "value stack")?;
                for _ in 0..n {
                    d.value_stack.push(r.value()?);
                }
            }
            ChunkKind::CallStack => {
                let n = r.count(13)?;
                count_matches(n, mem.call_stack_len, "call stack")?;
                for _ in 0..n {
                    let func_index = r.u32()?;
                    let return_pc = read_opt_offset(&mut r)?;
                    let value_stack_base = r.u32()?;
                    let nl = r.count(5)?;
                    let mut locals = Vec::with_capacity(nl);
                    for _ in 0..nl {
                        locals.push(r.value()?);
                    }
                    d.call_stack.push(Frame { func_index, return_pc, value_stack_base, locals });
                }
            }
            ChunkKind::MemoryPages => {
                let pages = r.u32()?;
                count_matches(pages as usize, mem.memory_page_count, "memory")?;
                let nz = r.count(4 + PAGE_SIZE)?;
                d.memory = vec![0; pages as usize * PAGE_SIZE];
                let mut last: Option<u32> = None;
                for _ in 0..nz {
                    let idx = r.u32()?;
                    if idx >= pages || last.is_some_and(|l| idx <= l) {
                        return Err(DecodeError::new(format!("page index {idx} out of order or range")));
                    }
                    last = Some(idx);
                    let at = idx as usize * PAGE_SIZE;
                    d.memory[at..at + PAGE_SIZE].copy_from_slice(r.take(PAGE_SIZE)?);
                }
            }
            ChunkKind::ModuleHash => d.module_hash = r.take(32)?.try_into().unwrap(),
        }
        r.finish().map_err(|e| DecodeError::new(format!("{:?} chunk: {}", c.kind, e.0)))?;
    }
    Ok(d)
}

pub fn decode_session_bytes(bytes: &[u8]) -> Result<DebugSession, DecodeError> {
    let (mem, chunks) = read_stream(bytes)?;
    decode_session(&mem, &chunks)
}

/// Total encoded length, memory management message and chunk framing
/// included.
pub fn session_size_bytes(d: &DebugSession) -> usize {
    encode_session_bytes(d).len()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteDump {
    pub pc: CodeOffset,
    pub call_stack: Vec<(u32, Option<CodeOffset>)>,
    pub breakpoints: BTreeSet<CodeOffset>,
}

impl RemoteDump {
    pub fn of(vm: &VmState) -> Self {
        RemoteDump {
            pc: vm.pc,
            call_stack: vm.call_stack.iter().map(|f| (f.func_index, f.return_pc)).collect(),
            breakpoints: vm.breakpoints.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.offset(self.pc).u32(self.call_stack.len() as u32);
        for (f, rp) in &self.call_stack {
            w.u32(*f);
            opt_offset(&mut w, *rp);
        }
        w.u32(self.breakpoints.len() as u32);
        for bp in &self.breakpoints {
            w.offset(*bp);
        }
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = ByteReader::new(bytes);
        let pc = r.offset()?;
        let n = r.count(5)?;
        let mut call_stack = Vec::with_capacity(n);
        for _ in 0..n {
            call_stack.push((r.u32()?, read_opt_offset(&mut r)?));
        }
        let n = r.count(8)?;
        let mut breakpoints = BTreeSet::new();
        for _ in 0..n {
            if !breakpoints.insert(r.offset()?) {
                return Err(DecodeError::new("duplicate breakpoint"));
            }
        }
        r.finish()?;
        Ok(RemoteDump { pc, call_stack, breakpoints })
    }
}

pub fn dump_size_bytes(r: &RemoteDump) -> usize {
    r.encode().len()
}
