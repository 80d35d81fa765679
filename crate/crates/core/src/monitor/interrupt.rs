//! Interrupt and response wire formats.
//!
//! Message: `opcode u8, len u32, payload`. Response: `status u8, opcode u8,
//! len u32, payload`, where status is 0 (ok), 1 (error, payload is a UTF-8
//! message) or 2 (unsolicited event).

use crate::module::CodeOffset;
use crate::proxy::AccessStrategy;
use crate::value::Value;
use crate::vm::Status;
use crate::wire::{ByteReader, ByteWriter, DecodeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Run = 0x01,
    Pause = 0x02,
    Step = 0x03,
    StepOver = 0x04,
    AddBreakpoint = 0x06,
    RemoveBreakpoint = 0x07,
    Dump = 0x10,
    ReceiveState = 0x11,
    ProxyCall = 0x20,
    MonitorProxies = 0x21,
    ProxyUseCache = 0x22,
    ProxyNoCache = 0x23,
    UpdateModule = 0x30,
    UpdateStackValue = 0x31,
    UpdateGlobal = 0x32,
    UpdateTableEntry = 0x33,
    SetPolicy = 0x40,
}

impl Opcode {
    pub const ALL: [Opcode; 17] = [
        Opcode::Run,
        Opcode::Pause,
        Opcode::Step,
        Opcode::StepOver,
        Opcode::AddBreakpoint,
        Opcode::RemoveBreakpoint,
        Opcode::Dump,
        Opcode::ReceiveState,
        Opcode::ProxyCall,
        Opcode::MonitorProxies,
        Opcode::ProxyUseCache,
        Opcode::ProxyNoCache,
        Opcode::UpdateModule,
        Opcode::UpdateStackValue,
        Opcode::UpdateGlobal,
        Opcode::UpdateTableEntry,
        Opcode::SetPolicy,
    ];

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|o| *o as u8 == c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BreakpointPolicy {
    #[default]
    Pause,
    /// Ship the session, clear every breakpoint, resume.
    SingleStop,
    /// Ship the session, clear the breakpoint that was hit, resume.
    RemoveAndProceed,
}

impl BreakpointPolicy {
    pub fn code(self) -> u8 {
        match self {
            BreakpointPolicy::Pause => 0,
            BreakpointPolicy::SingleStop => 1,
            BreakpointPolicy::RemoveAndProceed => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => BreakpointPolicy::Pause,
            1 => BreakpointPolicy::SingleStop,
            2 => BreakpointPolicy::RemoveAndProceed,
            _ => return None,
        })
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "pause" => BreakpointPolicy::Pause,
            "single-stop" => BreakpointPolicy::SingleStop,
            "remove-and-proceed" => BreakpointPolicy::RemoveAndProceed,
            _ => return None,
        })
    }
}

/// What a dump or an event carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DumpMode {
    /// The full session stream.
    #[default]
    Session,
    /// The small pc/call stack/breakpoint dump.
    Remote,
}

impl DumpMode {
    pub fn code(self) -> u8 {
        match self {
            DumpMode::Session => 0,
            DumpMode::Remote => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DumpMode::Session),
            1 => Some(DumpMode::Remote),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BreakpointSpec {
    At(CodeOffset),
    /// First instruction on a source line.
    Line(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackTarget {
    Slot(u32),
    /// Frame counted from the bottom of the call stack.
    Local { frame: u32, index: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Interrupt {
    Run,
    Pause,
    Step,
    StepOver,
    AddBreakpoint(BreakpointSpec),
    RemoveBreakpoint(BreakpointSpec),
    Dump(DumpMode),
    /// A complete session stream.
    ReceiveState(Vec<u8>),
    ProxyCall { fidx: u32, args: Vec<Value> },
    MonitorProxies(Vec<(u32, AccessStrategy)>),
    ProxyUseCache(Vec<u32>),
    ProxyNoCache(Vec<u32>),
    /// An encoded module blob.
    UpdateModule(Vec<u8>),
    UpdateStackValue { target: StackTarget, value: Value },
    UpdateGlobal { index: u32, value: Value },
    UpdateTableEntry { index: u32, func: u32 },
    SetPolicy(BreakpointPolicy),
}

fn bp_spec(w: &mut ByteWriter, b: &BreakpointSpec) {
    match b {
        BreakpointSpec::At(at) => {
            w.u8(0).offset(*at);
        }
        BreakpointSpec::Line(l) => {
            w.u8(1).u32(*l);
        }
    }
}

fn read_bp_spec(r: &mut ByteReader<'_>) -> Result<BreakpointSpec, DecodeError> {
    match r.u8()? {
        0 => Ok(BreakpointSpec::At(r.offset()?)),
        1 => Ok(BreakpointSpec::Line(r.u32()?)),
        t => Err(DecodeError::new(format!("bad breakpoint tag {t}"))),
    }
}

fn fidx_list(w: &mut ByteWriter, l: &[u32]) {
    w.u32(l.len() as u32);
    for f in l {
        w.u32(*f);
    }
}

fn read_fidx_list(r: &mut ByteReader<'_>) -> Result<Vec<u32>, DecodeError> {
    let n = r.count(4)?;
    (0..n).map(|_| r.u32()).collect()
}

impl Interrupt {
    pub fn opcode(&self) -> Opcode {
        match self {
            Interrupt::Run => Opcode::Run,
            Interrupt::Pause => Opcode::Pause,
            Interrupt::Step => Opcode::Step,
            Interrupt::StepOver => Opcode::StepOver,
            Interrupt::AddBreakpoint(_) => Opcode::AddBreakpoint,
            Interrupt::RemoveBreakpoint(_) => Opcode::RemoveBreakpoint,
            Interrupt::Dump(_) => Opcode::Dump,
            Interrupt::ReceiveState(_) => Opcode::ReceiveState,
            Interrupt::ProxyCall { .. } => Opcode::ProxyCall,
            Interrupt::MonitorProxies(_) => Opcode::MonitorProxies,
            Interrupt::ProxyUseCache(_) => Opcode::ProxyUseCache,
            Interrupt::ProxyNoCache(_) => Opcode::ProxyNoCache,
            Interrupt::UpdateModule(_) => Opcode::UpdateModule,
            Interrupt::UpdateStackValue { .. } => Opcode::UpdateStackValue,
            Interrupt::UpdateGlobal { .. } => Opcode::UpdateGlobal,
            Interrupt::UpdateTableEntry { .. } => Opcode::UpdateTableEntry,
            Interrupt::SetPolicy(_) => Opcode::SetPolicy,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        match self {
            Interrupt::Run | Interrupt::Pause | Interrupt::Step | Interrupt::StepOver => {}
            Interrupt::AddBreakpoint(b) | Interrupt::RemoveBreakpoint(b) => bp_spec(&mut w, b),
            Interrupt::Dump(mode) => {
                w.u8(mode.code());
            }
            Interrupt::ReceiveState(bytes) | Interrupt::UpdateModule(bytes) => {
                w.bytes(bytes);
            }
            Interrupt::ProxyCall { fidx, args } => {
                w.u32(*fidx).u8(args.len() as u8);
                for a in args {
                    w.value(a);
                }
            }
            Interrupt::MonitorProxies(list) => {
                w.u32(list.len() as u32);
                for (f, s) in list {
                    w.u32(*f);
                    s.encode(&mut w);
                }
            }
            Interrupt::ProxyUseCache(l) | Interrupt::ProxyNoCache(l) => fidx_list(&mut w, l),
            Interrupt::UpdateStackValue { target, value } => {
                match target {
                    StackTarget::Slot(i) => {
                        w.u8(0).u32(*i);
                    }
                    StackTarget::Local { frame, index } => {
                        w.u8(1).u32(*frame).u32(*index);
                    }
                }
                w.value(value);
            }
            Interrupt::UpdateGlobal { index, value } => {
                w.u32(*index).value(value);
            }
            Interrupt::UpdateTableEntry { index, func } => {
                w.u32(*index).u32(*func);
            }
            Interrupt::SetPolicy(p) => {
                w.u8(p.code());
            }
        }
        w.into_inner()
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut w = ByteWriter::with_capacity(5 + payload.len());
        w.u8(self.opcode() as u8).u32(payload.len() as u32).bytes(&payload);
        w.into_inner()
    }

    pub fn decode_payload(op: Opcode, p: &[u8]) -> Result<Self, DecodeError> {
        let mut r = ByteReader::new(p);
        let msg = match op {
            Opcode::Run => Interrupt::Run,
            Opcode::Pause => Interrupt::Pause,
            Opcode::Step => Interrupt::Step,
            Opcode::StepOver => Interrupt::StepOver,
            Opcode::AddBreakpoint => Interrupt::AddBreakpoint(read_bp_spec(&mut r)?),
            Opcode::RemoveBreakpoint => Interrupt::RemoveBreakpoint(read_bp_spec(&mut r)?),
            Opcode::Dump => {
                if r.is_empty() {
                    Interrupt::Dump(DumpMode::Session)
                } else {
                    let c = r.u8()?;
                    Interrupt::Dump(DumpMode::from_code(c).ok_or_else(|| DecodeError::new(format!("bad dump mode {c}")))?)
                }
            }
            Opcode::ReceiveState => Interrupt::ReceiveState(r.take(p.len())?.to_vec()),
            Opcode::UpdateModule => Interrupt::UpdateModule(r.take(p.len())?.to_vec()),
            Opcode::ProxyCall => {
                let fidx = r.u32()?;
                let n = r.u8()? as usize;
                let args = (0..n).map(|_| r.value()).collect::<Result<_, _>>()?;
                Interrupt::ProxyCall { fidx, args }
            }
            Opcode::MonitorProxies => {
                let n = r.count(5)?;
                let list = (0..n).map(|_| Ok((r.u32()?, AccessStrategy::decode(&mut r)?))).collect::<Result<_, _>>()?;
                Interrupt::MonitorProxies(list)
            }
            Opcode::ProxyUseCache => Interrupt::ProxyUseCache(read_fidx_list(&mut r)?),
            Opcode::ProxyNoCache => Interrupt::ProxyNoCache(read_fidx_list(&mut r)?),
            Opcode::UpdateStackValue => {
                let target = match r.u8()? {
                    0 => StackTarget::Slot(r.u32()?),
                    1 => StackTarget::Local { frame: r.u32()?, index: r.u32()? },
                    t => return Err(DecodeError::new(format!("bad stack target {t}"))),
                };
                Interrupt::UpdateStackValue { target, value: r.value()? }
            }
            Opcode::UpdateGlobal => Interrupt::UpdateGlobal { index: r.u32()?, value: r.value()? },
            Opcode::UpdateTableEntry => Interrupt::UpdateTableEntry { index: r.u32()?, func: r.u32()? },
            Opcode::SetPolicy => {
                let c = r.u8()?;
                Interrupt::SetPolicy(BreakpointPolicy::from_code(c).ok_or_else(|| DecodeError::new(format!("bad policy {c}")))?)
            }
        };
        r.finish()?;
        Ok(msg)
    }

    /// Decodes one message. On failure the raw opcode byte is returned too
    /// so the error response can echo it.
    pub fn decode(bytes: &[u8]) -> Result<Self, (u8, DecodeError)> {
        let op_byte = bytes.first().copied().unwrap_or(0);
        Self::decode_inner(bytes).map_err(|e| (op_byte, e))
    }

    fn decode_inner(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = ByteReader::new(bytes);
        let code = r.u8()?;
        let op = Opcode::from_code(code).ok_or_else(|| DecodeError::new(format!("unknown opcode 0x{code:02x}")))?;
        let len = r.u32()? as usize;
        let payload = r.take(len)?;
        r.finish()?;
        Self::decode_payload(op, payload)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ResponseStatus {
    Ok = 0,
    Error = 1,
    Event = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum EventKind {
    BreakpointHit = 0x80,
    Trapped = 0x81,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: ResponseStatus,
    /// Opcode of the message answered, or the event kind.
    pub opcode: u8,
    pub payload: Vec<u8>,
}

impl Response {
    pub fn ok(op: Opcode, payload: Vec<u8>) -> Self {
        Response { status: ResponseStatus::Ok, opcode: op as u8, payload }
    }

    pub fn error(opcode: u8, message: impl std::fmt::Display) -> Self {
        Response { status: ResponseStatus::Error, opcode, payload: message.to_string().into_bytes() }
    }

    pub fn event(kind: EventKind, mode: DumpMode, data: &[u8]) -> Self {
        let mut payload = Vec::with_capacity(1 + data.len());
        payload.push(mode.code());
        payload.extend_from_slice(data);
        Response { status: ResponseStatus::Event, opcode: kind as u8, payload }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ResponseStatus::Ok
    }

    pub fn is_event(&self) -> bool {
        self.status == ResponseStatus::Event
    }

    pub fn error_message(&self) -> Option<String> {
        (self.status == ResponseStatus::Error).then(|| String::from_utf8_lossy(&self.payload).into_owned())
    }

    /// For events: the dump mode byte and the data after it.
    pub fn event_data(&self) -> Option<(DumpMode, &[u8])> {
        if !self.is_event() {
            return None;
        }
        let (&mode, rest) = self.payload.split_first()?;
        Some((DumpMode::from_code(mode)?, rest))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(6 + self.payload.len());
        w.u8(self.status as u8).u8(self.opcode).u32(self.payload.len() as u32).bytes(&self.payload);
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = ByteReader::new(bytes);
        let status = match r.u8()? {
            0 => ResponseStatus::Ok,
            1 => ResponseStatus::Error,
            2 => ResponseStatus::Event,
            s => return Err(DecodeError::new(format!("bad response status {s}"))),
        };
        let opcode = r.u8()?;
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        r.finish()?;
        Ok(Response { status, opcode, payload })
    }
}

/// Payload of run-control acknowledgements: status and pc after handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VmReport {
    pub status: Status,
    pub pc: CodeOffset,
}

impl VmReport {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u8(self.status.code()).offset(self.pc);
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = ByteReader::new(bytes);
        let c = r.u8()?;
        let status = Status::from_code(c).ok_or_else(|| DecodeError::new(format!("bad status {c}")))?;
        let pc = r.offset()?;
        r.finish()?;
        Ok(VmReport { status, pc })
    }
}
