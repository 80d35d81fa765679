//! Self-delimiting binary form of a `SourceModule`.
//!
//! Layout: `"OOTM"`, version byte, u32 body length, then six sections in a
//! fixed order (types, funcs, globals, table, memory, exports), each as
//! `id: u8, len: u32, content`. Integers are little-endian. The line table is
//! rebuilt from per-instruction source lines on decode.

use sha2::{Digest, Sha256};

use crate::module::{FuncDef, GlobalDef, Instr, Op, SourceModule, TypeSig};
use crate::value::ValueKind;
use crate::wire::{ByteReader, ByteWriter, DecodeError};

const MAGIC: &[u8; 4] = b"OOTM";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 9;

const SEC_TYPES: u8 = 1;
const SEC_FUNCS: u8 = 2;
const SEC_GLOBALS: u8 = 3;
const SEC_TABLE: u8 = 4;
const SEC_MEMORY: u8 = 5;
const SEC_EXPORTS: u8 = 6;

const NO_RESULT: u8 = 0x40;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleBlob {
    pub bytes: Vec<u8>,
}

impl ModuleBlob {
    pub fn hash(&self) -> [u8; 32] {
        module_hash(&self.bytes)
    }
}

/// SHA-256 of the blob bytes.
pub fn module_hash(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn kinds(w: &mut ByteWriter, ks: &[ValueKind]) {
    w.u32(ks.len() as u32);
    for k in ks {
        w.u8(k.code());
    }
}

fn opt_str(w: &mut ByteWriter, s: &Option<String>) {
    match s {
        Some(s) => {
            w.u8(1).str(s);
        }
        None => {
            w.u8(0);
        }
    }
}

fn block_type(w: &mut ByteWriter, r: Option<ValueKind>) {
    w.u8(r.map(ValueKind::code).unwrap_or(NO_RESULT));
}

fn instr(w: &mut ByteWriter, ins: &Instr) {
    match ins.op {
        Op::Nop => {
            w.u8(0x01);
        }
        Op::Block { result, end } => {
            w.u8(0x02);
            block_type(w, result);
            w.u32(end);
        }
        Op::Loop { result } => {
            w.u8(0x03);
            block_type(w, result);
        }
        Op::If { result, else_pc, end } => {
            w.u8(0x04);
            block_type(w, result);
            w.u32(else_pc).u32(end);
        }
        Op::Else { end } => {
            w.u8(0x05).u32(end);
        }
        Op::End => {
            w.u8(0x0B);
        }
        Op::Br { depth, target, arity, height } => {
            w.u8(0x0C).u32(depth).u32(target).u32(arity).u32(height);
        }
        Op::Return => {
            w.u8(0x0F);
        }
        Op::Call(f) => {
            w.u8(0x10).u32(f);
        }
        Op::Drop => {
            w.u8(0x1A);
        }
        Op::LocalGet(i) => {
            w.u8(0x20).u32(i);
        }
        Op::LocalSet(i) => {
            w.u8(0x21).u32(i);
        }
        Op::GlobalGet(i) => {
            w.u8(0x23).u32(i);
        }
        Op::GlobalSet(i) => {
            w.u8(0x24).u32(i);
        }
        Op::I32Load(o) => {
            w.u8(0x28).u32(o);
        }
        Op::I32Store(o) => {
            w.u8(0x36).u32(o);
        }
        Op::I32Const(v) => {
            w.u8(0x41).i32(v);
        }
        Op::I64Const(v) => {
            w.u8(0x42).i64(v);
        }
        Op::F32Const(b) => {
            w.u8(0x43).u32(b);
        }
        Op::I32Eq => {
            w.u8(0x46);
        }
        Op::I64GtS => {
            w.u8(0x55);
        }
        Op::F32Eq => {
            w.u8(0x5B);
        }
        Op::I32Add => {
            w.u8(0x6A);
        }
        Op::I32Sub => {
            w.u8(0x6B);
        }
        Op::I64Sub => {
            w.u8(0x7D);
        }
        Op::F32Add => {
            w.u8(0x92);
        }
        Op::F32Div => {
            w.u8(0x95);
        }
    }
    w.u32(ins.src_line);
}

fn section(out: &mut ByteWriter, id: u8, body: ByteWriter) {
    let body = body.into_inner();
    out.u8(id).u32(body.len() as u32).bytes(&body);
}

pub fn encode_module(m: &SourceModule) -> ModuleBlob {
    let mut body = ByteWriter::new();

    let mut s = ByteWriter::new();
    s.u32(m.types.len() as u32);
    for t in &m.types {
        kinds(&mut s, &t.params);
        kinds(&mut s, &t.results);
    }
    section(&mut body, SEC_TYPES, s);

    let mut s = ByteWriter::new();
    s.u32(m.funcs.len() as u32);
    for f in &m.funcs {
        opt_str(&mut s, &f.name);
        s.u32(f.type_index);
        match &f.import {
            Some((ns, name)) => {
                s.u8(1).str(ns).str(name);
            }
            None => {
                s.u8(0);
            }
        }
        kinds(&mut s, &f.locals);
        s.u32(f.body.len() as u32);
        for ins in &f.body {
            instr(&mut s, ins);
        }
    }
    section(&mut body, SEC_FUNCS, s);

    let mut s = ByteWriter::new();
    s.u32(m.globals.len() as u32);
    for g in &m.globals {
        opt_str(&mut s, &g.name);
        s.u8(g.kind.code()).u8(g.mutable as u8).value(&g.init);
    }
    section(&mut body, SEC_GLOBALS, s);

    let mut s = ByteWriter::new();
    s.u32(m.table.len() as u32);
    for t in &m.table {
        s.u32(*t);
    }
    section(&mut body, SEC_TABLE, s);

    let mut s = ByteWriter::new();
    s.u32(m.memory_pages);
    section(&mut body, SEC_MEMORY, s);

    let mut s = ByteWriter::new();
    s.u32(m.exports.len() as u32);
    for (name, idx) in &m.exports {
        s.str(name).u32(*idx);
    }
    section(&mut body, SEC_EXPORTS, s);

    let body = body.into_inner();
    let mut out = ByteWriter::with_capacity(HEADER_LEN + body.len());
    out.bytes(MAGIC).u8(VERSION).u32(body.len() as u32).bytes(&body);
    ModuleBlob { bytes: out.into_inner() }
}

fn read_kinds(r: &mut ByteReader<'_>) -> Result<Vec<ValueKind>, DecodeError> {
    let n = r.count(1)?;
    (0..n).map(|_| r.kind()).collect()
}

fn read_opt_str(r: &mut ByteReader<'_>) -> Result<Option<String>, DecodeError> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(r.str()?)),
        b => Err(DecodeError::new(format!("bad presence byte {b}"))),
    }
}

fn read_block_type(r: &mut ByteReader<'_>) -> Result<Option<ValueKind>, DecodeError> {
    match r.u8()? {
        NO_RESULT => Ok(None),
        c => ValueKind::from_code(c).map(Some).ok_or_else(|| DecodeError::new(format!("bad block type 0x{c:02x}"))),
    }
}

fn read_instr(r: &mut ByteReader<'_>) -> Result<Instr, DecodeError> {
    let code = r.u8()?;
    let op = match code {
        0x01 => Op::Nop,
        0x02 => Op::Block { result: read_block_type(r)?, end: r.u32()? },
        0x03 => Op::Loop { result: read_block_type(r)? },
        0x04 => Op::If { result: read_block_type(r)?, else_pc: r.u32()?, end: r.u32()? },
        0x05 => Op::Else { end: r.u32()? },
        0x0B => Op::End,
        0x0C => Op::Br { depth: r.u32()?, target: r.u32()?, arity: r.u32()?, height: r.u32()? },
        0x0F => Op::Return,
        0x10 => Op::Call(r.u32()?),
        0x1A => Op::Drop,
        0x20 => Op::LocalGet(r.u32()?),
        0x21 => Op::LocalSet(r.u32()?),
        0x23 => Op::GlobalGet(r.u32()?),
        0x24 => Op::GlobalSet(r.u32()?),
        0x28 => Op::I32Load(r.u32()?),
        0x36 => Op::I32Store(r.u32()?),
        0x41 => Op::I32Const(r.i32()?),
        0x42 => Op::I64Const(r.i64()?),
        0x43 => Op::F32Const(r.u32()?),
        0x46 => Op::I32Eq,
        0x55 => Op::I64GtS,
        0x5B => Op::F32Eq,
        0x6A => Op::I32Add,
        0x6B => Op::I32Sub,
        0x7D => Op::I64Sub,
        0x92 => Op::F32Add,
        0x95 => Op::F32Div,
        other => return Err(DecodeError::new(format!("unknown opcode 0x{other:02x}"))),
    };
    let src_line = r.u32()?;
    Ok(Instr { op, src_line })
}

fn open_section<'a>(r: &mut ByteReader<'a>, id: u8) -> Result<ByteReader<'a>, DecodeError> {
    let got = r.u8()?;
    if got != id {
        return Err(DecodeError::new(format!("expected section {id}, found {got}")));
    }
    let len = r.u32()? as usize;
    Ok(ByteReader::new(r.take(len)?))
}

pub fn decode_module(blob: &ModuleBlob) -> Result<SourceModule, DecodeError> {
    decode_module_bytes(&blob.bytes)
}

fn decode_module_bytes(bytes: &[u8]) -> Result<SourceModule, DecodeError> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(DecodeError::new("bad magic"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(DecodeError::new(format!("unsupported version {version}")));
    }
    let body_len = r.u32()? as usize;
    let body = r.take(body_len)?;
    r.finish()?;
    let mut r = ByteReader::new(body);
    let mut m = SourceModule::default();

    let mut s = open_section(&mut r, SEC_TYPES)?;
    let n = s.count(8)?;
    for _ in 0..n {
        let params = read_kinds(&mut s)?;
        let results = read_kinds(&mut s)?;
        m.types.push(TypeSig::new(params, results));
    }
    s.finish()?;

    let mut s = open_section(&mut r, SEC_FUNCS)?;
    let n = s.count(14)?;
    for _ in 0..n {
        let name = read_opt_str(&mut s)?;
        let type_index = s.u32()?;
        let import = match s.u8()? {
            0 => None,
            1 => Some((s.str()?, s.str()?)),
            b => return Err(DecodeError::new(format!("bad import flag {b}"))),
        };
        let locals = read_kinds(&mut s)?;
        let len = s.count(5)?;
        let body = (0..len).map(|_| read_instr(&mut s)).collect::<Result<Vec<_>, _>>()?;
        m.funcs.push(FuncDef { name, type_index, locals, body, import });
    }
    s.finish()?;

    let mut s = open_section(&mut r, SEC_GLOBALS)?;
    let n = s.count(8)?;
    for _ in 0..n {
        let name = read_opt_str(&mut s)?;
        let kind = s.kind()?;
        let mutable = match s.u8()? {
            0 => false,
            1 => true,
            b => return Err(DecodeError::new(format!("bad mutability flag {b}"))),
        };
        let init = s.value()?;
        m.globals.push(GlobalDef { name, kind, mutable, init });
    }
    s.finish()?;

    let mut s = open_section(&mut r, SEC_TABLE)?;
    let n = s.count(4)?;
    m.table = (0..n).map(|_| s.u32()).collect::<Result<_, _>>()?;
    s.finish()?;

    let mut s = open_section(&mut r, SEC_MEMORY)?;
    m.memory_pages = s.u32()?;
    s.finish()?;

    let mut s = open_section(&mut r, SEC_EXPORTS)?;
    let n = s.count(8)?;
    for _ in 0..n {
        let name = s.str()?;
        let idx = s.u32()?;
        if m.exports.insert(name, idx).is_some() {
            return Err(DecodeError::new("duplicate export"));
        }
    }
    s.finish()?;
    r.finish()?;

    m.rebuild_line_table();
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wat::parse_module;

    #[test]
    fn truncated_blob_rejected() {
        let m = parse_module("(module (memory 1) (func $f nop))").unwrap();
        let blob = encode_module(&m);
        for cut in [0, 3, 8, blob.bytes.len() - 1] {
            let b = ModuleBlob { bytes: blob.bytes[..cut].to_vec() };
            assert!(decode_module(&b).is_err(), "cut at {cut}");
        }
        let mut longer = blob.bytes.clone();
        longer.push(0);
        assert!(decode_module(&ModuleBlob { bytes: longer }).is_err());
    }

    #[test]
    fn bad_opcode_rejected() {
        let m = parse_module("(module (func nop))").unwrap();
        let mut blob = encode_module(&m);
        // The function body's first opcode sits after the fixed-width prefix
        // of the funcs section; find the nop (0x01 followed by line 1).
        let pos = blob.bytes.windows(5).position(|w| w == [0x01, 1, 0, 0, 0]).unwrap();
        blob.bytes[pos] = 0xEE;
        assert!(decode_module(&blob).is_err());
    }
}
