//! The parsed program representation shared by the frontend, the VM and the
//! session codec.

use std::collections::BTreeMap;
use std::fmt;

use crate::value::{Value, ValueKind};

/// Position of an instruction: function index plus offset into its body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeOffset {
    pub func: u32,
    pub offset: u32,
}

impl CodeOffset {
    pub const fn new(func: u32, offset: u32) -> Self {
        Self { func, offset }
    }
}

impl fmt::Display for CodeOffset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.func, self.offset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TypeSig {
    pub params: Vec<ValueKind>,
    /// Zero or one result.
    pub results: Vec<ValueKind>,
}

impl TypeSig {
    pub fn new(params: Vec<ValueKind>, results: Vec<ValueKind>) -> Self {
        Self { params, results }
    }

    pub fn result(&self) -> Option<ValueKind> {
        self.results.first().copied()
    }
}

/// One lowered instruction. Structured control keeps its marker in the body
/// (so lines and pretty printing survive) but all jump targets are absolute
/// body offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Nop,
    Drop,
    Return,
    I32Const(i32),
    I64Const(i64),
    /// Raw IEEE-754 bits.
    F32Const(u32),
    I32Add,
    I32Sub,
    I32Eq,
    I64GtS,
    I64Sub,
    F32Add,
    F32Div,
    F32Eq,
    LocalGet(u32),
    LocalSet(u32),
    GlobalGet(u32),
    GlobalSet(u32),
    /// Static offset immediate.
    I32Load(u32),
    I32Store(u32),
    Call(u32),
    /// `end` is the offset of the matching `End`.
    Block { result: Option<ValueKind>, end: u32 },
    Loop { result: Option<ValueKind> },
    /// Taken when the condition is zero: `else_pc` is the first instruction
    /// of the else arm, or `end + 1` when there is none.
    If { result: Option<ValueKind>, else_pc: u32, end: u32 },
    /// Reached by falling out of the then arm; continues at `end + 1`.
    Else { end: u32 },
    /// Block terminator; the last `End` of a body returns from the function.
    End,
    /// `depth` is the source label depth. The branch keeps `arity` values,
    /// cuts the stack to `height` above the frame base and jumps to `target`.
    Br { depth: u32, target: u32, arity: u32, height: u32 },
}

impl Op {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Op::Nop => "nop",
            Op::Drop => "drop",
            Op::Return => "return",
            Op::I32Const(_) => "i32.const",
            Op::I64Const(_) => "i64.const",
            Op::F32Const(_) => "f32.const",
            Op::I32Add => "i32.add",
            Op::I32Sub => "i32.sub",
            Op::I32Eq => "i32.eq",
            Op::I64GtS => "i64.gt_s",
            Op::I64Sub => "i64.sub",
            Op::F32Add => "f32.add",
            Op::F32Div => "f32.div",
            Op::F32Eq => "f32.eq",
            Op::LocalGet(_) => "local.get",
            Op::LocalSet(_) => "local.set",
            Op::GlobalGet(_) => "global.get",
            Op::GlobalSet(_) => "global.set",
            Op::I32Load(_) => "i32.load",
            Op::I32Store(_) => "i32.store",
            Op::Call(_) => "call",
            Op::Block { .. } => "block",
            Op::Loop { .. } => "loop",
            Op::If { .. } => "if",
            Op::Else { .. } => "else",
            Op::End => "end",
            Op::Br { .. } => "br",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instr {
    pub op: Op,
    /// 1-based source line.
    pub src_line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuncDef {
    /// Symbol without the leading `$`.
    pub name: Option<String>,
    pub type_index: u32,
    /// Declared locals (parameters excluded).
    pub locals: Vec<ValueKind>,
    pub body: Vec<Instr>,
    /// `(namespace, name)` for imported functions; imports have no body.
    pub import: Option<(String, String)>,
}

impl FuncDef {
    pub fn is_import(&self) -> bool {
        self.import.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalDef {
    pub name: Option<String>,
    pub kind: ValueKind,
    pub mutable: bool,
    pub init: Value,
}

pub const PAGE_SIZE: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SourceModule {
    pub types: Vec<TypeSig>,
    pub funcs: Vec<FuncDef>,
    pub globals: Vec<GlobalDef>,
    pub table: Vec<u32>,
    pub memory_pages: u32,
    pub exports: BTreeMap<String, u32>,
    /// Source line -> every instruction attributed to it.
    pub line_table: BTreeMap<u32, Vec<CodeOffset>>,
}

impl SourceModule {
    /// Rebuilds `line_table` from the instructions' source lines.
    pub fn rebuild_line_table(&mut self) {
        let mut table: BTreeMap<u32, Vec<CodeOffset>> = BTreeMap::new();
        for (fi, f) in self.funcs.iter().enumerate() {
            for (off, ins) in f.body.iter().enumerate() {
                table
                    .entry(ins.src_line)
                    .or_default()
                    .push(CodeOffset::new(fi as u32, off as u32));
            }
        }
        self.line_table = table;
    }

    pub fn func(&self, index: u32) -> Option<&FuncDef> {
        self.funcs.get(index as usize)
    }

    pub fn sig(&self, func: u32) -> Option<&TypeSig> {
        self.func(func).and_then(|f| self.types.get(f.type_index as usize))
    }

    pub fn func_index(&self, name: &str) -> Option<u32> {
        let name = name.strip_prefix('$').unwrap_or(name);
        self.funcs
            .iter()
            .position(|f| f.name.as_deref() == Some(name))
            .map(|i| i as u32)
    }

    pub fn func_name(&self, index: u32) -> String {
        match self.func(index).and_then(|f| f.name.as_deref()) {
            Some(n) => format!("${n}"),
            None => format!("func{index}"),
        }
    }

    pub fn global_index(&self, name: &str) -> Option<u32> {
        let name = name.strip_prefix('$').unwrap_or(name);
        self.globals
            .iter()
            .position(|g| g.name.as_deref() == Some(name))
            .map(|i| i as u32)
    }

    pub fn main_index(&self) -> Option<u32> {
        self.exports.get("main").copied()
    }

    pub fn instr(&self, at: CodeOffset) -> Option<&Instr> {
        self.func(at.func)?.body.get(at.offset as usize)
    }

    /// Source line of the instruction at `at`.
    pub fn line_of(&self, at: CodeOffset) -> Option<u32> {
        self.instr(at).map(|i| i.src_line)
    }

    /// Number of locals of a frame of `func`: parameters then declared locals.
    pub fn frame_local_kinds(&self, func: u32) -> Option<Vec<ValueKind>> {
        let f = self.func(func)?;
        let sig = self.types.get(f.type_index as usize)?;
        let mut kinds = sig.params.clone();
        kinds.extend_from_slice(&f.locals);
        Some(kinds)
    }

    /// A copy with every source line zeroed, for comparing modules that came
    /// from differently laid out text.
    pub fn without_lines(&self) -> SourceModule {
        let mut m = self.clone();
        for f in &mut m.funcs {
            for ins in &mut f.body {
                ins.src_line = 0;
            }
        }
        m.line_table.clear();
        m
    }
}
