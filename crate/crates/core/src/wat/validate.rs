//! Abstract stack simulation over lowered bodies.

use std::fmt;

use crate::module::{CodeOffset, Op, SourceModule};
use crate::value::ValueKind;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    /// `None` for module-level findings.
    pub at: Option<CodeOffset>,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.at {
            Some(at) => write!(f, "{at}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    fn module(&mut self, message: impl Into<String>) {
        self.findings.push(Finding { at: None, message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, finding) in self.findings.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{finding}")?;
        }
        Ok(())
    }
}

pub const IMMUTABLE_GLOBAL_WRITE: &str = "immutable global write";
pub const KIND_MISMATCH: &str = "operand kind mismatch";

pub fn validate_module(m: &SourceModule) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, t) in m.types.iter().enumerate() {
        if t.results.len() > 1 {
            report.module(format!("type {i} has more than one result"));
        }
    }
    for (i, g) in m.globals.iter().enumerate() {
        if g.init.kind() != g.kind {
            report.module(format!("global {i} initializer kind mismatch"));
        }
    }
    for (slot, f) in m.table.iter().enumerate() {
        if *f as usize >= m.funcs.len() {
            report.module(format!("table entry {slot} out of range"));
        }
    }
    for (name, f) in &m.exports {
        if *f as usize >= m.funcs.len() {
            report.module(format!("export \"{name}\" out of range"));
        }
    }
    for (fi, f) in m.funcs.iter().enumerate() {
        if f.type_index as usize >= m.types.len() {
            report.module(format!("function {fi} type index out of range"));
            continue;
        }
        if f.is_import() {
            if !f.body.is_empty() || !f.locals.is_empty() {
                report.module(format!("import {fi} has a body"));
            }
            continue;
        }
        FuncChecker::new(m, fi as u32, &mut report).run();
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ctl {
    Func,
    Block,
    Loop,
    If { has_else: bool },
}

struct CtlFrame {
    kind: Ctl,
    result: Option<ValueKind>,
    height: usize,
    unreachable: bool,
}

struct FuncChecker<'a> {
    m: &'a SourceModule,
    func: u32,
    report: &'a mut ValidationReport,
    locals: Vec<ValueKind>,
    stack: Vec<ValueKind>,
    ctl: Vec<CtlFrame>,
    pc: u32,
}

impl<'a> FuncChecker<'a> {
    fn new(m: &'a SourceModule, func: u32, report: &'a mut ValidationReport) -> Self {
        let locals = m.frame_local_kinds(func).unwrap_or_default();
        Self { m, func, report, locals, stack: Vec::new(), ctl: Vec::new(), pc: 0 }
    }

    fn finding(&mut self, message: impl Into<String>) {
        self.report.findings.push(Finding { at: Some(CodeOffset::new(self.func, self.pc)), message: message.into() });
    }

    /// Pops one operand; `None` means any kind (unreachable code).
    fn pop(&mut self) -> Option<ValueKind> {
        let frame = self.ctl.last().expect("control frame");
        if self.stack.len() <= frame.height {
            if !frame.unreachable {
                self.finding("stack underflow");
            }
            return None;
        }
        self.stack.pop()
    }

    fn pop_expect(&mut self, want: ValueKind) {
        if let Some(k) = self.pop() {
            if k != want {
                self.finding(KIND_MISMATCH);
            }
        }
    }

    fn mark_unreachable(&mut self) {
        let frame = self.ctl.last_mut().expect("control frame");
        self.stack.truncate(frame.height);
        frame.unreachable = true;
    }

    /// Checks the operands a branch to `frame` must provide.
    fn label_values(&mut self, kind: Ctl, result: Option<ValueKind>) -> (u32, Vec<ValueKind>) {
        let values: Vec<ValueKind> = if kind == Ctl::Loop { vec![] } else { result.into_iter().collect() };
        (values.len() as u32, values)
    }

    fn end_frame(&mut self) {
        let frame = self.ctl.last().expect("control frame");
        let (result, height, unreachable) = (frame.result, frame.height, frame.unreachable);
        if let Some(r) = result {
            match self.pop() {
                Some(k) if k != r => self.finding(KIND_MISMATCH),
                None if !unreachable => {}
                _ => {}
            }
        }
        if self.stack.len() > height {
            self.finding("values left on stack at block end");
            self.stack.truncate(height);
        }
    }

    fn run(mut self) {
        let f = &self.m.funcs[self.func as usize];
        let sig = self.m.types[f.type_index as usize].clone();
        let body = &f.body;
        if body.last().map(|i| i.op) != Some(Op::End) {
            self.finding("body must end with end");
            return;
        }
        self.ctl.push(CtlFrame { kind: Ctl::Func, result: sig.result(), height: 0, unreachable: false });
        let last = body.len() - 1;
        for (off, ins) in body.iter().enumerate() {
            self.pc = off as u32;
            if self.ctl.is_empty() {
                self.finding("instruction after function end");
                break;
            }
            match ins.op {
                Op::Nop => {}
                Op::Drop => {
                    self.pop();
                }
                Op::Return => {
                    if let Some(r) = sig.result() {
                        self.pop_expect(r);
                    }
                    self.mark_unreachable();
                }
                Op::I32Const(_) => self.stack.push(ValueKind::I32),
                Op::I64Const(_) => self.stack.push(ValueKind::I64),
                Op::F32Const(_) => self.stack.push(ValueKind::F32),
                Op::I32Add | Op::I32Sub | Op::I32Eq => {
                    self.pop_expect(ValueKind::I32);
                    self.pop_expect(ValueKind::I32);
                    self.stack.push(ValueKind::I32);
                }
                Op::I64Sub => {
                    self.pop_expect(ValueKind::I64);
                    self.pop_expect(ValueKind::I64);
                    self.stack.push(ValueKind::I64);
                }
                Op::I64GtS => {
                    self.pop_expect(ValueKind::I64);
                    self.pop_expect(ValueKind::I64);
                    self.stack.push(ValueKind::I32);
                }
                Op::F32Add | Op::F32Div => {
                    self.pop_expect(ValueKind::F32);
                    self.pop_expect(ValueKind::F32);
                    self.stack.push(ValueKind::F32);
                }
                Op::F32Eq => {
                    self.pop_expect(ValueKind::F32);
                    self.pop_expect(ValueKind::F32);
                    self.stack.push(ValueKind::I32);
                }
                Op::LocalGet(i) => match self.locals.get(i as usize).copied() {
                    Some(k) => self.stack.push(k),
                    None => self.finding("local index out of range"),
                },
                Op::LocalSet(i) => match self.locals.get(i as usize).copied() {
                    Some(k) => self.pop_expect(k),
                    None => self.finding("local index out of range"),
                },
                Op::GlobalGet(i) => match self.m.globals.get(i as usize) {
                    Some(g) => self.stack.push(g.kind),
                    None => self.finding("global index out of range"),
                },
                Op::GlobalSet(i) => match self.m.globals.get(i as usize).map(|g| (g.kind, g.mutable)) {
                    Some((k, mutable)) => {
                        if !mutable {
                            self.finding(IMMUTABLE_GLOBAL_WRITE);
                        }
                        self.pop_expect(k);
                    }
                    None => self.finding("global index out of range"),
                },
                Op::I32Load(_) => {
                    if self.m.memory_pages == 0 {
                        self.finding("memory access without memory");
                    }
                    self.pop_expect(ValueKind::I32);
                    self.stack.push(ValueKind::I32);
                }
                Op::I32Store(_) => {
                    if self.m.memory_pages == 0 {
                        self.finding("memory access without memory");
                    }
                    self.pop_expect(ValueKind::I32);
                    self.pop_expect(ValueKind::I32);
                }
                Op::Call(callee) => match self.m.sig(callee).cloned() {
                    Some(csig) => {
                        for p in csig.params.iter().rev() {
                            self.pop_expect(*p);
                        }
                        self.stack.extend(csig.results.iter().copied());
                    }
                    None => self.finding("call target out of range"),
                },
                Op::Block { result, end } => {
                    if body.get(end as usize).map(|i| i.op) != Some(Op::End) {
                        self.finding("block end target is not an end");
                    }
                    self.ctl.push(CtlFrame { kind: Ctl::Block, result, height: self.stack.len(), unreachable: false });
                }
                Op::Loop { result } => {
                    self.ctl.push(CtlFrame { kind: Ctl::Loop, result, height: self.stack.len(), unreachable: false });
                }
                Op::If { result, else_pc, end } => {
                    self.pop_expect(ValueKind::I32);
                    if body.get(end as usize).map(|i| i.op) != Some(Op::End) {
                        self.finding("if end target is not an end");
                    }
                    let else_ok = else_pc == end + 1
                        || matches!(body.get(else_pc as usize - 1).map(|i| i.op), Some(Op::Else { end: e }) if e == end);
                    if !else_ok {
                        self.finding("if else target is inconsistent");
                    }
                    self.ctl.push(CtlFrame { kind: Ctl::If { has_else: false }, result, height: self.stack.len(), unreachable: false });
                }
                Op::Else { .. } => {
                    let is_if = matches!(self.ctl.last().map(|c| c.kind), Some(Ctl::If { has_else: false }));
                    if !is_if {
                        self.finding("else without if");
                        continue;
                    }
                    self.end_frame();
                    let frame = self.ctl.last_mut().unwrap();
                    frame.kind = Ctl::If { has_else: true };
                    frame.unreachable = false;
                    let h = frame.height;
                    self.stack.truncate(h);
                }
                Op::End => {
                    let kind = self.ctl.last().unwrap().kind;
                    if off == last && kind != Ctl::Func {
                        self.finding("unclosed block at function end");
                    }
                    if off != last && kind == Ctl::Func {
                        self.finding("end closes the function early");
                    }
                    if let Ctl::If { has_else: false } = kind {
                        if self.ctl.last().unwrap().result.is_some() {
                            self.finding("if with a result needs an else arm");
                        }
                    }
                    self.end_frame();
                    let frame = self.ctl.pop().unwrap();
                    if let Some(r) = frame.result {
                        self.stack.push(r);
                    }
                    if off == last {
                        // Function result is left on the stack.
                        continue;
                    }
                }
                Op::Br { depth, target, arity, height } => {
                    let Some(li) = self.ctl.len().checked_sub(1 + depth as usize) else {
                        self.finding("branch depth out of range");
                        continue;
                    };
                    let (kind, result, lheight) = (self.ctl[li].kind, self.ctl[li].result, self.ctl[li].height);
                    let (want_arity, values) = self.label_values(kind, result);
                    for v in values.iter().rev() {
                        self.pop_expect(*v);
                    }
                    if arity != want_arity || height as usize != lheight {
                        self.finding("branch unwind metadata mismatch");
                    }
                    if (target as usize) >= body.len() {
                        self.finding("branch target out of range");
                    }
                    self.mark_unreachable();
                }
            }
        }
        if !self.ctl.is_empty() {
            self.finding("unclosed block at function end");
        }
    }
}
