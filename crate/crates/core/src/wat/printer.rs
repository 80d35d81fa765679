use std::fmt::Write;

use crate::module::{Op, SourceModule, TypeSig};
use crate::value::{Value, ValueKind};

fn sig_text(sig: &TypeSig) -> String {
    let mut s = String::from("(func");
    if !sig.params.is_empty() {
        s.push_str(" (param");
        for p in &sig.params {
            let _ = write!(s, " {p}");
        }
        s.push(')');
    }
    if !sig.results.is_empty() {
        s.push_str(" (result");
        for r in &sig.results {
            let _ = write!(s, " {r}");
        }
        s.push(')');
    }
    s.push(')');
    s
}

fn f32_text(bits: u32) -> String {
    let v = f32::from_bits(bits);
    if v.is_nan() {
        if v.is_sign_negative() { "-nan".into() } else { "nan".into() }
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        // Debug formatting round-trips exactly.
        format!("{v:?}")
    }
}

fn result_text(r: Option<ValueKind>) -> String {
    r.map(|k| format!(" (result {k})")).unwrap_or_default()
}

fn const_text(v: &Value) -> String {
    match *v {
        Value::I32(x) => format!("(i32.const {x})"),
        Value::I64(x) => format!("(i64.const {x})"),
        Value::F32(b) => format!("(f32.const {})", f32_text(b)),
        Value::F64(b) => format!("(f64.const {:?})", f64::from_bits(b)),
    }
}

/// Prints the module in unfolded form, one instruction per line. Re-parsing
/// the output yields the same module up to source lines.
pub fn print_module(m: &SourceModule) -> String {
    let mut out = String::from("(module\n");
    for t in &m.types {
        let _ = writeln!(out, "  (type {})", sig_text(t));
    }
    for (i, f) in m.funcs.iter().enumerate() {
        if let Some((ns, name)) = &f.import {
            let _ = writeln!(out, "  (import {ns:?} {name:?} (func {} (type {})))", func_label(m, i), f.type_index);
        }
    }
    if m.memory_pages > 0 {
        let _ = writeln!(out, "  (memory {})", m.memory_pages);
    }
    if !m.table.is_empty() {
        let entries: Vec<String> = m.table.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "  (table funcref (elem {}))", entries.join(" "));
    }
    for g in &m.globals {
        let name = g.name.as_ref().map(|n| format!(" ${n}")).unwrap_or_default();
        let ty = if g.mutable { format!("(mut {})", g.kind) } else { g.kind.to_string() };
        let _ = writeln!(out, "  (global{name} {ty} {})", const_text(&g.init));
    }
    for (name, idx) in &m.exports {
        let _ = writeln!(out, "  (export {name:?} (func {idx}))");
    }
    for (i, f) in m.funcs.iter().enumerate() {
        if f.is_import() {
            continue;
        }
        let _ = write!(out, "  (func {} (type {})", func_label(m, i), f.type_index);
        if !f.locals.is_empty() {
            out.push_str(" (local");
            for l in &f.locals {
                let _ = write!(out, " {l}");
            }
            out.push(')');
        }
        out.push('\n');
        let mut indent = 2usize;
        // The trailing End closes the function itself.
        let body = &f.body[..f.body.len().saturating_sub(1)];
        for ins in body {
            if matches!(ins.op, Op::End | Op::Else { .. }) {
                indent = indent.saturating_sub(1);
            }
            let pad = "  ".repeat(indent);
            let text = match ins.op {
                Op::I32Const(v) => format!("i32.const {v}"),
                Op::I64Const(v) => format!("i64.const {v}"),
                Op::F32Const(b) => format!("f32.const {}", f32_text(b)),
                Op::LocalGet(i) => format!("local.get {i}"),
                Op::LocalSet(i) => format!("local.set {i}"),
                Op::GlobalGet(i) => format!("global.get {i}"),
                Op::GlobalSet(i) => format!("global.set {i}"),
                Op::I32Load(o) => format!("i32.load offset={o}"),
                Op::I32Store(o) => format!("i32.store offset={o}"),
                Op::Call(f) => format!("call {f}"),
                Op::Block { result, .. } => format!("block{}", result_text(result)),
                Op::Loop { result } => format!("loop{}", result_text(result)),
                Op::If { result, .. } => format!("if{}", result_text(result)),
                Op::Br { depth, .. } => format!("br {depth}"),
                other => other.mnemonic().to_string(),
            };
            let _ = writeln!(out, "{pad}{text}");
            if matches!(ins.op, Op::Block { .. } | Op::Loop { .. } | Op::If { .. } | Op::Else { .. }) {
                indent += 1;
            }
        }
        out.push_str("  )\n");
    }
    out.push_str(")\n");
    out
}

fn func_label(m: &SourceModule, i: usize) -> String {
    match &m.funcs[i].name {
        Some(n) => format!("${n}"),
        None => String::new(),
    }
}
