//! Random well-typed, terminating WAT programs. Defined functions only call
//! lower-numbered ones and loops never branch back, so every program halts or
//! traps.

use oot_core::vm::PrimitiveTable;
use oot_core::{TypeSig, Value, ValueKind};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ValueKind::{F32, I32, I64};

const KINDS: [ValueKind; 3] = [I32, I64, F32];

struct Sig {
    params: Vec<ValueKind>,
    result: Option<ValueKind>,
}

/// Imports a generated program may use, with their bindings.
const IMPORTS: [(&str, &[ValueKind], Option<ValueKind>); 3] =
    [("h_i32", &[I32], Some(I32)), ("h_f32", &[], Some(F32)), ("h_void", &[I32], None)];

pub fn primitives() -> PrimitiveTable {
    let mut t = PrimitiveTable::new();
    t.insert("env", "h_i32", TypeSig::new(vec![I32], vec![I32]), |a| {
        Ok(Some(Value::I32(a[0].as_i32().unwrap().wrapping_mul(3))))
    });
    t.insert("env", "h_f32", TypeSig::new(vec![], vec![F32]), |_| Ok(Some(Value::f32(1.5))));
    t.insert("env", "h_void", TypeSig::new(vec![I32], vec![]), |_| Ok(None));
    t
}

fn name(k: ValueKind) -> &'static str {
    k.name()
}

pub struct Gen {
    rng: ChaCha8Rng,
    funcs: Vec<Sig>,
    globals: Vec<(ValueKind, bool)>,
    pages: u32,
    // Current function: parameter and local kinds.
    locals: Vec<ValueKind>,
}

impl Gen {
    fn pick_kind(&mut self) -> ValueKind {
        *KINDS.choose(&mut self.rng).unwrap()
    }

    fn konst(&mut self, k: ValueKind) -> String {
        match k {
            I32 => {
                let v: i32 = if self.rng.gen_bool(0.7) { self.rng.gen_range(-5..50) } else { self.rng.gen() };
                format!("(i32.const {v})")
            }
            I64 => {
                let v: i64 = if self.rng.gen_bool(0.7) { self.rng.gen_range(-5..50) } else { self.rng.gen() };
                format!("(i64.const {v})")
            }
            F32 => {
                let v: f32 = match self.rng.gen_range(0..4) {
                    0 => 0.0,
                    1 => -0.0,
                    2 => self.rng.gen_range(-100..100) as f32 / 4.0,
                    _ => self.rng.gen_range(-1.0e6f32..1.0e6),
                };
                format!("(f32.const {v:?})")
            }
            ValueKind::F64 => unreachable!(),
        }
    }

    fn addr(&mut self) -> String {
        let limit = self.pages * 65536;
        let a = if self.rng.gen_bool(0.05) { limit - 2 } else { self.rng.gen_range(0..limit.min(4096) - 4) };
        format!("(i32.const {a})")
    }

    fn callable(&self, result: Option<ValueKind>, below: usize) -> Vec<usize> {
        (0..below).filter(|f| self.funcs[*f].result == result).collect()
    }

    fn call(&mut self, f: usize, depth: u32) -> String {
        let params = self.funcs[f].params.clone();
        let args: Vec<String> = params.iter().map(|k| self.expr(*k, depth + 1)).collect();
        format!("(call {f} {})", args.join(" "))
    }

    fn expr(&mut self, k: ValueKind, depth: u32) -> String {
        let below = self.funcs.len();
        let leaf = depth >= 3 || self.rng.gen_bool(0.25);
        let locals: Vec<usize> = (0..self.locals.len()).filter(|i| self.locals[*i] == k).collect();
        let globals: Vec<usize> = (0..self.globals.len()).filter(|i| self.globals[*i].0 == k).collect();
        if leaf {
            return match self.rng.gen_range(0..3) {
                0 if !locals.is_empty() => format!("(local.get {})", locals.choose(&mut self.rng).unwrap()),
                1 if !globals.is_empty() => format!("(global.get {})", globals.choose(&mut self.rng).unwrap()),
                _ => self.konst(k),
            };
        }
        let d = depth + 1;
        match self.rng.gen_range(0..7) {
            0 => {
                let callees = self.callable(Some(k), below);
                match callees.choose(&mut self.rng) {
                    Some(f) => self.call(*f, depth),
                    None => self.konst(k),
                }
            }
            1 => {
                let c = self.expr(I32, d);
                let (t, e) = (self.expr(k, d), self.expr(k, d));
                format!("(if (result {}) {c} (then {t}) (else {e}))", name(k))
            }
            2 => {
                let s = self.stmts(d, 2);
                let v = self.expr(k, d);
                format!("(block (result {}) {s} {v})", name(k))
            }
            3 if k == I32 && self.pages > 0 => {
                let a = self.addr();
                format!("(i32.load offset={} {a})", self.rng.gen_range(0..2) * 4)
            }
            _ => {
                let ops: &[&str] = match k {
                    I32 => &["i32.add", "i32.sub", "i32.eq", "i64.gt_s", "f32.eq"],
                    I64 => &["i64.sub"],
                    F32 => &["f32.add", "f32.div"],
                    ValueKind::F64 => unreachable!(),
                };
                let op = *ops.choose(&mut self.rng).unwrap();
                let arg = match op {
                    "i64.gt_s" => I64,
                    "f32.eq" => F32,
                    _ => k,
                };
                let (a, b) = (self.expr(arg, d), self.expr(arg, d));
                format!("({op} {a} {b})")
            }
        }
    }

    fn stmt(&mut self, depth: u32) -> String {
        let d = depth + 1;
        match self.rng.gen_range(0..9) {
            0 if !self.locals.is_empty() => {
                let i = self.rng.gen_range(0..self.locals.len());
                let v = self.expr(self.locals[i], d);
                format!("(local.set {i} {v})")
            }
            1 => {
                let muts: Vec<usize> = (0..self.globals.len()).filter(|i| self.globals[*i].1).collect();
                match muts.choose(&mut self.rng) {
                    Some(&g) => {
                        let v = self.expr(self.globals[g].0, d);
                        format!("(global.set {g} {v})")
                    }
                    None => "nop".into(),
                }
            }
            2 if self.pages > 0 => {
                let a = self.addr();
                let v = self.expr(I32, d);
                format!("(i32.store {a} {v})")
            }
            3 => {
                let k = self.pick_kind();
                format!("(drop {})", self.expr(k, d))
            }
            4 => {
                let callees = self.callable(None, self.funcs.len());
                match callees.choose(&mut self.rng) {
                    Some(f) => self.call(*f, depth),
                    None => "nop".into(),
                }
            }
            5 if depth < 3 => {
                let c = self.expr(I32, d);
                let t = self.stmts(d, 3);
                let e = self.stmts(d, 3);
                format!("(if {c} (then {t}) (else {e}))")
            }
            6 if depth < 3 => {
                let s = self.stmts(d, 3);
                // Only the innermost label: outer ones may be loops or carry results.
                let br = if self.rng.gen_bool(0.5) { " (br 0)" } else { "" };
                format!("(block {s}{br})")
            }
            7 if depth < 3 => {
                let s = self.stmts(d, 3);
                format!("(loop {s})")
            }
            _ => "nop".into(),
        }
    }

    fn stmts(&mut self, depth: u32, max: usize) -> String {
        let n = self.rng.gen_range(0..=max);
        (0..n).map(|_| self.stmt(depth)).collect::<Vec<_>>().join(" ")
    }
}

/// A random program text; `main` is the last function.
pub fn program(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_imports = rng.gen_range(0..=IMPORTS.len());
    let n_funcs = rng.gen_range(0..6);
    let pages = rng.gen_range(0..=2);
    let n_globals = rng.gen_range(0..4);
    let mut g = Gen { rng, funcs: Vec::new(), globals: Vec::new(), pages, locals: Vec::new() };

    let mut out = String::from("(module\n");
    for (sym, params, result) in &IMPORTS[..n_imports] {
        let p: Vec<&str> = params.iter().map(|k| name(*k)).collect();
        let r = result.map(|k| format!(" (result {})", name(k))).unwrap_or_default();
        out += &format!("  (import \"env\" \"{sym}\" (func ${sym} (param {}){r}))\n", p.join(" "));
        g.funcs.push(Sig { params: params.to_vec(), result: *result });
    }
    out += "  (export \"main\" (func $main))\n";
    if pages > 0 {
        out += &format!("  (memory {pages})\n");
    }
    for i in 0..n_globals {
        let k = g.pick_kind();
        let m = g.rng.gen_bool(0.7);
        g.globals.push((k, m));
        let ty = if m { format!("(mut {})", name(k)) } else { name(k).to_string() };
        let init = g.konst(k);
        out += &format!("  (global $g{i} {ty} {init})\n");
    }

    let mut bodies = Vec::new();
    for i in 0..=n_funcs {
        let is_main = i == n_funcs;
        let np = if is_main { 0 } else { g.rng.gen_range(0..3) };
        let params: Vec<ValueKind> = (0..np).map(|_| g.pick_kind()).collect();
        let result = if is_main || g.rng.gen_bool(0.3) { None } else { Some(g.pick_kind()) };
        let nl = g.rng.gen_range(0..3);
        let locals: Vec<ValueKind> = (0..nl).map(|_| g.pick_kind()).collect();
        g.locals = params.iter().chain(&locals).copied().collect();
        let mut body = g.stmts(0, if is_main { 12 } else { 6 });
        if let Some(k) = result {
            body += " ";
            body += &g.expr(k, 0);
        }
        let fname = if is_main { "$main".to_string() } else { format!("$f{i}") };
        let p = if params.is_empty() {
            String::new()
        } else {
            format!(" (param {})", params.iter().map(|k| name(*k)).collect::<Vec<_>>().join(" "))
        };
        let r = result.map(|k| format!(" (result {})", name(k))).unwrap_or_default();
        let l = if locals.is_empty() {
            String::new()
        } else {
            format!(" (local {})", locals.iter().map(|k| name(*k)).collect::<Vec<_>>().join(" "))
        };
        bodies.push(format!("  (func {fname}{p}{r}{l}\n    {body})\n"));
        g.funcs.push(Sig { params, result });
    }

    let defined: Vec<usize> = (n_imports..g.funcs.len()).collect();
    if !defined.is_empty() && g.rng.gen_bool(0.6) {
        let n = g.rng.gen_range(1..=3);
        let elems: Vec<String> = (0..n).map(|_| defined.choose(&mut g.rng).unwrap().to_string()).collect();
        out += &format!("  (table funcref (elem {}))\n", elems.join(" "));
    }
    for b in bodies {
        out += &b;
    }
    out += ")\n";
    out
}

/// Random argument values for `kinds`.
pub fn args_for(rng: &mut impl Rng, kinds: &[ValueKind]) -> Vec<Value> {
    kinds
        .iter()
        .map(|k| match k {
            I32 => Value::I32(rng.gen_range(-3..20)),
            I64 => Value::I64(rng.gen_range(-3..20)),
            F32 => Value::f32(rng.gen_range(-8..8) as f32 / 2.0),
            ValueKind::F64 => Value::f64(rng.gen()),
        })
        .collect()
}

/// A value that is never of kind `k`.
pub fn other_kind(rng: &mut impl Rng, k: ValueKind) -> Value {
    let choices: Vec<ValueKind> = [I32, I64, F32, ValueKind::F64].into_iter().filter(|c| *c != k).collect();
    let k = *choices.choose(rng).unwrap();
    args_for(rng, &[k])[0]
}
