//! WAT-subset parser: reads s-expressions, resolves names and lowers
//! structured control to flat bodies with absolute jump targets.

use std::collections::{BTreeMap, HashMap};

use super::sexpr::{read_all, SExpr};
use super::WatError;
use crate::module::{FuncDef, GlobalDef, Instr, Op, SourceModule, TypeSig};
use crate::value::{Value, ValueKind};

/// Parses WAT-subset source into a resolved module.
pub fn parse_module(text: &str) -> Result<SourceModule, WatError> {
    let top = read_all(text)?;
    let module = match top.as_slice() {
        [m @ SExpr::List { .. }] if m.head() == Some("module") => m,
        [] => return Err(WatError::parse(1, "expected (module ...)")),
        [other, ..] if other.head() != Some("module") => {
            return Err(WatError::parse(other.line(), "expected (module ...)"))
        }
        [_, extra, ..] => return Err(WatError::parse(extra.line(), "text after module")),
        _ => unreachable!(),
    };
    let SExpr::List { items, .. } = module else { unreachable!() };
    let mut fields = &items[1..];
    if let Some(SExpr::Atom { text, .. }) = fields.first() {
        if text.starts_with('$') {
            fields = &fields[1..];
        }
    }
    ModuleBuilder::default().build(fields)
}

struct PendingFunc<'a> {
    name: Option<String>,
    line: u32,
    /// Items after the optional `$id` (type use, params, locals, body).
    items: &'a [SExpr],
    close_line: u32,
    import: Option<(String, String)>,
}

struct PendingGlobal<'a> {
    def: &'a SExpr,
}

#[derive(Default)]
struct ModuleBuilder {
    types: Vec<TypeSig>,
    type_names: HashMap<String, u32>,
    func_names: HashMap<String, u32>,
    global_names: HashMap<String, u32>,
}

impl ModuleBuilder {
    fn build(mut self, fields: &[SExpr]) -> Result<SourceModule, WatError> {
        // Types first so imports may reference types declared further down.
        for f in fields {
            if f.head() == Some("type") {
                self.type_decl(f)?;
            }
        }

        let mut funcs: Vec<PendingFunc<'_>> = Vec::new();
        let mut globals: Vec<PendingGlobal<'_>> = Vec::new();
        let mut exports: Vec<&SExpr> = Vec::new();
        let mut tables: Vec<&SExpr> = Vec::new();
        let mut memory_pages: Option<u32> = None;
        let mut seen_definition = false;

        for f in fields {
            let SExpr::List { items, line, close_line } = f else {
                return Err(WatError::parse(f.line(), "expected module field"));
            };
            match f.head() {
                Some("type") => {}
                Some("import") => {
                    if seen_definition {
                        return Err(WatError::parse(*line, "import after function definition"));
                    }
                    let (ns, name) = match (items.get(1), items.get(2)) {
                        (Some(SExpr::Str { text: a, .. }), Some(SExpr::Str { text: b, .. })) => {
                            (a.clone(), b.clone())
                        }
                        _ => return Err(WatError::parse(*line, "import needs two name strings")),
                    };
                    let desc = items.get(3).ok_or_else(|| WatError::parse(*line, "import needs a descriptor"))?;
                    if desc.head() != Some("func") {
                        return Err(WatError::parse(desc.line(), "only function imports are supported"));
                    }
                    let SExpr::List { items: ditems, close_line: dclose, .. } = desc else { unreachable!() };
                    let (name_sym, rest) = split_id(&ditems[1..]);
                    funcs.push(PendingFunc {
                        name: name_sym,
                        line: desc.line(),
                        items: rest,
                        close_line: *dclose,
                        import: Some((ns, name)),
                    });
                }
                Some("func") => {
                    seen_definition = true;
                    let (name_sym, rest) = split_id(&items[1..]);
                    funcs.push(PendingFunc { name: name_sym, line: *line, items: rest, close_line: *close_line, import: None });
                }
                Some("global") => globals.push(PendingGlobal { def: f }),
                Some("export") => exports.push(f),
                Some("table") => tables.push(f),
                Some("memory") => {
                    if memory_pages.is_some() {
                        return Err(WatError::parse(*line, "multiple memories"));
                    }
                    let (_, rest) = split_id(&items[1..]);
                    let min = rest
                        .first()
                        .and_then(SExpr::atom)
                        .ok_or_else(|| WatError::parse(*line, "memory needs a page count"))?;
                    let pages = parse_u32(min, *line)?;
                    if let Some(max) = rest.get(1) {
                        let max = parse_u32(max.atom().unwrap_or(""), *line)?;
                        if max < pages {
                            return Err(WatError::parse(*line, "memory max below min"));
                        }
                    }
                    if rest.len() > 2 {
                        return Err(WatError::parse(*line, "unexpected memory field"));
                    }
                    memory_pages = Some(pages);
                }
                Some(other) => return Err(WatError::parse(*line, format!("unsupported module field '{other}'"))),
                None => return Err(WatError::parse(*line, "expected module field")),
            }
        }

        // Function names across the whole index space.
        for (i, pf) in funcs.iter().enumerate() {
            if let Some(n) = &pf.name {
                if self.func_names.insert(n.clone(), i as u32).is_some() {
                    return Err(WatError::parse(pf.line, format!("duplicate function ${n}")));
                }
            }
        }

        let mut module = SourceModule { memory_pages: memory_pages.unwrap_or(0), ..Default::default() };

        for g in &globals {
            let def = self.global_decl(g.def)?;
            if let Some(n) = &def.name {
                if self.global_names.insert(n.clone(), module.globals.len() as u32).is_some() {
                    return Err(WatError::parse(g.def.line(), format!("duplicate global ${n}")));
                }
            }
            module.globals.push(def);
        }

        // Signatures before bodies: calls need callee arity.
        let mut sigs_and_params = Vec::with_capacity(funcs.len());
        for pf in &funcs {
            sigs_and_params.push(self.type_use(pf.items, pf.line)?);
        }
        let func_sigs: Vec<TypeSig> =
            sigs_and_params.iter().map(|(ti, _, _)| self.types[*ti as usize].clone()).collect();

        for (i, pf) in funcs.iter().enumerate() {
            let (type_index, param_names, consumed) = &sigs_and_params[i];
            let sig = &self.types[*type_index as usize];
            let rest = &pf.items[*consumed..];
            if pf.import.is_some() {
                if let Some(extra) = rest.first() {
                    return Err(WatError::parse(extra.line(), "imported function cannot have a body"));
                }
                module.funcs.push(FuncDef {
                    name: pf.name.clone(),
                    type_index: *type_index,
                    locals: Vec::new(),
                    body: Vec::new(),
                    import: pf.import.clone(),
                });
                continue;
            }
            let mut local_names: HashMap<String, u32> = HashMap::new();
            for (idx, n) in param_names.iter().enumerate() {
                if let Some(n) = n {
                    local_names.insert(n.clone(), idx as u32);
                }
            }
            let mut locals = Vec::new();
            let mut body_start = 0;
            for item in rest {
                if item.head() != Some("local") {
                    break;
                }
                let SExpr::List { items: litems, line, .. } = item else { unreachable!() };
                let (lname, kinds) = split_id(&litems[1..]);
                if lname.is_some() && kinds.len() != 1 {
                    return Err(WatError::parse(*line, "named local declares exactly one kind"));
                }
                for k in kinds {
                    let kind = parse_kind(k)?;
                    if let Some(n) = &lname {
                        local_names.insert(n.clone(), (sig.params.len() + locals.len()) as u32);
                    }
                    locals.push(kind);
                }
                body_start += 1;
            }
            let mut lower = Lower {
                b: &self,
                func_sigs: &func_sigs,
                globals: module.globals.len() as u32,
                local_names,
                nlocals: (sig.params.len() + locals.len()) as u32,
                body: Vec::new(),
                labels: vec![Label::func(sig.result())],
                height: 0,
            };
            lower.seq(&rest[body_start..])?;
            let end_idx = lower.body.len() as u32;
            lower.body.push(Instr { op: Op::End, src_line: pf.close_line });
            let func_label = lower.labels.pop().expect("function label");
            if !lower.labels.is_empty() {
                return Err(WatError::parse(pf.close_line, "missing 'end'"));
            }
            for at in func_label.pending {
                lower.patch(at, end_idx);
            }
            module.funcs.push(FuncDef {
                name: pf.name.clone(),
                type_index: *type_index,
                locals,
                body: lower.body,
                import: None,
            });
        }

        for t in tables {
            if !module.table.is_empty() {
                return Err(WatError::parse(t.line(), "multiple tables"));
            }
            module.table = self.table_decl(t, func_sigs.len())?;
        }

        let mut export_map = BTreeMap::new();
        for e in exports {
            let SExpr::List { items, line, .. } = e else { unreachable!() };
            let name = match items.get(1) {
                Some(SExpr::Str { text, .. }) => text.clone(),
                _ => return Err(WatError::parse(*line, "export needs a name string")),
            };
            let desc = items.get(2).filter(|d| d.head() == Some("func")).ok_or_else(|| {
                WatError::parse(*line, "only function exports are supported")
            })?;
            let SExpr::List { items: ditems, .. } = desc else { unreachable!() };
            let target = ditems.get(1).and_then(SExpr::atom).ok_or_else(|| WatError::parse(*line, "export needs a function"))?;
            let idx = self.func_ref(target, *line, func_sigs.len())?;
            if export_map.insert(name.clone(), idx).is_some() {
                return Err(WatError::parse(*line, format!("duplicate export \"{name}\"")));
            }
        }
        module.exports = export_map;
        module.types = self.types;
        module.rebuild_line_table();
        Ok(module)
    }

    fn type_decl(&mut self, f: &SExpr) -> Result<(), WatError> {
        let SExpr::List { items, line, .. } = f else { unreachable!() };
        let (name, rest) = split_id(&items[1..]);
        let func = match rest {
            [func] if func.head() == Some("func") => func,
            _ => return Err(WatError::parse(*line, "type needs a (func ...) signature")),
        };
        let SExpr::List { items: fitems, .. } = func else { unreachable!() };
        let mut params = Vec::new();
        let mut results = Vec::new();
        for it in &fitems[1..] {
            match it.head() {
                Some("param") => params.extend(param_list(it)?.into_iter().map(|(_, k)| k)),
                Some("result") => results.extend(result_list(it)?),
                _ => return Err(WatError::parse(it.line(), "expected param or result")),
            }
        }
        if results.len() > 1 {
            return Err(WatError::parse(*line, "at most one result is supported"));
        }
        if let Some(n) = name {
            if self.type_names.insert(n.clone(), self.types.len() as u32).is_some() {
                return Err(WatError::parse(*line, format!("duplicate type ${n}")));
            }
        }
        self.types.push(TypeSig::new(params, results));
        Ok(())
    }

    /// Returns (type index, parameter names, items consumed).
    fn type_use(&mut self, items: &[SExpr], line: u32) -> Result<(u32, Vec<Option<String>>, usize), WatError> {
        let mut consumed = 0;
        let mut explicit = None;
        if let Some(t) = items.first().filter(|t| t.head() == Some("type")) {
            let SExpr::List { items: titems, .. } = t else { unreachable!() };
            let r = match titems.as_slice() {
                [_, r] => r.atom().unwrap_or(""),
                _ => return Err(WatError::parse(t.line(), "malformed type use")),
            };
            explicit = Some(self.type_ref(r, t.line())?);
            consumed = 1;
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut results = Vec::new();
        let mut inline = false;
        for it in &items[consumed..] {
            match it.head() {
                Some("param") => {
                    inline = true;
                    for (n, k) in param_list(it)? {
                        names.push(n);
                        params.push(k);
                    }
                }
                Some("result") => {
                    inline = true;
                    results.extend(result_list(it)?);
                }
                _ => break,
            }
            consumed += 1;
        }
        if results.len() > 1 {
            return Err(WatError::parse(line, "at most one result is supported"));
        }
        let sig = TypeSig::new(params, results);
        let index = match explicit {
            Some(ti) => {
                if inline && self.types[ti as usize] != sig {
                    return Err(WatError::parse(line, "inline signature disagrees with type use"));
                }
                ti
            }
            None => match self.types.iter().position(|t| *t == sig) {
                Some(i) => i as u32,
                None => {
                    self.types.push(sig);
                    (self.types.len() - 1) as u32
                }
            },
        };
        let nparams = self.types[index as usize].params.len();
        names.resize(nparams, None);
        Ok((index, names, consumed))
    }

    fn global_decl(&self, f: &SExpr) -> Result<GlobalDef, WatError> {
        let SExpr::List { items, line, .. } = f else { unreachable!() };
        let (name, rest) = split_id(&items[1..]);
        let (kind, mutable) = match rest.first() {
            Some(SExpr::Atom { text, .. }) => (kind_of(text, *line)?, false),
            Some(m) if m.head() == Some("mut") => {
                let SExpr::List { items: mitems, .. } = m else { unreachable!() };
                match mitems.as_slice() {
                    [_, k] => (parse_kind(k)?, true),
                    _ => return Err(WatError::parse(*line, "malformed (mut ...)")),
                }
            }
            _ => return Err(WatError::parse(*line, "global needs a type")),
        };
        let init = match rest.get(1..) {
            Some([init]) => init,
            _ => return Err(WatError::parse(*line, "global needs one constant initializer")),
        };
        let SExpr::List { items: iitems, .. } = init else {
            return Err(WatError::parse(init.line(), "global initializer must be a constant expression"));
        };
        let (op, imm) = match iitems.as_slice() {
            [SExpr::Atom { text: op, .. }, SExpr::Atom { text: imm, .. }] => (op.as_str(), imm.as_str()),
            _ => return Err(WatError::parse(init.line(), "global initializer must be a constant expression")),
        };
        let value = match op {
            "i32.const" => Value::I32(parse_i32(imm, *line)?),
            "i64.const" => Value::I64(parse_i64(imm, *line)?),
            "f32.const" => Value::f32(parse_f32(imm, *line)?),
            _ => return Err(WatError::parse(init.line(), format!("unsupported initializer '{op}'"))),
        };
        Ok(GlobalDef { name, kind, mutable, init: value })
    }

    fn table_decl(&self, t: &SExpr, nfuncs: usize) -> Result<Vec<u32>, WatError> {
        let SExpr::List { items, line, .. } = t else { unreachable!() };
        let (_, rest) = split_id(&items[1..]);
        match rest {
            [SExpr::Atom { text, .. }, elem] if text == "funcref" && elem.head() == Some("elem") => {
                let SExpr::List { items: eitems, .. } = elem else { unreachable!() };
                eitems[1..]
                    .iter()
                    .map(|e| {
                        let a = e.atom().ok_or_else(|| WatError::parse(e.line(), "elem entries are function references"))?;
                        self.func_ref(a, e.line(), nfuncs)
                    })
                    .collect()
            }
            [SExpr::Atom { text, .. }] if text == "funcref" => Ok(Vec::new()),
            _ => Err(WatError::parse(*line, "only (table funcref (elem ...)) is supported")),
        }
    }

    fn type_ref(&self, r: &str, line: u32) -> Result<u32, WatError> {
        if let Some(n) = r.strip_prefix('$') {
            return self.type_names.get(n).copied().ok_or_else(|| WatError::resolve(line, r));
        }
        let i = parse_u32(r, line)?;
        if (i as usize) < self.types.len() {
            Ok(i)
        } else {
            Err(WatError::resolve(line, r))
        }
    }

    fn func_ref(&self, r: &str, line: u32, nfuncs: usize) -> Result<u32, WatError> {
        if let Some(n) = r.strip_prefix('$') {
            return self.func_names.get(n).copied().ok_or_else(|| WatError::resolve(line, r));
        }
        let i = parse_u32(r, line)?;
        if (i as usize) < nfuncs {
            Ok(i)
        } else {
            Err(WatError::resolve(line, r))
        }
    }
}

fn split_id(items: &[SExpr]) -> (Option<String>, &[SExpr]) {
    match items.first() {
        Some(SExpr::Atom { text, .. }) if text.starts_with('$') => (Some(text[1..].to_string()), &items[1..]),
        _ => (None, items),
    }
}

fn kind_of(text: &str, line: u32) -> Result<ValueKind, WatError> {
    ValueKind::from_name(text).ok_or_else(|| WatError::parse(line, format!("unknown value type '{text}'")))
}

fn parse_kind(e: &SExpr) -> Result<ValueKind, WatError> {
    match e {
        SExpr::Atom { text, line } => kind_of(text, *line),
        other => Err(WatError::parse(other.line(), "expected a value type")),
    }
}

fn param_list(e: &SExpr) -> Result<Vec<(Option<String>, ValueKind)>, WatError> {
    let SExpr::List { items, line, .. } = e else { unreachable!() };
    let (name, kinds) = split_id(&items[1..]);
    if name.is_some() {
        if kinds.len() != 1 {
            return Err(WatError::parse(*line, "named param declares exactly one kind"));
        }
        return Ok(vec![(name, parse_kind(&kinds[0])?)]);
    }
    kinds.iter().map(|k| Ok((None, parse_kind(k)?))).collect()
}

fn result_list(e: &SExpr) -> Result<Vec<ValueKind>, WatError> {
    let SExpr::List { items, .. } = e else { unreachable!() };
    items[1..].iter().map(parse_kind).collect()
}

fn clean_number(text: &str) -> String {
    text.replace('_', "")
}

pub(crate) fn parse_u32(text: &str, line: u32) -> Result<u32, WatError> {
    let t = clean_number(text);
    let r = match t.strip_prefix("0x") {
        Some(h) => u32::from_str_radix(h, 16),
        None => t.parse(),
    };
    r.map_err(|_| WatError::parse(line, format!("expected an index, found '{text}'")))
}

fn parse_int(text: &str, line: u32, bits: u32) -> Result<i64, WatError> {
    let t = clean_number(text);
    let (neg, digits) = match t.strip_prefix('-') {
        Some(d) => (true, d),
        None => (false, t.strip_prefix('+').unwrap_or(&t)),
    };
    let magnitude = match digits.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => digits.parse::<u64>(),
    }
    .map_err(|_| WatError::parse(line, format!("malformed integer '{text}'")))?;
    let max_unsigned = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
    let min_mag = 1u64 << (bits - 1);
    if (!neg && magnitude > max_unsigned) || (neg && magnitude > min_mag) {
        return Err(WatError::parse(line, format!("integer out of range '{text}'")));
    }
    Ok(if neg { (magnitude as i64).wrapping_neg() } else { magnitude as i64 })
}

pub(crate) fn parse_i32(text: &str, line: u32) -> Result<i32, WatError> {
    parse_int(text, line, 32).map(|v| v as i32)
}

pub(crate) fn parse_i64(text: &str, line: u32) -> Result<i64, WatError> {
    parse_int(text, line, 64)
}

pub(crate) fn parse_f32(text: &str, line: u32) -> Result<f32, WatError> {
    let t = clean_number(text);
    match t.as_str() {
        "inf" | "+inf" => return Ok(f32::INFINITY),
        "-inf" => return Ok(f32::NEG_INFINITY),
        "nan" | "+nan" => return Ok(f32::NAN),
        "-nan" => return Ok(-f32::NAN),
        _ => {}
    }
    if t.contains("0x") || t.contains("nan:") {
        return Err(WatError::parse(line, format!("unsupported float literal '{text}'")));
    }
    t.parse::<f32>().map_err(|_| WatError::parse(line, format!("malformed float '{text}'")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LabelKind {
    Func,
    Block,
    Loop,
    If,
}

struct Label {
    name: Option<String>,
    kind: LabelKind,
    /// Offset of the opening marker.
    start: u32,
    /// Stack height (above frame base) at block entry.
    entry: u32,
    result: Option<ValueKind>,
    /// Branch instructions waiting for this label's end offset.
    pending: Vec<u32>,
    /// Opened with plain `block`/`loop`/`if` and closed by `end`.
    plain: bool,
    has_else: bool,
}

impl Label {
    fn func(result: Option<ValueKind>) -> Self {
        Label { name: None, kind: LabelKind::Func, start: 0, entry: 0, result, pending: Vec::new(), plain: false, has_else: false }
    }

    fn arity(&self) -> u32 {
        match self.kind {
            LabelKind::Loop => 0,
            _ => self.result.is_some() as u32,
        }
    }
}

/// Label name, result kind and the remaining items of a block opener.
type BlockHeader<'s> = (Option<String>, Option<ValueKind>, &'s [SExpr]);

struct Lower<'a> {
    b: &'a ModuleBuilder,
    func_sigs: &'a [TypeSig],
    globals: u32,
    local_names: HashMap<String, u32>,
    nlocals: u32,
    body: Vec<Instr>,
    labels: Vec<Label>,
    /// Abstract operand count above the frame base; only used to give
    /// branches their unwind height.
    height: u32,
}

impl Lower<'_> {
    fn seq(&mut self, items: &[SExpr]) -> Result<(), WatError> {
        let mut i = 0;
        while i < items.len() {
            match &items[i] {
                SExpr::Atom { .. } => i = self.plain(items, i)?,
                list @ SExpr::List { .. } => {
                    self.folded(list)?;
                    i += 1;
                }
                SExpr::Str { line, .. } => return Err(WatError::parse(*line, "unexpected string")),
            }
        }
        Ok(())
    }

    fn emit(&mut self, op: Op, line: u32) -> u32 {
        self.body.push(Instr { op, src_line: line });
        (self.body.len() - 1) as u32
    }

    fn pop(&mut self, n: u32) {
        let floor = self.labels.last().map(|l| l.entry).unwrap_or(0);
        self.height = self.height.saturating_sub(n).max(floor);
    }

    fn push(&mut self, n: u32) {
        self.height += n;
    }

    fn patch(&mut self, at: u32, target: u32) {
        if let Op::Br { target: t, .. } = &mut self.body[at as usize].op {
            *t = target;
        }
    }

    /// Parses optional `$label` and `(result t)` after a block opener.
    fn block_header<'s>(&self, items: &'s [SExpr], line: u32) -> Result<BlockHeader<'s>, WatError> {
        let (name, mut rest) = split_id(items);
        let mut result = None;
        while let Some(r) = rest.first().filter(|r| r.head() == Some("result")) {
            let kinds = result_list(r)?;
            if kinds.len() > 1 || (result.is_some() && !kinds.is_empty()) {
                return Err(WatError::parse(line, "at most one block result is supported"));
            }
            if let Some(k) = kinds.first() {
                result = Some(*k);
            }
            rest = &rest[1..];
        }
        Ok((name, result, rest))
    }

    fn open(&mut self, kind: LabelKind, name: Option<String>, result: Option<ValueKind>, line: u32, plain: bool) {
        if kind == LabelKind::If {
            self.pop(1);
        }
        let op = match kind {
            LabelKind::Block => Op::Block { result, end: 0 },
            LabelKind::Loop => Op::Loop { result },
            LabelKind::If => Op::If { result, else_pc: 0, end: 0 },
            LabelKind::Func => unreachable!(),
        };
        let start = self.emit(op, line);
        self.labels.push(Label { name, kind, start, entry: self.height, result, pending: Vec::new(), plain, has_else: false });
    }

    fn else_arm(&mut self, line: u32) -> Result<(), WatError> {
        let label = self.labels.last_mut().filter(|l| l.kind == LabelKind::If && !l.has_else).ok_or_else(|| WatError::parse(line, "'else' outside of 'if'"))?;
        label.has_else = true;
        let start = label.start as usize;
        let entry = label.entry;
        let else_at = self.emit(Op::Else { end: 0 }, line);
        if let Op::If { else_pc, .. } = &mut self.body[start].op {
            *else_pc = else_at + 1;
        }
        self.height = entry;
        Ok(())
    }

    fn close(&mut self, line: u32) -> Result<(), WatError> {
        if self.labels.len() <= 1 {
            return Err(WatError::parse(line, "'end' without open block"));
        }
        let label = self.labels.pop().unwrap();
        let end = self.emit(Op::End, line);
        match &mut self.body[label.start as usize].op {
            Op::Block { end: e, .. } => *e = end,
            Op::If { else_pc, end: e, .. } => {
                *e = end;
                if !label.has_else {
                    *else_pc = end + 1;
                }
            }
            _ => {}
        }
        if label.has_else {
            // Locate this if's Else marker: the last Else between start and end
            // at the same nesting, i.e. the one whose end is still unpatched.
            let else_pc = match self.body[label.start as usize].op {
                Op::If { else_pc, .. } => else_pc,
                _ => unreachable!(),
            };
            if let Op::Else { end: e } = &mut self.body[(else_pc - 1) as usize].op {
                *e = end;
            }
        }
        for at in &label.pending {
            self.patch(*at, end + 1);
        }
        self.height = label.entry + label.result.is_some() as u32;
        Ok(())
    }

    fn plain(&mut self, items: &[SExpr], i: usize) -> Result<usize, WatError> {
        let SExpr::Atom { text, line } = &items[i] else { unreachable!() };
        let line = *line;
        match text.as_str() {
            "block" | "loop" | "if" => {
                let kind = match text.as_str() {
                    "block" => LabelKind::Block,
                    "loop" => LabelKind::Loop,
                    _ => LabelKind::If,
                };
                // Header items are atoms/lists directly following the keyword.
                let mut j = i + 1;
                let mut name = None;
                if let Some(SExpr::Atom { text: t, .. }) = items.get(j) {
                    if let Some(n) = t.strip_prefix('$') {
                        name = Some(n.to_string());
                        j += 1;
                    }
                }
                let mut result = None;
                while let Some(r) = items.get(j).filter(|r| r.head() == Some("result")) {
                    let kinds = result_list(r)?;
                    if kinds.len() > 1 {
                        return Err(WatError::parse(line, "at most one block result is supported"));
                    }
                    if let Some(k) = kinds.first() {
                        result = Some(*k);
                    }
                    j += 1;
                }
                self.open(kind, name, result, line, true);
                Ok(j)
            }
            "else" => {
                if !self.labels.last().is_some_and(|l| l.plain) {
                    return Err(WatError::parse(line, "'else' outside of 'if'"));
                }
                self.else_arm(line)?;
                Ok(i + 1)
            }
            "end" => {
                if !self.labels.last().is_some_and(|l| l.plain) {
                    return Err(WatError::parse(line, "'end' without open block"));
                }
                self.close(line)?;
                Ok(i + 1)
            }
            "then" => Err(WatError::parse(line, "'then' outside of 'if'")),
            op => {
                let wants = immediate_count(op).ok_or_else(|| WatError::parse(line, format!("unsupported instruction '{op}'")))?;
                let mut imms: Vec<&str> = Vec::new();
                let mut j = i + 1;
                match wants {
                    Immediates::One => {
                        let a = items.get(j).and_then(SExpr::atom).ok_or_else(|| WatError::parse(line, format!("'{op}' needs an immediate")))?;
                        imms.push(a);
                        j += 1;
                    }
                    Immediates::MemArg => {
                        while let Some(a) = items.get(j).and_then(SExpr::atom).filter(|a| a.starts_with("offset=") || a.starts_with("align=")) {
                            imms.push(a);
                            j += 1;
                        }
                    }
                    Immediates::None => {}
                }
                self.simple(op, &imms, line)?;
                Ok(j)
            }
        }
    }

    fn folded(&mut self, list: &SExpr) -> Result<(), WatError> {
        let SExpr::List { items, line, close_line } = list else { unreachable!() };
        let (line, close_line) = (*line, *close_line);
        let head = items.first().and_then(SExpr::atom).ok_or_else(|| WatError::parse(line, "expected instruction"))?;
        match head {
            "block" | "loop" => {
                let kind = if head == "block" { LabelKind::Block } else { LabelKind::Loop };
                let (name, result, rest) = self.block_header(&items[1..], line)?;
                self.open(kind, name, result, line, false);
                self.seq(rest)?;
                self.close(close_line)
            }
            "if" => {
                let (name, result, rest) = self.block_header(&items[1..], line)?;
                let mut k = 0;
                while let Some(c) = rest.get(k).filter(|c| !matches!(c.head(), Some("then") | Some("else"))) {
                    if !matches!(c, SExpr::List { .. }) {
                        return Err(WatError::parse(c.line(), "if condition must be folded"));
                    }
                    self.folded(c)?;
                    k += 1;
                }
                let then = rest.get(k).filter(|t| t.head() == Some("then")).ok_or_else(|| WatError::parse(line, "if needs (then ...)"))?;
                self.open(LabelKind::If, name, result, line, false);
                let SExpr::List { items: titems, .. } = then else { unreachable!() };
                self.seq(&titems[1..])?;
                k += 1;
                if let Some(e) = rest.get(k) {
                    if e.head() != Some("else") {
                        return Err(WatError::parse(e.line(), "expected (else ...)"));
                    }
                    let SExpr::List { items: eitems, line: eline, .. } = e else { unreachable!() };
                    self.else_arm(*eline)?;
                    self.seq(&eitems[1..])?;
                    k += 1;
                }
                if let Some(extra) = rest.get(k) {
                    return Err(WatError::parse(extra.line(), "unexpected item after if arms"));
                }
                self.close(close_line)
            }
            "then" | "else" => Err(WatError::parse(line, format!("'{head}' outside of 'if'"))),
            op => {
                let wants = immediate_count(op).ok_or_else(|| WatError::parse(line, format!("unsupported instruction '{op}'")))?;
                let mut imms = Vec::new();
                let mut k = 1;
                match wants {
                    Immediates::One => {
                        let a = items.get(1).and_then(SExpr::atom).ok_or_else(|| WatError::parse(line, format!("'{op}' needs an immediate")))?;
                        imms.push(a);
                        k = 2;
                    }
                    Immediates::MemArg => {
                        while let Some(a) = items.get(k).and_then(SExpr::atom).filter(|a| a.starts_with("offset=") || a.starts_with("align=")) {
                            imms.push(a);
                            k += 1;
                        }
                    }
                    Immediates::None => {}
                }
                for operand in &items[k..] {
                    match operand {
                        SExpr::List { .. } => self.folded(operand)?,
                        other => return Err(WatError::parse(other.line(), "folded operands must be parenthesized")),
                    }
                }
                self.simple(op, &imms, line)
            }
        }
    }

    fn local_ref(&self, r: &str, line: u32) -> Result<u32, WatError> {
        if let Some(n) = r.strip_prefix('$') {
            return self.local_names.get(n).copied().ok_or_else(|| WatError::resolve(line, r));
        }
        let i = parse_u32(r, line)?;
        if i < self.nlocals {
            Ok(i)
        } else {
            Err(WatError::resolve(line, r))
        }
    }

    fn global_ref(&self, r: &str, line: u32) -> Result<u32, WatError> {
        if let Some(n) = r.strip_prefix('$') {
            return self.b.global_names.get(n).copied().ok_or_else(|| WatError::resolve(line, r));
        }
        let i = parse_u32(r, line)?;
        if i < self.globals {
            Ok(i)
        } else {
            Err(WatError::resolve(line, r))
        }
    }

    fn label_ref(&self, r: &str, line: u32) -> Result<u32, WatError> {
        if let Some(n) = r.strip_prefix('$') {
            return self
                .labels
                .iter()
                .rev()
                .position(|l| l.name.as_deref() == Some(n))
                .map(|p| p as u32)
                .ok_or_else(|| WatError::resolve(line, r));
        }
        let d = parse_u32(r, line)?;
        if (d as usize) < self.labels.len() {
            Ok(d)
        } else {
            Err(WatError::resolve(line, r))
        }
    }

    fn simple(&mut self, op: &str, imms: &[&str], line: u32) -> Result<(), WatError> {
        let imm = imms.first().copied().unwrap_or("");
        let lowered = match op {
            "nop" => Op::Nop,
            "drop" => {
                self.pop(1);
                Op::Drop
            }
            "return" => {
                let n = self.labels[0].arity();
                self.pop(n);
                Op::Return
            }
            "i32.const" => {
                self.push(1);
                Op::I32Const(parse_i32(imm, line)?)
            }
            "i64.const" => {
                self.push(1);
                Op::I64Const(parse_i64(imm, line)?)
            }
            "f32.const" => {
                self.push(1);
                Op::F32Const(parse_f32(imm, line)?.to_bits())
            }
            "i32.add" | "i32.sub" | "i32.eq" | "i64.gt_s" | "i64.sub" | "f32.add" | "f32.div" | "f32.eq" => {
                self.pop(2);
                self.push(1);
                match op {
                    "i32.add" => Op::I32Add,
                    "i32.sub" => Op::I32Sub,
                    "i32.eq" => Op::I32Eq,
                    "i64.gt_s" => Op::I64GtS,
                    "i64.sub" => Op::I64Sub,
                    "f32.add" => Op::F32Add,
                    "f32.div" => Op::F32Div,
                    _ => Op::F32Eq,
                }
            }
            "local.get" => {
                self.push(1);
                Op::LocalGet(self.local_ref(imm, line)?)
            }
            "local.set" => {
                self.pop(1);
                Op::LocalSet(self.local_ref(imm, line)?)
            }
            "global.get" => {
                self.push(1);
                Op::GlobalGet(self.global_ref(imm, line)?)
            }
            "global.set" => {
                self.pop(1);
                Op::GlobalSet(self.global_ref(imm, line)?)
            }
            "i32.load" | "i32.store" => {
                let mut offset = 0;
                for a in imms {
                    if let Some(v) = a.strip_prefix("offset=") {
                        offset = parse_u32(v, line)?;
                    } else if let Some(v) = a.strip_prefix("align=") {
                        parse_u32(v, line)?;
                    }
                }
                if op == "i32.load" {
                    self.pop(1);
                    self.push(1);
                    Op::I32Load(offset)
                } else {
                    self.pop(2);
                    Op::I32Store(offset)
                }
            }
            "call" => {
                let f = self.b.func_ref(imm, line, self.func_sigs.len())?;
                let sig = &self.func_sigs[f as usize];
                self.pop(sig.params.len() as u32);
                self.push(sig.results.len() as u32);
                Op::Call(f)
            }
            "br" => {
                let depth = self.label_ref(imm, line)?;
                let li = self.labels.len() - 1 - depth as usize;
                let label = &self.labels[li];
                let (arity, height, kind, start) = (label.arity(), label.entry, label.kind, label.start);
                let target = if kind == LabelKind::Loop { start + 1 } else { 0 };
                let at = self.emit(Op::Br { depth, target, arity, height }, line);
                if kind != LabelKind::Loop {
                    self.labels[li].pending.push(at);
                }
                let floor = self.labels.last().map(|l| l.entry).unwrap_or(0);
                self.height = floor;
                return Ok(());
            }
            other => return Err(WatError::parse(line, format!("unsupported instruction '{other}'"))),
        };
        let unreachable_after = matches!(lowered, Op::Return);
        self.emit(lowered, line);
        if unreachable_after {
            self.height = self.labels.last().map(|l| l.entry).unwrap_or(0);
        }
        Ok(())
    }
}

enum Immediates {
    None,
    One,
    MemArg,
}

fn immediate_count(op: &str) -> Option<Immediates> {
    Some(match op {
        "nop" | "drop" | "return" | "i32.add" | "i32.sub" | "i32.eq" | "i64.gt_s" | "i64.sub" | "f32.add"
        | "f32.div" | "f32.eq" => Immediates::None,
        "i32.const" | "i64.const" | "f32.const" | "local.get" | "local.set" | "global.get" | "global.set"
        | "call" | "br" => Immediates::One,
        "i32.load" | "i32.store" => Immediates::MemArg,
        _ => return None,
    })
}
