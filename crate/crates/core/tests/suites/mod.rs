//! The property suites, shared by the `props` tests and the acceptance run.
//! Each entry point panics on the first failing case.

use std::collections::BTreeSet;

use oot_core::monitor::*;
use oot_core::proxy::{AccessStrategy, ProxyReply};
use oot_core::session::*;
use oot_core::vm::{Frame, RunControl, RunExit, StackLimits, Status, StepOutcome, Trap, TrapKind, VmState};
use oot_core::wat::{decode_module, encode_module, parse_module, print_module, validate_module};
use oot_core::Value;
use oot_core::{CodeOffset, SourceModule};
use proptest::prelude::*;

use crate::gen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cases per property.
pub const CASES: u32 = 1000;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, failure_persistence: None, ..ProptestConfig::default() }
}

fn module(seed: u64) -> SourceModule {
    let src = gen::program(seed);
    parse_module(&src).unwrap_or_else(|e| panic!("{e}\n{src}"))
}

fn vm(seed: u64) -> VmState {
    VmState::instantiate(module(seed), &gen::primitives(), StackLimits::default()).unwrap()
}

/// Steps up to `n` instructions; stops early on halt or trap. Returns how
/// many completed, the halting one included.
fn advance(vm: &mut VmState, n: u32) -> usize {
    for i in 0..n as usize {
        match vm.step() {
            StepOutcome::Executed => {}
            StepOutcome::Halted => return i + 1,
            _ => return i,
        }
    }
    n as usize
}

/// Trace points before every instruction, plus the final state after a
/// halt. A trap freezes the state, so it adds no point.
fn trace(vm: &mut VmState, limit: usize) -> Vec<oot_core::vm::TracePoint> {
    let mut out = Vec::new();
    while out.len() < limit {
        out.push(vm.trace_point());
        match vm.step() {
            StepOutcome::Executed => {}
            StepOutcome::Halted => break,
            _ => return out,
        }
    }
    out.push(vm.trace_point());
    out
}

fn all_offsets(m: &SourceModule) -> Vec<CodeOffset> {
    m.funcs
        .iter()
        .enumerate()
        .flat_map(|(f, d)| (0..d.body.len()).map(move |o| CodeOffset::new(f as u32, o as u32)))
        .collect()
}

pub fn generated_programs_validate_and_finish() {
    let mut halted = 0;
    let mut trapped = 0;
    let mut executed = 0;
    for seed in 0..300 {
        let mut v = vm(seed);
        let exit = v.run(Some(10_000_000));
        executed += v.instructions_executed();
        match exit {
            RunExit::Halted => halted += 1,
            RunExit::Trapped(_) => trapped += 1,
            other => panic!("seed {seed}: {other:?}"),
        }
    }
    assert!(halted > 100, "{halted}");
    assert!(trapped > 0, "{trapped}");
    assert!(executed / 300 > 30, "{executed}");
}

pub fn module_blob_round_trip() {
    proptest!(cases(CASES), |(seed in any::<u64>())| {
        let m = module(seed);
        prop_assert!(validate_module(&m).is_empty());
        let blob = encode_module(&m);
        prop_assert_eq!(&decode_module(&blob).unwrap(), &m);
        prop_assert_eq!(encode_module(&m).bytes, blob.bytes);
        let reparsed = parse_module(&print_module(&m)).unwrap();
        prop_assert_eq!(reparsed.without_lines(), m.without_lines());
    });
}

pub fn session_stream_round_trip_from_vm() {
    proptest!(cases(CASES), |(seed in any::<u64>(), steps in 0u32..300, picks in prop::collection::vec(any::<u16>(), 0..4))| {
        let mut v = vm(seed);
        let _ = advance(&mut v, steps);
        let offsets = all_offsets(v.module());
        for p in picks {
            v.add_breakpoint(offsets[p as usize % offsets.len()]);
        }
        v.pause();
        let d = extract_session(&v).unwrap();
        let bytes = encode_session_bytes(&d);
        prop_assert_eq!(session_size_bytes(&d), bytes.len());
        prop_assert_eq!(&decode_session_bytes(&bytes).unwrap(), &d);
        let (mem, chunks) = read_stream(&bytes).unwrap();
        prop_assert_eq!(&write_stream(&mem, &chunks), &bytes);
        let dump = d.dump();
        prop_assert_eq!(RemoteDump::decode(&dump.encode()).unwrap(), dump);
        // The stream applies onto a fresh instance of the same module.
        let mut fresh = VmState::instantiate(v.module().clone(), &gen::primitives(), StackLimits::default()).unwrap();
        apply_session(&mut fresh, decode_session_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(snapshot(&fresh), d);
    });
}

pub fn session_stream_round_trip_arbitrary() {
    proptest!(cases(CASES), |(d in arb_session())| {
        let bytes = encode_session_bytes(&d);
        prop_assert_eq!(&decode_session_bytes(&bytes).unwrap(), &d);
        let (mem, chunks) = encode_session(&d);
        prop_assert_eq!(mem, d.mem_msg());
        prop_assert_eq!(MemMgmtMsg::decode(&mut oot_core::wire::ByteReader::new(&bytes[..20])).unwrap(), mem);
        prop_assert_eq!(decode_session(&mem, &chunks).unwrap(), d);
    });
}

pub fn interrupt_round_trip() {
    proptest!(cases(CASES), |(msg in arb_interrupt())| {
        let bytes = msg.encode();
        prop_assert_eq!(bytes[0], msg.opcode() as u8);
        prop_assert_eq!(u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize, bytes.len() - 5);
        prop_assert_eq!(Interrupt::decode(&bytes).unwrap(), msg);
    });
}

pub fn response_round_trip() {
    proptest!(cases(CASES), |(r in arb_response())| {
        prop_assert_eq!(Response::decode(&r.encode()).unwrap(), r);
    });
}

pub fn proxy_reply_round_trip() {
    proptest!(cases(CASES), |(r in arb_reply())| {
        prop_assert_eq!(ProxyReply::decode(&r.encode()).unwrap(), r);
    });
}

pub fn resume_equivalence() {
    proptest!(cases(CASES), |(seed in any::<u64>(), k in 0u32..400)| {
        let m = module(seed);
        let mut whole = VmState::instantiate(m.clone(), &gen::primitives(), StackLimits::default()).unwrap();
        let mut reference = trace(&mut whole, 5_000);
        let mut v = VmState::instantiate(m.clone(), &gen::primitives(), StackLimits::default()).unwrap();
        let skip = advance(&mut v, k);
        v.pause();
        let d = decode_session_bytes(&encode_session_bytes(&extract_session(&v).unwrap())).unwrap();
        let mut fresh = VmState::instantiate(m, &gen::primitives(), StackLimits::default()).unwrap();
        apply_session(&mut fresh, d).unwrap();
        fresh.resume();
        prop_assert_eq!(reference[skip], fresh.trace_point());
        let rest = trace(&mut fresh, 5_000 - skip);
        reference.drain(..skip);
        prop_assert_eq!(rest, reference);
        prop_assert_eq!(fresh.status(), whole.status());
        prop_assert_eq!(fresh.globals(), whole.globals());
        prop_assert_eq!(fresh.memory(), whole.memory());
    });
}

pub fn invoke_isolated_restores_execution_state() {
    proptest!(cases(CASES), |(seed in any::<u64>(), steps in 0u32..300, pick in any::<u16>(), arg_seed in any::<u64>())| {
        let mut v = vm(seed);
        let _ = advance(&mut v, steps);
        if v.status() == Status::Running && arg_seed % 2 == 0 {
            v.pause();
        }
        let offsets = all_offsets(v.module());
        v.add_breakpoint(offsets[pick as usize % offsets.len()]);
        let fidx = pick as u32 % v.module().funcs.len() as u32;
        let kinds = v.module().sig(fidx).unwrap().params.clone();
        let args = gen::args_for(&mut ChaCha8Rng::seed_from_u64(arg_seed), &kinds);

        let twin = v.clone();
        let before = (v.pc(), v.value_stack().to_vec(), v.call_stack().to_vec(), v.status(), v.error_counter(), v.last_trap().cloned(), v.breakpoints().clone(), v.table().to_vec());
        let _ = v.invoke_isolated(fidx, &args);
        let after = (v.pc(), v.value_stack().to_vec(), v.call_stack().to_vec(), v.status(), v.error_counter(), v.last_trap().cloned(), v.breakpoints().clone(), v.table().to_vec());
        prop_assert_eq!(after, before);

        // Without side effects on globals or memory the application cannot
        // tell the call happened.
        if v.globals() == twin.globals() && v.memory() == twin.memory() {
            let mut a = v.clone();
            let mut b = twin.clone();
            if a.status() == Status::Running {
                prop_assert_eq!(a.run(Some(5_000)), b.run(Some(5_000)));
            }
            prop_assert_eq!(trace(&mut a, 500), trace(&mut b, 500));
        }
    });
}

pub fn state_edits_are_type_safe() {
    proptest!(cases(CASES), |(seed in any::<u64>(), steps in 0u32..300, target in 0u8..4, index in any::<u16>(), same in any::<bool>(), val_seed in any::<u64>())| {
        let mut v = vm(seed);
        let _ = advance(&mut v, steps);
        v.pause();
        if v.status() != Status::Paused {
            // Halted or trapped: edits are refused outright.
            let before = snapshot(&v);
            let e = StateEdit::Global { index: 0, value: Value::I32(0) };
            prop_assert_eq!(apply_state_edit(&mut v, e), Err(EditError::NotPaused));
            prop_assert_eq!(snapshot(&v), before);
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(val_seed);
        let pick = |n: usize| if n == 0 { index as u32 } else { index as u32 % (n as u32 + 1) };
        let value_for = |rng: &mut ChaCha8Rng, k: Option<oot_core::ValueKind>| match k {
            Some(k) if same => gen::args_for(rng, &[k])[0],
            Some(k) => gen::other_kind(rng, k),
            None => gen::args_for(rng, &[oot_core::ValueKind::I32])[0],
        };
        let (edit, expected) = match target {
            0 => {
                let i = pick(v.value_stack().len());
                let k = v.value_stack().get(i as usize).map(|x| x.kind());
                let value = value_for(&mut rng, k);
                let exp = match k { None => Err(EditError::IndexOutOfRange), Some(_) if same => Ok(()), Some(_) => Err(EditError::KindMismatch) };
                (StateEdit::StackSlot { index: i, value }, exp)
            }
            1 => {
                let frame = v.call_stack().len() as u32 - 1;
                let i = pick(v.call_stack()[frame as usize].locals.len());
                let k = v.call_stack()[frame as usize].locals.get(i as usize).map(|x| x.kind());
                let value = value_for(&mut rng, k);
                let exp = match k { None => Err(EditError::IndexOutOfRange), Some(_) if same => Ok(()), Some(_) => Err(EditError::KindMismatch) };
                (StateEdit::Local { frame, index: i, value }, exp)
            }
            2 => {
                let i = pick(v.globals().len());
                let decl = v.module().globals.get(i as usize).cloned();
                let value = value_for(&mut rng, decl.as_ref().map(|g| g.kind));
                let exp = match decl {
                    None => Err(EditError::IndexOutOfRange),
                    Some(g) if !g.mutable => Err(EditError::ImmutableGlobal),
                    Some(_) if same => Ok(()),
                    Some(_) => Err(EditError::KindMismatch),
                };
                (StateEdit::Global { index: i, value }, exp)
            }
            _ => {
                let i = pick(v.table().len());
                let nf = v.module().funcs.len() as u32;
                let func = rng.gen_range(0..nf + 1);
                let exp = match (v.table().get(i as usize), v.module().sig(func)) {
                    (None, _) | (_, None) => Err(EditError::IndexOutOfRange),
                    (Some(old), Some(new)) if v.module().sig(*old) == Some(new) => Ok(()),
                    _ => Err(EditError::KindMismatch),
                };
                (StateEdit::TableEntry { index: i, func }, exp)
            }
        };
        let before = snapshot(&v);
        let got = apply_state_edit(&mut v, edit);
        prop_assert_eq!(&got, &expected);
        if got.is_ok() {
            // Every slot still has its declared kind.
            prop_assert!(check_session(&v, &snapshot(&v)).is_ok());
            let mut fresh = VmState::instantiate(v.module().clone(), &gen::primitives(), StackLimits::default()).unwrap();
            prop_assert!(check_session(&fresh, &snapshot(&v)).is_ok());
            apply_session(&mut fresh, snapshot(&v)).unwrap();
        } else {
            prop_assert_eq!(snapshot(&v), before);
        }
    });
}

pub fn breakpoint_policy_postconditions() {
    proptest!(cases(CASES), |(seed in any::<u64>(), policy in 0u8..3, picks in prop::collection::vec(any::<u16>(), 1..5))| {
        let m = module(seed);
        let offsets = all_offsets(&m);
        let mut mon = Monitor::new_remote(m, gen::primitives(), StackLimits::default()).unwrap();
        mon.ctx.policy = BreakpointPolicy::from_code(policy).unwrap();
        let bps: BTreeSet<CodeOffset> = picks.iter().map(|p| offsets[*p as usize % offsets.len()]).collect();
        for bp in &bps {
            mon.vm.add_breakpoint(*bp);
        }
        let exit = mon.run_slice(RunControl { budget: Some(1_000_000), ..Default::default() });
        let RunExit::Breakpoint(at) = exit else {
            prop_assert_eq!(mon.take_events().count(), 0);
            return Ok(());
        };
        prop_assert!(bps.contains(&at));
        let events: Vec<Event> = mon.take_events().collect();
        prop_assert_eq!(events.len(), 1);
        let d = decode_session_bytes(&events[0].data).unwrap();
        prop_assert_eq!(d.pc, at);
        prop_assert_eq!(&d.breakpoints, &bps);
        match mon.ctx.policy {
            BreakpointPolicy::Pause => {
                prop_assert_eq!(mon.vm.status(), Status::Paused);
                prop_assert_eq!(mon.vm.breakpoints(), &bps);
                prop_assert_eq!(mon.vm.pc(), at);
            }
            BreakpointPolicy::SingleStop => {
                prop_assert_eq!(mon.vm.status(), Status::Running);
                prop_assert!(mon.vm.breakpoints().is_empty());
            }
            BreakpointPolicy::RemoveAndProceed => {
                prop_assert_eq!(mon.vm.status(), Status::Running);
                let mut rest = bps.clone();
                rest.remove(&at);
                prop_assert_eq!(mon.vm.breakpoints(), &rest);
            }
        }
    });
}

pub fn execution_is_deterministic() {
    proptest!(cases(CASES), |(seed in any::<u64>())| {
        let mut a = vm(seed);
        let mut b = vm(seed);
        prop_assert_eq!(trace(&mut a, 3_000), trace(&mut b, 3_000));
        prop_assert_eq!(snapshot(&a), snapshot(&b));
        prop_assert_eq!(a.instructions_executed(), b.instructions_executed());
        prop_assert_eq!(a.last_trap(), b.last_trap());
    });
}

pub fn run_and_step_agree() {
    proptest!(cases(CASES), |(seed in any::<u64>(), budget in 0u64..500)| {
        let mut a = vm(seed);
        let mut b = vm(seed);
        a.run(Some(budget));
        let _ = advance(&mut b, budget as u32);
        prop_assert_eq!(snapshot(&a), snapshot(&b));
        prop_assert_eq!(a.status(), b.status());
    });
}

fn arb_value() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<i32>().prop_map(Value::I32),
        any::<i64>().prop_map(Value::I64),
        any::<u32>().prop_map(Value::F32),
        any::<u64>().prop_map(Value::F64),
    ]
}

fn arb_offset() -> impl Strategy<Value = CodeOffset> {
    (any::<u32>(), any::<u32>()).prop_map(|(f, o)| CodeOffset::new(f, o))
}

fn arb_strategy() -> impl Strategy<Value = AccessStrategy> {
    prop_oneof![
        Just(AccessStrategy::Remote),
        Just(AccessStrategy::Cache),
        prop::option::of(arb_value()).prop_map(AccessStrategy::Mock),
    ]
}

fn arb_bp() -> impl Strategy<Value = BreakpointSpec> {
    prop_oneof![arb_offset().prop_map(BreakpointSpec::At), any::<u32>().prop_map(BreakpointSpec::Line)]
}

fn arb_interrupt() -> impl Strategy<Value = Interrupt> {
    let bytes = || prop::collection::vec(any::<u8>(), 0..200);
    let fidxs = || prop::collection::vec(any::<u32>(), 0..6);
    prop_oneof![
        Just(Interrupt::Run),
        Just(Interrupt::Pause),
        Just(Interrupt::Step),
        Just(Interrupt::StepOver),
        arb_bp().prop_map(Interrupt::AddBreakpoint),
        arb_bp().prop_map(Interrupt::RemoveBreakpoint),
        prop_oneof![Just(DumpMode::Session), Just(DumpMode::Remote)].prop_map(Interrupt::Dump),
        bytes().prop_map(Interrupt::ReceiveState),
        (any::<u32>(), prop::collection::vec(arb_value(), 0..5)).prop_map(|(fidx, args)| Interrupt::ProxyCall { fidx, args }),
        prop::collection::vec((any::<u32>(), arb_strategy()), 0..5).prop_map(Interrupt::MonitorProxies),
        fidxs().prop_map(Interrupt::ProxyUseCache),
        fidxs().prop_map(Interrupt::ProxyNoCache),
        bytes().prop_map(Interrupt::UpdateModule),
        (
            prop_oneof![
                any::<u32>().prop_map(StackTarget::Slot),
                (any::<u32>(), any::<u32>()).prop_map(|(frame, index)| StackTarget::Local { frame, index })
            ],
            arb_value()
        )
            .prop_map(|(target, value)| Interrupt::UpdateStackValue { target, value }),
        (any::<u32>(), arb_value()).prop_map(|(index, value)| Interrupt::UpdateGlobal { index, value }),
        (any::<u32>(), any::<u32>()).prop_map(|(index, func)| Interrupt::UpdateTableEntry { index, func }),
        (0u8..3).prop_map(|c| Interrupt::SetPolicy(BreakpointPolicy::from_code(c).unwrap())),
    ]
}

fn arb_response() -> impl Strategy<Value = Response> {
    (0u8..3, any::<u8>(), prop::collection::vec(any::<u8>(), 0..300)).prop_map(|(s, opcode, payload)| Response {
        status: [ResponseStatus::Ok, ResponseStatus::Error, ResponseStatus::Event][s as usize],
        opcode,
        payload,
    })
}

fn arb_reply() -> impl Strategy<Value = ProxyReply> {
    prop_oneof![
        arb_value().prop_map(ProxyReply::Value),
        Just(ProxyReply::Unit),
        (0u8..6, arb_offset(), ".{0,40}").prop_map(|(k, at, message)| ProxyReply::Trap(Trap {
            kind: TrapKind::from_code(k).unwrap(),
            at,
            message
        })),
    ]
}

fn arb_frame() -> impl Strategy<Value = Frame> {
    (any::<u32>(), prop::option::of(arb_offset()), any::<u32>(), prop::collection::vec(arb_value(), 0..6)).prop_map(
        |(func_index, return_pc, value_stack_base, locals)| Frame { func_index, return_pc, value_stack_base, locals },
    )
}

fn arb_memory() -> impl Strategy<Value = Vec<u8>> {
    (0usize..3, prop::collection::vec((any::<u32>(), any::<u8>()), 0..20)).prop_map(|(pages, writes)| {
        let mut mem = vec![0u8; pages * 65536];
        if pages > 0 {
            for (at, b) in writes {
                let n = mem.len();
                mem[at as usize % n] = b;
            }
        }
        mem
    })
}

fn arb_session() -> impl Strategy<Value = DebugSession> {
    (
        arb_offset(),
        prop::option::of(arb_offset()),
        prop::collection::btree_set(arb_offset(), 0..6),
        prop::collection::vec(arb_value(), 0..30),
        prop::collection::vec(arb_frame(), 0..8),
        prop::collection::vec(arb_value(), 0..8),
        arb_memory(),
        prop::collection::vec(any::<u32>(), 0..6),
        any::<[u8; 32]>(),
    )
        .prop_map(|(pc, error_counter, breakpoints, value_stack, call_stack, globals, memory, table, module_hash)| {
            DebugSession { pc, error_counter, breakpoints, value_stack, call_stack, globals, memory, table, module_hash }
        })
}
