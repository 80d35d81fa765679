use oot_core::corpus;
use oot_core::session::*;
use oot_core::vm::{PrimitiveTable, RunExit, StackLimits, Status, VmState};
use oot_core::wat::{encode_module, parse_module, resolve_breakpoint};
use oot_core::{CodeOffset, Value};

const MINIMAL: &str = r#"(module (export "main" (func $main)) (func $main))"#;

fn instantiate(src: &str) -> VmState {
    VmState::instantiate(parse_module(src).unwrap(), &PrimitiveTable::new(), StackLimits::default()).unwrap()
}

fn countdown_at_base(arg: i64) -> VmState {
    let mut vm = instantiate(&corpus::countdown_with_arg(arg));
    let bp = resolve_breakpoint(vm.module(), corpus::COUNTDOWN_BASE_LINE).unwrap();
    vm.add_breakpoint(bp);
    assert_eq!(vm.run(Some(1_000_000)), RunExit::Breakpoint(bp));
    vm
}

#[test]
fn minimal_module_golden_bytes() {
    let m = parse_module(MINIMAL).unwrap();
    assert_eq!(encode_module(&m).bytes, include_bytes!("fixtures/minimal_module.blob"));

    let mut vm = instantiate(MINIMAL);
    vm.pause();
    let d = extract_session(&vm).unwrap();
    let bytes = encode_session_bytes(&d);
    assert_eq!(bytes, include_bytes!("fixtures/minimal_session.bin"));
    assert_eq!(session_size_bytes(&d), 156);
    assert_eq!(decode_session_bytes(&bytes).unwrap(), d);

    let dump = d.dump();
    assert_eq!(dump.encode(), include_bytes!("fixtures/minimal_dump.bin"));
    assert_eq!(dump_size_bytes(&dump), 21);
    assert_eq!(RemoteDump::decode(&dump.encode()).unwrap(), dump);
}

#[test]
fn frame_counts_at_base_case() {
    // Frame counts from a plain recursive reference evaluation.
    for (arg, frames) in [(0, 2), (1, 3), (2, 4), (16, 18), (100, 102)] {
        let vm = countdown_at_base(arg);
        let d = extract_session(&vm).unwrap();
        assert_eq!(d.call_stack.len(), frames, "arg {arg}");
        let cd = vm.module().func_index("countdown").unwrap();
        assert!(d.call_stack[1..].iter().all(|f| f.func_index == cd));
        let args: Vec<Value> = d.call_stack[1..].iter().map(|f| f.locals[0]).collect();
        let want: Vec<Value> = (0..=arg).rev().map(Value::I64).collect();
        assert_eq!(args, want);
    }
}

#[test]
fn fresh_state_session() {
    let mut vm = instantiate(corpus::COUNTDOWN);
    vm.pause();
    let d = extract_session(&vm).unwrap();
    assert!(d.value_stack.is_empty());
    assert_eq!(d.memory.len(), 65536);
    assert!(d.memory.iter().all(|b| *b == 0));
    assert_eq!(d.call_stack.len(), 1);
    assert_eq!(d.error_counter, None);
}

#[test]
fn extract_requires_a_stopped_vm() {
    let vm = instantiate(corpus::COUNTDOWN);
    assert_eq!(extract_session(&vm), Err(SessionError::NotStopped(Status::Running)));
}

#[test]
fn apply_on_fresh_vm_resumes_identically() {
    let vm = countdown_at_base(5);
    let d = decode_session_bytes(&encode_session_bytes(&extract_session(&vm).unwrap())).unwrap();
    let mut fresh = instantiate(&corpus::countdown_with_arg(5));
    apply_session(&mut fresh, d).unwrap();
    assert_eq!(fresh.status(), Status::Paused);
    assert_eq!(fresh.pc(), vm.pc());
    let mut a = vm.clone();
    a.resume();
    fresh.resume();
    for _ in 0..500 {
        assert_eq!(a.trace_point(), fresh.trace_point());
        a.step();
        fresh.step();
    }
}

#[test]
fn module_mismatch() {
    let vm = countdown_at_base(2);
    let d = extract_session(&vm).unwrap();
    let mut other = instantiate(&corpus::countdown_with_arg(3));
    let before = snapshot(&other);
    assert_eq!(apply_session(&mut other, d), Err(SessionError::ModuleMismatch));
    assert_eq!(snapshot(&other), before);
}

#[test]
fn capacity_exceeded() {
    let vm = countdown_at_base(100);
    let d = extract_session(&vm).unwrap();
    let m = parse_module(&corpus::countdown_with_arg(100)).unwrap();
    let limits = StackLimits { max_call_depth: 64, max_value_stack: 8192 };
    let mut small = VmState::instantiate(m, &PrimitiveTable::new(), limits).unwrap();
    assert!(matches!(apply_session(&mut small, d.clone()), Err(SessionError::CapacityExceeded(_))));
    assert!(matches!(d.mem_msg().check_capacity(limits), Err(SessionError::CapacityExceeded(_))));
}

#[test]
fn inconsistent_sessions_rejected() {
    let vm = countdown_at_base(2);
    let good = extract_session(&vm).unwrap();
    let mut target = instantiate(&corpus::countdown_with_arg(2));

    let mut d = good.clone();
    d.call_stack[1].locals[0] = Value::f32(1.0);
    assert!(matches!(apply_session(&mut target, d), Err(SessionError::Inconsistent(_))));

    let mut d = good.clone();
    d.globals[0] = Value::I64(0);
    assert!(matches!(apply_session(&mut target, d), Err(SessionError::Inconsistent(_))));

    let mut d = good.clone();
    d.pc = CodeOffset::new(0, 99);
    assert!(matches!(apply_session(&mut target, d), Err(SessionError::Inconsistent(_))));

    let mut d = good.clone();
    d.memory.truncate(10);
    assert!(matches!(apply_session(&mut target, d), Err(SessionError::Inconsistent(_))));

    assert_eq!(target.status(), Status::Running);
    apply_session(&mut target, good).unwrap();
}

#[test]
fn stream_structure() {
    let vm = countdown_at_base(3);
    let d = extract_session(&vm).unwrap();
    let (mem, chunks) = encode_session(&d);
    assert_eq!(mem, d.mem_msg());
    assert_eq!(mem.call_stack_len, 5);
    let kinds: Vec<ChunkKind> = chunks.iter().map(|c| c.kind).collect();
    assert_eq!(kinds, ChunkKind::ORDER);
    let done: Vec<u8> = chunks.iter().map(|c| c.done_flag).collect();
    assert_eq!(done.iter().filter(|f| **f == DONE_LAST).count(), 1);
    assert_eq!(*done.last().unwrap(), DONE_LAST);
    assert_eq!(decode_session(&mem, &chunks).unwrap(), d);
}

#[test]
fn stream_errors() {
    let vm = countdown_at_base(2);
    let d = extract_session(&vm).unwrap();
    let (mem, chunks) = encode_session(&d);

    let mut open = chunks.clone();
    open.last_mut().unwrap().done_flag = DONE_MORE;
    assert_eq!(decode_session(&mem, &open).unwrap_err().0, "unterminated session");
    let bytes = write_stream(&mem, &open);
    assert_eq!(decode_session_bytes(&bytes).unwrap_err().0, "unterminated session");

    let mut swapped = chunks.clone();
    swapped.swap(3, 4);
    assert!(decode_session(&mem, &swapped).is_err());

    let mut dup = chunks.clone();
    dup[1] = dup[0].clone();
    assert!(decode_session(&mem, &dup).is_err());

    let mut lying = mem;
    lying.call_stack_len += 1;
    assert!(decode_session(&lying, &chunks).is_err());

    let bytes = encode_session_bytes(&d);
    for cut in [0, 5, 19, 20, 30, bytes.len() - 1] {
        assert!(decode_session_bytes(&bytes[..cut]).is_err(), "cut {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_session_bytes(&extra).is_err());
}

#[test]
fn memory_pages_carry_contents() {
    let src = r#"(module (memory 2) (export "main" (func $main))
        (func $main (i32.store (i32.const 70000) (i32.const 123456)) (i32.store (i32.const 4) (i32.const -1))))"#;
    let mut vm = instantiate(src);
    assert_eq!(vm.run(None), RunExit::Halted);
    let d = extract_session(&vm).unwrap();
    let back = decode_session_bytes(&encode_session_bytes(&d)).unwrap();
    assert_eq!(back.memory, vm.memory());
    assert_eq!(back.memory_page_count(), 2);
}

#[test]
fn trapped_tma_session_has_error_counter() {
    use oot_core::vm::{HostFailure, Primitive};
    use oot_core::TypeSig;
    use oot_core::ValueKind::*;
    let mut prims = PrimitiveTable::new();
    prims.insert("env", "chip_delay", TypeSig::new(vec![I32], vec![]), |_| Ok(None));
    prims.insert("env", "is_connected", TypeSig::new(vec![I32], vec![I32]), |_| Ok(Some(Value::I32(0))));
    prims.insert_primitive(
        "env",
        "req_temp",
        Primitive {
            sig: TypeSig::new(vec![I32], vec![F32]),
            func: std::sync::Arc::new(|_| Err(HostFailure::new("offline"))),
        },
    );
    let m = parse_module(corpus::TEMP_MONITOR).unwrap();
    let mut vm = VmState::instantiate(m, &prims, StackLimits::default()).unwrap();
    let RunExit::Trapped(t) = vm.run(Some(10_000)) else { panic!() };
    let d = extract_session(&vm).unwrap();
    assert_eq!(d.error_counter, Some(t.at));
    assert_eq!(vm.module().line_of(t.at), Some(corpus::TMA_DIV_LINE));
}

#[test]
fn sizes_grow_with_depth_and_exceed_dumps() {
    let mut prev = 0;
    for arg in [0, 1, 2, 5, 16, 64] {
        let d = extract_session(&countdown_at_base(arg)).unwrap();
        let s = session_size_bytes(&d);
        assert!(s > prev, "arg {arg}");
        assert!(dump_size_bytes(&d.dump()) < s);
        prev = s;
    }
}
