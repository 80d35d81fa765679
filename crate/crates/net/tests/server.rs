use std::sync::Arc;
use std::time::{Duration, Instant};

use oot_core::corpus;
use oot_core::device::{Device, SensorScript};
use oot_core::monitor::{BreakpointSpec, DumpMode, EventKind, Interrupt, Monitor};
use oot_core::proxy::{AccessStrategy, ProxyBridge, ProxyReply, RemoteLink};
use oot_core::session::{decode_session_bytes, RemoteDump};
use oot_core::vm::{PrimitiveTable, StackLimits, Status};
use oot_core::wat::{parse_module, resolve_breakpoint};
use oot_core::Value;
use oot_net::client::ClientError;
use oot_net::{listen, master_sink, spawn_server, DebugClient, DeviceLink, MasterNode, ServerConfig, ServerHandle};

fn serve(m: Monitor) -> ServerHandle {
    spawn_server(m, listen(0).unwrap(), ServerConfig::default())
}

fn countdown() -> ServerHandle {
    let m = parse_module(corpus::COUNTDOWN).unwrap();
    serve(Monitor::new_remote(m, PrimitiveTable::new(), StackLimits::default()).unwrap())
}

fn tma(online: bool) -> (ServerHandle, Device) {
    let dev = Device::new(&SensorScript::tma(online, 21.5));
    let m = parse_module(corpus::TEMP_MONITOR).unwrap();
    (serve(Monitor::new_remote(m, dev.primitives(), StackLimits::default()).unwrap()), dev)
}

fn client(h: &ServerHandle) -> DebugClient {
    DebugClient::connect("127.0.0.1", h.port()).unwrap()
}

fn wait(mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + Duration::from_secs(5);
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    false
}

fn next_of(c: &DebugClient, kind: EventKind) -> oot_core::monitor::Response {
    let deadline = Instant::now() + Duration::from_secs(5);
    while Instant::now() < deadline {
        if let Some(ev) = c.next_event(Duration::from_millis(50)) {
            if ev.opcode == kind as u8 {
                return ev;
            }
        }
    }
    panic!("no {kind:?} event");
}

#[test]
fn breakpoint_round_trip_over_tcp() {
    let h = countdown();
    let c = client(&h);
    c.add_breakpoint(BreakpointSpec::Line(corpus::COUNTDOWN_BASE_LINE)).unwrap();
    let ev = c.next_event(Duration::from_secs(5)).expect("breakpoint event");
    assert_eq!(ev.opcode, EventKind::BreakpointHit as u8);
    let (mode, data) = ev.event_data().unwrap();
    assert_eq!(mode, DumpMode::Session);
    let s = decode_session_bytes(data).unwrap();
    assert_eq!(s.call_stack.len(), 4);
    assert_eq!(h.status(), Status::Paused);

    let dump = RemoteDump::decode(&c.dump(DumpMode::Remote).unwrap()).unwrap();
    assert_eq!(dump.pc, s.pc);
    let r = c.step().unwrap();
    assert_eq!(r.status, Status::Paused);
    assert_ne!(r.pc, s.pc);
    let r = c.run().unwrap();
    assert_eq!(r.status, Status::Running);
    // Main loops forever, so the breakpoint hits again.
    assert!(c.next_event(Duration::from_secs(5)).is_some());
}

#[test]
fn pause_stops_a_running_loop() {
    let h = countdown();
    let c = client(&h);
    assert!(wait(|| h.instructions_executed() > 1000));
    let r = c.pause().unwrap();
    assert_eq!(r.status, Status::Paused);
    let n = h.instructions_executed();
    std::thread::sleep(Duration::from_millis(30));
    assert_eq!(h.instructions_executed(), n);
}

#[test]
fn rejected_interrupts_come_back_as_errors() {
    let h = countdown();
    let c = client(&h);
    match c.call(&Interrupt::RemoveBreakpoint(BreakpointSpec::Line(27))) {
        Err(ClientError::Rejected { opcode, .. }) => assert_eq!(opcode, 0x07),
        other => panic!("{other:?}"),
    }
    let r = c.request_raw(&[0xEE, 0, 0, 0, 0]).unwrap();
    assert!(r.error_message().is_some());
    // The connection stays usable.
    assert!(c.dump(DumpMode::Session).is_ok());
}

#[test]
fn traps_are_reported_only_to_attached_clients() {
    let (h, _dev) = tma(false);
    // No client yet: the device keeps crashing and rebooting silently.
    assert!(wait(|| h.trap_count() >= 3));
    let proxy_only = client(&h);
    proxy_only.proxy_call(2, &[Value::I32(3030)]).unwrap();
    std::thread::sleep(Duration::from_millis(20));
    assert!(proxy_only.drain_events().is_empty());

    let c = client(&h);
    c.dump(DumpMode::Remote).unwrap();
    let ev = c.next_event(Duration::from_secs(5)).expect("trap event");
    assert_eq!(ev.opcode, EventKind::Trapped as u8);
    let (_, data) = ev.event_data().unwrap();
    let s = decode_session_bytes(data).unwrap();
    let div = resolve_breakpoint(&parse_module(corpus::TEMP_MONITOR).unwrap(), corpus::TMA_DIV_LINE).unwrap();
    assert_eq!(s.error_counter, Some(div));
    assert!(proxy_only.drain_events().is_empty());
}

#[test]
fn event_flood_never_blocks_the_vm() {
    let (h, _dev) = tma(false);
    let c = client(&h);
    c.dump(DumpMode::Remote).unwrap();
    let start = h.trap_count();
    // Nobody reads events: the server keeps running and drops the excess.
    assert!(wait(|| h.trap_count() > start + 1000));
    assert!(c.events_dropped() + h.events_dropped() > 0);
    let r = c.pause().unwrap();
    assert_eq!(r.status, Status::Paused);
}

#[test]
fn device_link_proxies_primitives() {
    let (h, _dev) = tma(true);
    let link = DeviceLink::connect("127.0.0.1", h.port()).unwrap();
    assert_eq!(link.proxy_call(2, &[Value::I32(3031)]).unwrap(), ProxyReply::Value(Value::I32(1)));
    assert_eq!(link.proxy_call(1, &[Value::I32(3030)]).unwrap(), ProxyReply::Value(Value::f32(21.5)));
    assert!(link.proxy_call(5, &[]).unwrap_err().contains("not a primitive"));
    let st = link.stats();
    assert_eq!(st.messages_sent, 3);
    assert_eq!(st.messages_received, 3);
}

#[test]
fn local_vm_resumes_a_remote_session() {
    let (remote, _dev) = tma(false);
    let m = parse_module(corpus::TEMP_MONITOR).unwrap();
    let link: Arc<dyn RemoteLink> = Arc::new(DeviceLink::connect("127.0.0.1", remote.port()).unwrap());
    let bridge = ProxyBridge::new(&m, Some(link)).shared();
    let local = serve(Monitor::new_local(m, bridge, StackLimits::default()).unwrap());
    assert_eq!(local.status(), Status::Paused);

    let rc = client(&remote);
    let lc = client(&local);
    lc.call(&Interrupt::MonitorProxies(vec![(1, AccessStrategy::Remote), (2, AccessStrategy::Remote)])).unwrap();
    rc.add_breakpoint(BreakpointSpec::Line(corpus::TMA_LOOP_LINE)).unwrap();
    // Trap events from earlier reboots may arrive first.
    next_of(&rc, EventKind::BreakpointHit);
    let stream = rc.dump(DumpMode::Session).unwrap();
    let r = lc.receive_state(stream).unwrap();
    assert_eq!(r.status, Status::Paused);
    lc.run().unwrap();
    let ev = lc.next_event(Duration::from_secs(5)).expect("local trap");
    assert_eq!(ev.opcode, EventKind::Trapped as u8);
    assert_eq!(local.status(), Status::Trapped);
    // The remote never moved while the local VM ran.
    assert_eq!(remote.status(), Status::Paused);
}

#[test]
fn shutdown_disconnects_clients() {
    let h = countdown();
    let c = client(&h).with_timeout(Duration::from_secs(2));
    c.dump(DumpMode::Remote).unwrap();
    assert_eq!(h.connection_stats().len(), 1);
    h.shutdown();
    assert!(c.dump(DumpMode::Remote).is_err());
}

#[test]
fn master_logs_device_sends() {
    let master = MasterNode::spawn(listen(0).unwrap());
    assert!(master.log().is_empty());
    let dev = Device::new(&SensorScript::default());
    dev.set_sink(master_sink("127.0.0.1", master.port()).unwrap());
    let m = parse_module(corpus::TEMP_BROADCAST).unwrap();
    let h = serve(Monitor::new_remote(m, dev.primitives(), StackLimits::default()).unwrap());
    assert!(master.wait_for(5, Duration::from_secs(5)));
    let log = master.log();
    assert!(log.iter().all(|r| r.value == 21.5));
    assert!(log.windows(2).all(|w| w[0].at_ms <= w[1].at_ms));
    drop(h);
}

#[test]
fn idle_master_logs_nothing() {
    let master = MasterNode::spawn(listen(0).unwrap());
    let _sink = master_sink("127.0.0.1", master.port()).unwrap();
    assert!(!master.wait_for(1, Duration::from_millis(50)));
}
