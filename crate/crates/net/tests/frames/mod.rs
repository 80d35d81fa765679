//! Frame codec checks, shared by the transport tests and the acceptance run.

use oot_net::transport::{connect, listen};
use oot_net::Endpoint;
use proptest::prelude::*;

fn pair() -> (Endpoint, Endpoint) {
    let l = listen(0).unwrap();
    let c = connect("127.0.0.1", l.port()).unwrap();
    let s = l.accept().unwrap();
    (c, s)
}

/// One 16 MiB body.
pub fn large_frame_round_trips() {
    let (c, mut s) = pair();
    let body: Vec<u8> = (0..16usize << 20).map(|i| (i * 31 % 251) as u8).collect();
    let sender = std::thread::spawn({
        let body = body.clone();
        move || c.send_frame(&body).map(|_| c.stats())
    });
    assert_eq!(s.recv_frame().unwrap(), body);
    assert_eq!(sender.join().unwrap().unwrap().bytes_sent, (body.len() + 4) as u64);
}

pub fn frames_round_trip_in_order() {
    let config = ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() };
    proptest!(config, |(frames in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..512), 1..6))| {
        let (c, mut s) = pair();
        for f in &frames {
            c.send_frame(f).unwrap();
        }
        for f in &frames {
            prop_assert_eq!(&s.recv_frame().unwrap(), f);
        }
        let want: usize = frames.iter().map(|f| f.len() + 4).sum();
        prop_assert_eq!(s.stats().bytes_received, want as u64);
        prop_assert_eq!(c.stats().bytes_sent, want as u64);
    });
}
