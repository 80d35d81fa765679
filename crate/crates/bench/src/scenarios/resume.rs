//! Pausing anywhere, shipping the session to a fresh VM and resuming there
//! must not change what the program does.

use std::time::{Duration, Instant};

use anyhow::Result;
use oot_core::corpus;
use oot_core::session::{apply_session, decode_session_bytes, encode_session_bytes, extract_session};
use oot_core::vm::{PrimitiveTable, StackLimits, StepOutcome, TracePoint, VmState};
use oot_core::SourceModule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::node::parse;

#[derive(Debug, Clone)]
pub struct ResumeConfig {
    pub args: Vec<i64>,
    pub points: usize,
    pub seed: u64,
}

impl Default for ResumeConfig {
    fn default() -> Self {
        ResumeConfig { args: vec![1, 2, 16, 100], points: 20, seed: 7 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ResumeResult {
    pub checked: usize,
    pub mismatches: Vec<String>,
    pub elapsed: Duration,
}

/// Instructions traced per run: a full main iteration and some of the next.
fn trace_len(arg: i64) -> usize {
    16 * (arg.max(0) as usize + 2)
}

fn fresh(m: &SourceModule) -> Result<VmState> {
    Ok(VmState::instantiate(m.clone(), &PrimitiveTable::new(), StackLimits::default())?)
}

/// `n` trace points, each taken before an instruction runs.
fn trace(vm: &mut VmState, n: usize) -> Vec<TracePoint> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(vm.trace_point());
        if vm.step() != StepOutcome::Executed {
            break;
        }
    }
    out
}

/// The trace of a run paused after `k` instructions, moved through the
/// session byte stream onto a fresh VM and resumed there.
fn transferred_trace(m: &SourceModule, k: usize, n: usize) -> Result<Vec<TracePoint>> {
    let mut vm = fresh(m)?;
    let mut out = trace(&mut vm, k);
    vm.pause();
    let bytes = encode_session_bytes(&extract_session(&vm)?);
    let mut other = fresh(m)?;
    apply_session(&mut other, decode_session_bytes(&bytes)?)?;
    other.resume();
    out.extend(trace(&mut other, n - k));
    Ok(out)
}

pub fn resume_equivalence(cfg: &ResumeConfig) -> Result<ResumeResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut r = ResumeResult::default();
    for &arg in &cfg.args {
        let m = parse(&corpus::countdown_with_arg(arg))?;
        let n = trace_len(arg);
        let reference = trace(&mut fresh(&m)?, n);
        for _ in 0..cfg.points {
            let k = rng.gen_range(0..n);
            let got = transferred_trace(&m, k, n)?;
            r.checked += 1;
            if got != reference {
                let at = got.iter().zip(&reference).position(|(a, b)| a != b).unwrap_or(got.len().min(n));
                r.mismatches.push(format!("countdown({arg}) paused after {k}: traces differ at {at}"));
            }
        }
    }
    r.elapsed = start.elapsed();
    Ok(r)
}
