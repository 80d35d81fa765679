//! One PASS/FAIL line per acceptance criterion; exits nonzero on any FAIL.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

use oot_bench::scenarios::hooks::{hooks_overhead, HooksConfig};
use oot_bench::scenarios::network::{network_overhead, NetworkConfig};
use oot_bench::scenarios::proxy::{proxy_overhead, ProxyConfig};
use oot_bench::scenarios::resume::{resume_equivalence, ResumeConfig};
use oot_bench::scenarios::scaling::{session_scaling, ScalingConfig};
use oot_bench::scenarios::tma::{tma_walkthrough, TmaConfig};
use oot_bench::stats::{r_squared, spearman};

#[allow(dead_code)]
#[path = "../../core/tests/gen/mod.rs"]
mod gen;
#[allow(dead_code)]
#[path = "../../core/tests/suites/mod.rs"]
mod suites;
#[allow(dead_code)]
#[path = "../../net/tests/frames/mod.rs"]
mod frames;

type Check = anyhow::Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Check);

fn resume() -> Check {
    let r = resume_equivalence(&ResumeConfig::default())?;
    let secs = r.elapsed.as_secs_f64();
    let ok = r.checked == 80 && r.mismatches.is_empty() && secs < 10.0;
    Ok((ok, format!("{} pause points, {} mismatches, {secs:.2} s", r.checked, r.mismatches.len())))
}

fn network() -> Check {
    let r = network_overhead(&NetworkConfig::default())?;
    let oot = &r.out_of_things;
    let base = &r.baseline;
    let ok = oot == &[311; 6]
        && base == &[107, 223, 339, 442, 545, 635]
        && base.windows(2).all(|w| w[1] > w[0])
        && (2..base.len()).all(|k| base[k] > oot[k]);
    Ok((ok, format!("out-of-things {oot:?}, baseline {base:?}")))
}

fn linearity() -> Check {
    let cfg = ScalingConfig { args: (4..=10).map(|e| 1i64 << e).collect(), reps: 1, batch: 1, ..Default::default() };
    let pts = session_scaling(&cfg)?;
    let xs: Vec<f64> = pts.iter().map(|p| p.arg as f64).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.session_bytes as f64).collect();
    let r2 = r_squared(&xs, &ys).unwrap_or(0.0);
    let bigger = pts.iter().all(|p| p.session_bytes > p.dump_bytes);
    Ok((r2 >= 0.999 && bigger, format!("R^2 {r2:.6} over {} sizes, session > dump: {bigger}", pts.len())))
}

fn scaling() -> Check {
    // Doubling sizes up to a local call depth of 8192, then one past it.
    let mut cfg = ScalingConfig { args: (4..=12).map(|e| 1i64 << e).chain([16384]).collect(), ..Default::default() };
    cfg.local_limits.max_call_depth = 8192;
    let pts = session_scaling(&cfg)?;
    let timed: Vec<_> = pts.iter().filter_map(|p| Some((p.session_bytes as f64, p.reconstruct_ms?))).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = timed.iter().copied().unzip();
    let rho = spearman(&xs, &ys).unwrap_or(0.0);
    let walled: Vec<i64> = pts.iter().filter(|p| p.capacity_exceeded()).map(|p| p.arg).collect();
    let ok = timed.len() >= 8 && rho > 0.95 && walled == [16384];
    Ok((ok, format!("Spearman {rho:.3} over {} sizes, capacity exceeded at {walled:?}", timed.len())))
}

fn proxy() -> Check {
    let r = proxy_overhead(&ProxyConfig { samples: 30 })?;
    let (w, p) = (r.without_summary(), r.proxy_summary());
    let inc = r.mean_increase();
    let ok = (0.99..=1.02).contains(&w.mean) && (0.99..=1.05).contains(&p.mean) && inc <= 0.05;
    Ok((
        ok,
        format!(
            "mean {:.4} s without, {:.4} s with {} proxy calls, increase {:+.2}%",
            w.mean,
            p.mean,
            r.proxy_calls,
            inc * 100.0
        ),
    ))
}

fn tma() -> Check {
    let t = tma_walkthrough(&TmaConfig::default())?;
    let failed: Vec<&str> = t.checkpoints.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    Ok((t.passed(), format!("{} checkpoints, failed {failed:?}", t.checkpoints.len())))
}

fn properties() -> Check {
    let all: [(&str, fn()); 15] = [
        ("generated_programs_validate_and_finish", suites::generated_programs_validate_and_finish),
        ("module_blob_round_trip", suites::module_blob_round_trip),
        ("session_stream_round_trip_from_vm", suites::session_stream_round_trip_from_vm),
        ("session_stream_round_trip_arbitrary", suites::session_stream_round_trip_arbitrary),
        ("interrupt_round_trip", suites::interrupt_round_trip),
        ("response_round_trip", suites::response_round_trip),
        ("proxy_reply_round_trip", suites::proxy_reply_round_trip),
        ("frames_round_trip_in_order", frames::frames_round_trip_in_order),
        ("large_frame_round_trips", frames::large_frame_round_trips),
        ("resume_equivalence", suites::resume_equivalence),
        ("invoke_isolated_restores_execution_state", suites::invoke_isolated_restores_execution_state),
        ("state_edits_are_type_safe", suites::state_edits_are_type_safe),
        ("breakpoint_policy_postconditions", suites::breakpoint_policy_postconditions),
        ("execution_is_deterministic", suites::execution_is_deterministic),
        ("run_and_step_agree", suites::run_and_step_agree),
    ];
    let failed: Vec<&str> = all.iter().filter(|(_, f)| catch_unwind(f).is_err()).map(|(n, _)| *n).collect();
    Ok((failed.is_empty(), format!("{} suites at {} cases, failed {failed:?}", all.len(), suites::CASES)))
}

fn hooks() -> Check {
    let r = hooks_overhead(&HooksConfig::default())?;
    Ok((
        r.ratio() >= 0.5,
        format!(
            "ratio {:.3} ({:.1} vs {:.1} M instr/s)",
            r.ratio(),
            r.with_hooks_ips / 1e6,
            r.without_hooks_ips / 1e6
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("resume equivalence", resume),
        ("network overhead", network),
        ("session size linearity", linearity),
        ("session scaling", scaling),
        ("proxy overhead", proxy),
        ("tma walkthrough", tma),
        ("property suites", properties),
        ("debug hooks overhead", hooks),
    ];
    let mut all = true;
    for (name, f) in criteria {
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(_) => (false, "panicked".to_string()),
        };
        all &= ok;
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
