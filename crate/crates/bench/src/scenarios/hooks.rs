//! Interpreter throughput with and without the debugger hooks compiled in.

use std::sync::atomic::AtomicBool;
use std::time::Instant;

use anyhow::{ensure, Result};
use oot_core::corpus;
use oot_core::vm::{PrimitiveTable, RunControl, RunExit, StackLimits, VmState};

use crate::node::parse;
use crate::report::ScenarioResult;

#[derive(Debug, Clone, Copy)]
pub struct HooksConfig {
    pub arg: i64,
    /// Instructions per timed run.
    pub budget: u64,
    pub trials: usize,
}

impl Default for HooksConfig {
    fn default() -> Self {
        HooksConfig { arg: 1 << 20, budget: 4_000_000, trials: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HooksResult {
    pub with_hooks_ips: f64,
    pub without_hooks_ips: f64,
}

impl HooksResult {
    pub fn ratio(&self) -> f64 {
        self.with_hooks_ips / self.without_hooks_ips
    }

    pub fn to_result(&self) -> ScenarioResult {
        let mut r = ScenarioResult::default();
        r.push("ips_with_hooks", 1, self.with_hooks_ips);
        r.push("ips_without_hooks", 0, self.without_hooks_ips);
        r.push("hooks_ratio", 1, self.ratio());
        r
    }
}

fn timed<const HOOKS: bool>(start: &VmState, budget: u64, flag: &AtomicBool) -> Result<f64> {
    let mut vm = start.clone();
    let ctl = RunControl { budget: Some(budget), interrupt: Some(flag), return_depth: None };
    let t = Instant::now();
    let exit = vm.run_with::<HOOKS>(ctl);
    let secs = t.elapsed().as_secs_f64();
    ensure!(exit == RunExit::BudgetExhausted, "run ended early: {exit:?}");
    Ok(budget as f64 / secs)
}

/// Best of `trials` for each build of the run loop. The hooked run has a
/// breakpoint set and an interrupt flag to poll, neither of which fires.
pub fn hooks_overhead(cfg: &HooksConfig) -> Result<HooksResult> {
    let depth = cfg.arg as usize + 16;
    let limits = StackLimits { max_call_depth: depth, max_value_stack: 2 * depth + 64 };
    let m = parse(&corpus::countdown_with_arg(cfg.arg))?;
    let mut vm = VmState::instantiate(m, &PrimitiveTable::new(), limits)?;
    // Somewhere the run never reaches within the budget.
    vm.add_breakpoint(oot_core::CodeOffset::new(0, 0));
    let flag = AtomicBool::new(false);
    let mut with = 0.0f64;
    let mut without = 0.0f64;
    for _ in 0..cfg.trials.max(1) {
        without = without.max(timed::<false>(&vm, cfg.budget, &flag)?);
        with = with.max(timed::<true>(&vm, cfg.budget, &flag)?);
    }
    Ok(HooksResult { with_hooks_ips: with, without_hooks_ips: without })
}
