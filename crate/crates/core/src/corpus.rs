//! The reference programs used by the experiments and tests.

pub const COUNTDOWN: &str = include_str!("../corpus/countdown.wast");
pub const TEMP_BROADCAST: &str = include_str!("../corpus/temp_broadcast.wast");
pub const TEMP_MONITOR: &str = include_str!("../corpus/temp_monitor.wast");
pub const TEMP_MONITOR_FIXED: &str = include_str!("../corpus/temp_monitor_fixed.wast");
/// Debugger configuration for the temperature monitor walkthrough.
pub const DEBUGGER_CONFIG: &str = include_str!("../corpus/debugger.json");

/// Line holding the `i64.const 0` base case of `$countdown`.
pub const COUNTDOWN_BASE_LINE: u32 = 27;
/// Line of the countdown argument pushed by `$main`.
pub const COUNTDOWN_ARG_LINE: u32 = 31;
/// First line of the temperature monitor's main loop body.
pub const TMA_LOOP_LINE: u32 = 48;
/// Line of the `f32.div` in `$avgTemp`.
pub const TMA_DIV_LINE: u32 = 44;

/// The countdown program with `$main` passing `arg` instead of 2. Line
/// numbering is unchanged.
pub fn countdown_with_arg(arg: i64) -> String {
    let mut out = String::with_capacity(COUNTDOWN.len() + 16);
    for (i, line) in COUNTDOWN.split_inclusive('\n').enumerate() {
        if i + 1 == COUNTDOWN_ARG_LINE as usize {
            out.push_str(&line.replace("(i64.const 2)", &format!("(i64.const {arg})")));
        } else {
            out.push_str(line);
        }
    }
    out
}
