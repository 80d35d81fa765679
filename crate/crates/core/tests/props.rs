mod gen;
mod suites;

#[test]
fn generated_programs_validate_and_finish() {
    suites::generated_programs_validate_and_finish();
}

#[test]
fn module_blob_round_trip() {
    suites::module_blob_round_trip();
}

#[test]
fn session_stream_round_trip_from_vm() {
    suites::session_stream_round_trip_from_vm();
}

#[test]
fn session_stream_round_trip_arbitrary() {
    suites::session_stream_round_trip_arbitrary();
}

#[test]
fn interrupt_round_trip() {
    suites::interrupt_round_trip();
}

#[test]
fn response_round_trip() {
    suites::response_round_trip();
}

#[test]
fn proxy_reply_round_trip() {
    suites::proxy_reply_round_trip();
}

#[test]
fn resume_equivalence() {
    suites::resume_equivalence();
}

#[test]
fn invoke_isolated_restores_execution_state() {
    suites::invoke_isolated_restores_execution_state();
}

#[test]
fn state_edits_are_type_safe() {
    suites::state_edits_are_type_safe();
}

#[test]
fn breakpoint_policy_postconditions() {
    suites::breakpoint_policy_postconditions();
}

#[test]
fn execution_is_deterministic() {
    suites::execution_is_deterministic();
}

#[test]
fn run_and_step_agree() {
    suites::run_and_step_agree();
}
