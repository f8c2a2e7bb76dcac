#![no_main]

use libfuzzer_sys::fuzz_target;
use roirl::answerkit::{equivalent, extract_boxed, parse_answer, parse_with_budget};

// Input is two answers separated by a NUL byte.
fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let (a, b) = s.split_once('\0').unwrap_or((s, ""));
    let boxed = extract_boxed(a);
    let _ = parse_answer(&boxed.raw);
    let _ = parse_with_budget(a, 2_000);
    assert!(equivalent(a, a));
    assert_eq!(equivalent(a, b), equivalent(b, a));
});
