#![no_main]

use libfuzzer_sys::fuzz_target;
use roirl::eval::{metrics_csv, parse_metrics_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(reports) = parse_metrics_csv(s) {
        let text = metrics_csv(&reports);
        let again = parse_metrics_csv(&text).unwrap();
        assert_eq!(metrics_csv(&again), text);
    }
});
