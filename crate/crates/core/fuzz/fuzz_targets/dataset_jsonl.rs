#![no_main]

use libfuzzer_sys::fuzz_target;
use roirl::engine::OfflineDataset;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = OfflineDataset::from_jsonl(s) {
        assert_eq!(OfflineDataset::from_jsonl(&ds.to_jsonl()).unwrap(), ds);
    }
});
