#![no_main]

use libfuzzer_sys::fuzz_target;
use roirl::tasks::{read_labels_jsonl, read_tasks_jsonl};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let tasks = read_tasks_jsonl(s);
    let labels = read_labels_jsonl(s);
    if let (Ok(t), Ok(l)) = (tasks, labels) {
        let _ = t.splits(&l);
    }
});
