#![no_main]

use std::sync::{Arc, OnceLock};

use libfuzzer_sys::fuzz_target;
use roirl::policy::{AnyPolicy, Chain, Prompt, PromptSpace};

fn space() -> Arc<PromptSpace> {
    static SPACE: OnceLock<Arc<PromptSpace>> = OnceLock::new();
    SPACE
        .get_or_init(|| {
            Arc::new(
                PromptSpace::new(vec![
                    Prompt::new("p0", vec![Chain::new("c0", "1"), Chain::new("c1", "0.5")]),
                    Prompt::new("p1", vec![Chain::new("c0", "x"), Chain::new("c1", "y"), Chain::new("c2", "3/4")]),
                ])
                .unwrap(),
            )
        })
        .clone()
}

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(p) = AnyPolicy::decode(s, space()) {
        let again = AnyPolicy::decode(&p.encode(), space()).expect("encoded policy decodes");
        assert_eq!(again.encode(), p.encode());
    }
});
