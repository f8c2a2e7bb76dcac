#![no_main]

use libfuzzer_sys::fuzz_target;
use roirl::config::CliConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = CliConfig::parse(s) {
        assert_eq!(CliConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
});
