#![no_main]

use libfuzzer_sys::fuzz_target;
use m3et::harness::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(run) = RunConfig::from_toml(text) {
        let again = RunConfig::from_toml(&run.to_toml().expect("valid config serializes")).expect("round trip parses");
        assert_eq!(again, run);
    }
});
