#![no_main]

use libfuzzer_sys::fuzz_target;
use m3et::harness::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let bytes = ck.to_bytes().expect("parsed checkpoint re-encodes");
        assert_eq!(Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint parses"), ck);
    }
});
