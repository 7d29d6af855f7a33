#![no_main]

use libfuzzer_sys::fuzz_target;
use m3et::harness::dataset::{decode_classes, decode_f32_le, encode_f32_le};

fuzz_target!(|data: &[u8]| {
    let Some((&classes, rest)) = data.split_first() else { return };
    if let Ok(v) = decode_f32_le(rest, rest.len() / 4) {
        assert_eq!(encode_f32_le(&v), rest);
    }
    let _ = decode_classes(rest, rest.len(), classes as usize);
});
