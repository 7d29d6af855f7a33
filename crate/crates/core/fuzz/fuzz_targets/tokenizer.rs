#![no_main]

use libfuzzer_sys::fuzz_target;
use m3et::model::tokenize_text;

fuzz_target!(|data: &[u8]| {
    let Some((&len, rest)) = data.split_first() else { return };
    let text = String::from_utf8_lossy(rest);
    let max_len = len as usize;
    let (ids, spans) = tokenize_text(&text, max_len);
    assert_eq!(ids.len(), max_len);
    assert!(spans.end() <= max_len);
});
