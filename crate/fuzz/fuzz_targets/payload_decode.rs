#![no_main]

use ctxmod_quad::decode_payload;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&side, payload)) = data.split_first() else { return };
    let n = side as usize % 65;
    if let Ok(images) = decode_payload(payload, n) {
        assert_eq!(images.len() * 3 * n * n * 4, payload.len());
    }
});
