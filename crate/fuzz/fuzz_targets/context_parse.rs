#![no_main]

use ctxmod_quad::ContextId;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(ctx) = s.parse::<ContextId>() {
        let again: ContextId = ctx.label().parse().expect("label parses");
        assert_eq!(again, ctx);
    }
});
