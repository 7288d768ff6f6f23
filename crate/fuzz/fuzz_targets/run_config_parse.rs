#![no_main]

use std::collections::BTreeMap;

use ctxmod_cli::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(rc) = RunConfig::parse(s) {
        let flags: BTreeMap<String, bool> = rc.entries.keys().map(|k| (k.clone(), k.len() % 2 == 0)).collect();
        let _ = rc.to_args("fuzz", &flags, &[]);
    }
});
