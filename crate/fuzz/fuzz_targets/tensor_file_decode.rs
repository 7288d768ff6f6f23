#![no_main]

use ctxmod_autodiff::TensorFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = TensorFile::from_bytes(data) {
        let again = TensorFile::from_bytes(&f.to_bytes()).expect("re-encoded file decodes");
        assert_eq!(again.to_bytes(), f.to_bytes());
    }
});
