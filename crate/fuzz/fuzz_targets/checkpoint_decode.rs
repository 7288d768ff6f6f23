#![no_main]

use ctxmod_autodiff::TensorFile;
use ctxmod_core::vae::Model;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = TensorFile::from_bytes(data) {
        let _ = Model::from_tensor_file(&f);
    }
});
