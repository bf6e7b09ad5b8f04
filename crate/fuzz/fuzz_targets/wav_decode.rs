#![no_main]

use libfuzzer_sys::fuzz_target;
use mpsenet::wav::{decode_wav, encode_wav, WavEncoding};

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = decode_wav(data) {
        assert!(w.samples().iter().all(|v| v.is_finite()));
        // anything that decodes must survive a float round trip
        let bytes = encode_wav(&w, WavEncoding::Float32).unwrap();
        assert_eq!(decode_wav(&bytes).unwrap().len(), w.len());
    }
});
