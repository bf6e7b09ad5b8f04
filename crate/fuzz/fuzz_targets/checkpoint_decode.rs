#![no_main]

use candle_core::Device;
use libfuzzer_sys::fuzz_target;
use mpsenet::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data, &Device::Cpu) {
        let _ = ck.generator(&Device::Cpu);
    }
});
