#![no_main]

use libfuzzer_sys::fuzz_target;
use lrssm::model::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode().expect("a decoded checkpoint re-encodes");
        let back = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(back.params.values.len(), ck.params.values.len());
    }
});
