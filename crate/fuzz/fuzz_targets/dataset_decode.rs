#![no_main]

use libfuzzer_sys::fuzz_target;
use lrssm_cli::dataset::SequenceDataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = SequenceDataset::decode(data) {
        let bytes = ds.encode().expect("a decoded dataset re-encodes");
        SequenceDataset::decode(&bytes).expect("re-encoded dataset decodes");
    }
});
