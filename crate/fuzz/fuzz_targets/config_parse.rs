#![no_main]

use libfuzzer_sys::fuzz_target;
use lrssm_cli::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::parse(text, &[]) {
        let again = cfg.to_toml().expect("a parsed config serializes");
        let back = ExperimentConfig::parse(&again, &[]).expect("serialized config parses");
        assert_eq!(back.to_toml().expect("serializes"), again);
    }
});
