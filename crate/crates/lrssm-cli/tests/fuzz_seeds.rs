//! The checked-in fuzz corpus must decode, and damaged copies must fail
//! cleanly rather than panic.

use std::path::{Path, PathBuf};

use lrssm::model::Checkpoint;
use lrssm_cli::config::ExperimentConfig;
use lrssm_cli::dataset::SequenceDataset;

fn seeds(target: &str) -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

/// Every prefix at a coarse stride plus single-byte flips.
fn damaged(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let stride = (bytes.len() / 64).max(1);
    for n in (0..bytes.len()).step_by(stride) {
        out.push(bytes[..n].to_vec());
    }
    for i in (0..bytes.len()).step_by(stride) {
        let mut b = bytes.to_vec();
        b[i] ^= 0xA5;
        out.push(b);
    }
    out
}

#[test]
fn dataset_seeds_roundtrip() {
    for p in seeds("dataset_decode") {
        let bytes = std::fs::read(&p).unwrap();
        let ds = SequenceDataset::decode(&bytes).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(SequenceDataset::decode(&ds.encode().unwrap()).is_ok());
        for b in damaged(&bytes) {
            if let Ok(d) = SequenceDataset::decode(&b) {
                d.validate().unwrap();
            }
        }
    }
}

#[test]
fn checkpoint_seeds_roundtrip() {
    for p in seeds("checkpoint_decode") {
        let bytes = std::fs::read(&p).unwrap();
        let ck = Checkpoint::decode(&bytes).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(Checkpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
        for b in damaged(&bytes) {
            let _ = Checkpoint::decode(&b);
        }
    }
}

#[test]
fn config_seeds_parse() {
    for p in seeds("config_parse") {
        let text = std::fs::read_to_string(&p).unwrap();
        let cfg = ExperimentConfig::parse(&text, &[]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        let again = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&again, &[]).unwrap(), cfg);
        for b in damaged(text.as_bytes()) {
            if let Ok(t) = std::str::from_utf8(&b) {
                let _ = ExperimentConfig::parse(t, &[]);
            }
        }
    }
}
