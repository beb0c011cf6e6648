//! Replays the checked-in fuzz corpus through every decoder. Seeds without
//! a `bad`/`truncated` prefix must decode.

use std::fs;
use std::path::{Path, PathBuf};

use qfm_core::data::{parse_manifest, ppm};
use qfm_core::{Model, TrainConfig};
use qfm_tensor::checkpoint;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn expect_ok(name: &str) -> bool {
    !(name.starts_with("bad") || name.starts_with("truncated"))
}

#[test]
fn checkpoint_seeds() {
    for (name, bytes) in seeds("checkpoint_decode") {
        let r = checkpoint::decode(&bytes);
        assert_eq!(r.is_ok(), expect_ok(&name), "{name}: {:?}", r.err());
        assert!(Model::from_checkpoint_bytes(&bytes).is_err(), "{name} is not a full model");
    }
}

#[test]
fn ppm_seeds() {
    for (name, bytes) in seeds("ppm_decode") {
        assert_eq!(ppm::decode(&bytes).is_ok(), expect_ok(&name), "{name}");
    }
}

#[test]
fn manifest_seeds() {
    for (name, bytes) in seeds("manifest_parse") {
        let text = String::from_utf8(bytes).unwrap();
        let r = parse_manifest(&text, Path::new("/nonexistent"), &name);
        assert_eq!(r.is_ok(), expect_ok(&name), "{name}: {:?}", r.err());
    }
}

#[test]
fn config_seeds() {
    for (name, bytes) in seeds("config_toml") {
        let r = TrainConfig::from_toml(&String::from_utf8(bytes).unwrap());
        assert_eq!(r.is_ok(), expect_ok(&name), "{name}: {:?}", r.err());
    }
}
