use std::path::PathBuf;

use viprom::encoder::{init_encoder, load_checkpoint, save_checkpoint, Architecture, EncoderConfig, Stage};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/legacy_tiny_conv.vpck")
}

fn fixture_config() -> EncoderConfig {
    EncoderConfig { width: 2, ..EncoderConfig::new(Architecture::TinyConv, 8, (16, 16)) }
}

#[test]
fn file_from_an_older_build_still_loads() {
    let bytes = std::fs::read(fixture()).unwrap();
    assert!(String::from_utf8_lossy(&bytes).contains("\"code_version\": \"0.0.7\""));
    let old = load_checkpoint::<f32>(&fixture()).unwrap();
    assert_eq!(old.stage, Stage::Scratch);
    assert_eq!(old.config, fixture_config());
    assert_eq!(old.fingerprint, "836d3f066d77bad83155b19f735547373d5da06cbe52787df49567330fa2b7ab");
    // Initialisation is part of the format contract: same config and seed, same bits.
    let fresh = init_encoder::<f32>(fixture_config(), 7).unwrap();
    assert_eq!(old, fresh);
}

#[test]
fn resaving_changes_only_the_version_stamp() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("resaved.vpck");
    save_checkpoint(&load_checkpoint::<f32>(&fixture()).unwrap(), &p).unwrap();
    let (a, b) = (std::fs::read(fixture()).unwrap(), std::fs::read(&p).unwrap());
    assert_eq!(a.len(), b.len());
    let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
    assert!(!diff.is_empty() && diff.len() <= 5, "{diff:?}");
}

#[test]
fn wrong_precision_schema_or_payload_is_rejected() {
    assert!(load_checkpoint::<f64>(&fixture()).unwrap_err().to_string().contains("F32"));
    let dir = tempfile::tempdir().unwrap();
    let bytes = std::fs::read(fixture()).unwrap();

    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    let p = dir.path().join("v2.vpck");
    std::fs::write(&p, v2).unwrap();
    assert!(load_checkpoint::<f32>(&p).unwrap_err().to_string().contains("schema version 2"));

    let mut flipped = bytes;
    let n = flipped.len();
    flipped[n - 40] ^= 0x01;
    let p = dir.path().join("flipped.vpck");
    std::fs::write(&p, flipped).unwrap();
    assert!(load_checkpoint::<f32>(&p).is_err());
}
