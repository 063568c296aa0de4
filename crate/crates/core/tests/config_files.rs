use std::path::PathBuf;

use advcloak::config::RunConfig;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn toy_config_matches_defaults() {
    let cfg = RunConfig::load(&configs_dir().join("toy.cfg")).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.hash(), RunConfig::default().hash());
}

#[test]
fn bad_file_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("broken.cfg");
    std::fs::write(&p, "[stage1]\nepochs = \"three\"\n").unwrap();
    let msg = RunConfig::load(&p).unwrap_err().to_string();
    assert!(msg.contains("broken.cfg"), "{msg}");
}
