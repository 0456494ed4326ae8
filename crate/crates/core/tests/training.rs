use std::fs;

use wam_core::harness::{smoothed_ends, train, TrainConfig};
use wam_core::sim::{generate_set, save_clip, write_manifest, Manifest, ManifestEntry, Scenario, SimConfig};
use wam_core::WamError;

fn write_set(dir: &std::path::Path, clips: usize) -> std::path::PathBuf {
    let set = generate_set(17, &Scenario::ALL, clips, 3, &SimConfig::default()).unwrap();
    let mut m = Manifest::default();
    for (i, c) in set.iter().enumerate() {
        let name = format!("c{i}.bin");
        save_clip(c, &dir.join(&name)).unwrap();
        m.clips.push(ManifestEntry {
            path: name.into(),
            scenario: c.scenario,
            seed: c.seed,
            chunks: c.chunks,
        });
    }
    let path = dir.join("manifest.json");
    write_manifest(&m, &path).unwrap();
    path
}

#[test]
fn smoke_train_reduces_loss_at_desk_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        manifest: write_set(dir.path(), 64),
        iterations: 200,
        ..TrainConfig::default()
    };
    let out = train(&cfg).unwrap();
    assert_eq!(out.log.len(), 200);
    let (first, last) = smoothed_ends(&out.log, 20);
    assert!(last < 0.8 * first, "smoothed loss {first:.4} -> {last:.4}");
}

#[test]
fn malformed_clip_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_set(dir.path(), 3);
    fs::write(dir.path().join("c1.bin"), b"WAMC\x01\x00\x00\x00garbage").unwrap();
    let cfg = TrainConfig {
        manifest,
        iterations: 1,
        ..TrainConfig::default()
    };
    match train(&cfg) {
        Err(WamError::MalformedClip { path, .. }) => assert!(path.ends_with("c1.bin")),
        other => panic!("expected a malformed-clip error, got {:?}", other.map(|o| o.log.len())),
    }
}
