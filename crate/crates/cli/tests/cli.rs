use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn epochreg(workspace: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epochreg"))
        .arg("--workspace")
        .arg(workspace)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Two epochs of two images each: small enough for a quick full run.
const SMALL_SCENE: &str = r#"{
    "flight": {"strips": 1, "images_per_strip": 2},
    "epochs": [
        {"id": "old", "offset": [20.0, -15.0], "seed": 11, "rotation_noise_deg": 0.5, "position_noise": 2.0},
        {"id": "new", "seed": 12}
    ],
    "tie_points_per_epoch": 120,
    "check_points": 10
}"#;

fn synth_workspace(root: &Path) {
    std::fs::create_dir_all(root).unwrap();
    std::fs::write(root.join("scene.spec.json"), SMALL_SCENE).unwrap();
    ok(epochreg(root, &["synth", "--spec", "scene.spec.json"]));
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn unknown_epoch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("config.json"),
        r#"{"epochs": [{"id": "a", "dir": "a"}, {"id": "b", "dir": "b"}], "reference": "zz"}"#,
    )
    .unwrap();
    for stage in ["coreg", "run"] {
        let out = epochreg(dir.path(), &[stage]);
        assert!(!out.status.success());
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains("unknown reference epoch"), "{stderr}");
    }
}

#[test]
fn stage_errors_are_tagged() {
    let dir = tempfile::tempdir().unwrap();
    // valid configuration, but the epoch directories are missing
    std::fs::write(dir.path().join("config.json"), r#"{"epochs": [{"id": "a", "dir": "a"}, {"id": "b", "dir": "b"}]}"#)
        .unwrap();
    let out = epochreg(dir.path(), &["coreg"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stage coreg failed"), "{stderr}");

    // stages need the artifacts of the stages before them
    let out = epochreg(dir.path(), &["filter"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage filter failed"));

    let missing = epochreg(dir.path(), &["--config", "nope.json", "coreg"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));
}

#[test]
fn synth_writes_a_workspace() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("scene.spec.json"), SMALL_SCENE).unwrap();
    let out = ok(epochreg(root, &["--seed", "9", "synth", "--spec", "scene.spec.json"]));
    let truth: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(truth["reference_epoch"], "new");
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 9);
    for f in ["old/orientation.json", "old/dsm.bin", "old/ties.txt", "old/checkpoints.txt", "new/images/new_s0i1.pgm"] {
        assert!(root.join(f).is_file(), "{f}");
    }
}

#[test]
fn run_equals_the_manual_chain() {
    let dir = tempfile::tempdir().unwrap();
    let (full, chain) = (dir.path().join("full"), dir.path().join("chain"));
    synth_workspace(&full);
    synth_workspace(&chain);
    assert_eq!(snapshot(&full), snapshot(&chain));

    let summary = ok(epochreg(&full, &["--jobs", "1", "run"]));
    let summary: serde_json::Value = serde_json::from_slice(&summary.stdout).unwrap();
    assert!(summary["filter"]["all_nested"].as_bool().unwrap());

    for stage in ["coreg", "match", "filter", "ba", "checkpt", "dod", "displace"] {
        ok(epochreg(&chain, &["--jobs", "3", stage]));
    }
    let mut a = snapshot(&full.join("out"));
    let b = snapshot(&chain.join("out"));
    assert!(a.remove(Path::new("summary.json")).is_some());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (path, bytes) in &a {
        assert!(bytes == &b[path], "{} differs", path.display());
    }
}

#[test]
fn guided_mode_override() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth_workspace(root);
    ok(epochreg(root, &["coreg"]));
    let out = ok(epochreg(root, &["match", "--mode", "guided"]));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["mode"], "guided");
    assert!(summary["pairs"].as_array().unwrap().iter().any(|p| p["tentative"].as_u64().unwrap() > 0));
    let bad = epochreg(root, &["match", "--mode", "dense"]);
    assert!(!bad.status.success());
}
