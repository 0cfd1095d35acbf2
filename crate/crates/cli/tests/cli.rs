use std::path::Path;
use std::process::Command;

fn fssr(args: &[&str], cache: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_fssr"))
        .args(args)
        .env("FSSR_CACHE_DIR", cache)
        .output()
        .expect("spawn fssr");
    assert!(
        out.status.success(),
        "fssr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synthetic_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let cache = dir.path().join("cache");

    fssr(&["synth", "--out", &p("corpus"), "--speakers", "6", "--utterances", "5", "--test-per-speaker", "2"], &cache);
    let summary = fssr(
        &["prepare-splits", "--dataset", "voxceleb", "--root", &p("corpus"), "--out", &p("toy.manifest"), "--n-classes", "6", "--k-per-class", "3"],
        &cache,
    );
    assert!(summary.contains("6 speakers, 18 train / 12 test"), "{summary}");

    fssr(
        &[
            "train", "--manifest", &p("toy.manifest"), "--arch", "vgg_m", "--out", &p("run"),
            "--set", "max_steps=2", "--set", "batch_size=6", "--set", "max_epochs=1",
        ],
        &cache,
    );
    let resolved = std::fs::read_to_string(dir.path().join("run/resolved.conf")).unwrap();
    assert!(resolved.contains("max_steps = 2"), "{resolved}");
    assert!(dir.path().join("run/model.ckpt").is_file());
    assert!(std::fs::read_dir(&cache).unwrap().count() > 0);

    let metrics = fssr(
        &[
            "fewshot-eval", "--manifest", &p("toy.manifest"), "--checkpoint", &p("run/model.ckpt"), "--out", &p("eval"),
            "--ways", "5", "--shots", "1", "--n-query", "1", "--episodes", "20",
        ],
        &cache,
    );
    assert!(metrics.contains("\"n_way\":5"), "{metrics}");

    let files = fssr(&["report", &p("run/records.jsonl"), &p("eval/records.jsonl"), "--out", &p("report")], &cache);
    let table = std::fs::read_to_string(files.trim()).unwrap();
    assert!(table.contains("vgg_m"), "{table}");
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fssr"))
        .args(["prepare-splits", "--dataset", "vctk", "--root", "/nonexistent/corpus", "--out"])
        .arg(dir.path().join("m"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/corpus"));
}
