//! End-to-end checks of the batch surface: subcommands, exit codes, and the
//! machine-parseable error line.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> PathBuf {
    let mut p = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    p.pop();
    p.pop();
    p.push("target");
    p.push(if cfg!(debug_assertions) { "debug" } else { "release" });
    p.push("rvrec");
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary must run")
}

fn write_toy_ratings(dir: &Path) -> PathBuf {
    let mut text = String::new();
    for u in 1..=6 {
        for i in 1..=6 {
            let r = if (u + i) % 7 == 0 { 2 } else { 5 };
            text.push_str(&format!("{u}::{i}::{r}::0\n"));
        }
    }
    let path = dir.join("ratings.dat");
    std::fs::write(&path, text).unwrap();
    path
}

fn common_sets(data: &Path) -> Vec<String> {
    vec![
        format!("data={}", data.display()),
        "k_core=2".into(),
        "d=6".into(),
        "epochs=3".into(),
        "batch=8".into(),
        "train_negatives=3".into(),
        "eval_negatives=4".into(),
    ]
}

fn with_sets(base: &[&str], sets: &[String]) -> Vec<String> {
    let mut args: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    for s in sets {
        args.push("--set".into());
        args.push(s.clone());
    }
    args
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let ratings = write_toy_ratings(dir.path());
    let sets = common_sets(&ratings);
    let snapshot = dir.path().join("snap.txt");
    let ckpt = dir.path().join("model.ckpt");

    let out = run(&with_sets(
        &["prepare", "--out", snapshot.to_str().unwrap()],
        &sets,
    )
    .iter()
    .map(|s| s.as_str())
    .collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("users\t"));
    assert!(stdout.contains("interactions\t"));

    let out = run(&with_sets(
        &[
            "train",
            "--snapshot",
            snapshot.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
        &sets,
    )
    .iter()
    .map(|s| s.as_str())
    .collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    assert!(dir.path().join("model.manifest.json").exists());

    let out = run(&with_sets(
        &[
            "evaluate",
            "--snapshot",
            snapshot.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--explain",
        ],
        &sets,
    )
    .iter()
    .map(|s| s.as_str())
    .collect::<Vec<_>>());
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    for key in ["hr@5\t", "hr@10\t", "ndcg@5\t", "ndcg@10\t", "pn@1\t", "ps@5\t", "fns@5\t"] {
        assert!(stdout.contains(key), "missing {key} in:\n{stdout}");
    }

    let out = run(&with_sets(
        &[
            "explain",
            "--snapshot",
            snapshot.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--users",
            "0,1",
            "--k",
            "3",
        ],
        &sets,
    )
    .iter()
    .map(|s| s.as_str())
    .collect::<Vec<_>>());
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let first = stdout.lines().next().expect("at least one explanation");
    assert_eq!(first.split('\t').count(), 5, "dump format: user item rank coalition phi");

    let emb = dir.path().join("emb.txt");
    let out = run(&with_sets(
        &[
            "dump-embeddings",
            "--snapshot",
            snapshot.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            emb.to_str().unwrap(),
        ],
        &sets,
    )
    .iter()
    .map(|s| s.as_str())
    .collect::<Vec<_>>());
    assert!(out.status.success());
    let text = std::fs::read_to_string(&emb).unwrap();
    assert!(text.lines().all(|l| l.starts_with("U ") || l.starts_with("I ")));
}

#[test]
fn missing_file_yields_categorized_error_and_nonzero_exit() {
    let out = run(&[
        "prepare",
        "--set",
        "data=/nonexistent/ratings.dat",
        "--out",
        "/tmp/never-written-snapshot.txt",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let first = stderr.lines().next().unwrap_or("");
    assert!(
        first.starts_with("error: io:") || first.starts_with("error: data:"),
        "unexpected error line: {first}"
    );
}

#[test]
fn bad_config_value_is_a_config_error() {
    let out = run(&["prepare", "--set", "lambda1=-3", "--out", "/tmp/x.txt"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.starts_with("error: config:"),
        "unexpected: {stderr}"
    );
}
