use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: [&str; 12] = [
    "--set",
    "mixture.n_train=600",
    "--set",
    "net.hidden_width=8",
    "--set",
    "train.steps=20",
    "--set",
    "train.batch_size=32",
    "--set",
    "metrics.n_real=200",
    "--set",
    "metrics.grid=5",
];

fn subflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subflow")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn find(dir: &Path, suffix: &str) -> PathBuf {
    let mut hits: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    hits.sort();
    hits.pop().unwrap_or_else(|| panic!("no {suffix} in {}", dir.display()))
}

#[test]
fn help_succeeds_and_usage_errors_exit_one() {
    assert_eq!(subflow(&["--help"]).status.code(), Some(0));
    assert_eq!(subflow(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(subflow(&["ablate"]).status.code(), Some(1));
    assert_eq!(subflow(&["ablate", "--drop-k", "--uniform-sampling"]).status.code(), Some(1));
}

#[test]
fn invalid_config_exits_one_and_missing_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad = subflow(&["train", "--out", out, "--set", "train.steps=banana"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&bad.stderr).is_empty());
    let unknown = subflow(&["train", "--out", out, "--set", "train.colour=red"]);
    assert_eq!(unknown.status.code(), Some(1));
    let missing = subflow(&["generate", "--out", out, "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn train_generate_evaluate_and_check_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["train", "--out", out];
    args.extend(TINY);
    let o = subflow(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = find(dir.path(), ".ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let train_manifest = find(dir.path(), ".manifest.json");

    let mut args = vec!["generate", "--out", out, "--checkpoint", ckpt, "--count", "50", "--nfe", "2", "--trajectory"];
    args.extend(TINY);
    assert!(subflow(&args).status.success());
    let samples = std::fs::read_to_string(find(dir.path(), ".samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 51);
    assert!(find(dir.path(), ".svg").exists());
    assert!(find(dir.path(), ".trajectory.csv").exists());

    let mut args = vec!["generate", "--out", out, "--checkpoint", ckpt, "--class", "7"];
    args.extend(TINY);
    assert_eq!(subflow(&args).status.code(), Some(1));

    let mut args = vec!["evaluate", "--out", out, "--checkpoint", ckpt, "--count", "200"];
    args.extend(TINY);
    let o = subflow(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("run_id,nfe,w,frechet,precision,recall,mode_tv,coverage_count,field_rmse"));
    assert_eq!(metrics.lines().count(), 2);

    let tm = train_manifest.to_str().unwrap();
    let ok = subflow(&["check", tm]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));

    let loss = find(dir.path(), ".loss.csv");
    let mut text = std::fs::read_to_string(&loss).unwrap();
    text.push('\n');
    std::fs::write(&loss, text).unwrap();
    assert_ne!(subflow(&["check", tm]).status.code(), Some(0));
}

#[test]
fn cluster_writes_assignments_for_a_feature_file() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("features.csv");
    let mut text = String::from("f0,f1,class\n");
    for i in 0..40 {
        let side = if i % 4 == 0 { 5.0 } else { -5.0 };
        text.push_str(&format!("{},{},{}\n", side + 0.01 * i as f64, 0.02 * i as f64, i % 2));
    }
    std::fs::write(&feats, text).unwrap();
    let out = dir.path().join("out");
    let o = subflow(&["cluster", "--features", feats.to_str().unwrap(), "--k", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let assignments = std::fs::read_to_string(find(&out, ".assignments.csv")).unwrap();
    assert_eq!(assignments.lines().count(), 41);
    let manifest = find(&out, ".manifest.json");
    assert_eq!(subflow(&["check", manifest.to_str().unwrap()]).status.code(), Some(0));
}
