use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn shears(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shears"))
        .args(args)
        .env("SHEARS_WORKDIR", workdir)
        .output()
        .expect("spawn shears")
}

/// Small enough to run the whole pipeline in a few seconds.
const TINY: &[&str] = &[
    "--set", "model.d_model=8",
    "--set", "model.d_ff=16",
    "--set", "model.n_blocks=1",
    "--set", "task.n_train=64",
    "--set", "task.n_val=32",
    "--set", "task.n_test=32",
    "--set", "adapter.rank_choices=[4,3,2]",
    "--set", "adapter.alpha=8.0",
    "--set", "train.epochs=1",
    "--set", "search.budget=4",
];

fn tiny(cmd: &str, extra: &[&str]) -> Vec<String> {
    std::iter::once(cmd)
        .chain(TINY.iter().copied())
        .chain(extra.iter().copied())
        .map(String::from)
        .collect()
}

fn run(workdir: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    shears(workdir, &refs)
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_config_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = shears(dir.path(), &["prune", "--set", "prune.sparsty=0.5"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn out_of_range_sparsity_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = shears(dir.path(), &["prune", "--set", "prune.sparsity=1.0"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn missing_model_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &tiny("train", &[]));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &tiny("prune", &[]))), 0);
    let out = run(dir.path(), &tiny("train", &["--set", "train.learning_rate=1e30"]));
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn tampered_base_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &tiny("prune", &[]))), 0);
    let path = dir.path().join("model/b0.q.shrt");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    let out = run(dir.path(), &tiny("train", &[]));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn held_lock_exits_3_and_is_released_after_a_run() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &tiny("prune", &[]))), 0);
    assert!(!dir.path().join(".lock").exists());
    fs::write(dir.path().join(".lock"), "1\n").unwrap();
    let out = run(dir.path(), &tiny("prune", &[]));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn rank_outside_choices_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &tiny("prune", &[]))), 0);
    assert_eq!(code(&run(dir.path(), &tiny("train", &[]))), 0);
    let out = run(dir.path(), &tiny("eval", &["--which", "b0.q=5"]));
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn pipeline_is_bit_identical_on_rerun() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let out = run(d, &tiny("pipeline", &["--seed", "3"]));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.iter().any(|(n, _)| n.ends_with("pipeline.json")));
    assert_eq!(sa.len(), sb.len());
    for ((na, da), (nb, db)) in sa.iter().zip(&sb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }
}

#[test]
fn dense_pipeline_keeps_weights_unpruned() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &tiny("pipeline", &["--dense"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("reports/pipeline.json")).unwrap()).unwrap();
    assert_eq!(report["dense"], true);
    assert_eq!(report["sparsity"], 0.0);
}

#[test]
fn eval_reports_each_named_config() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &tiny("prune", &[]))), 0);
    assert_eq!(code(&run(dir.path(), &tiny("train", &[]))), 0);
    for which in ["base", "heuristic", "maximal", "minimal"] {
        let out = run(dir.path(), &tiny("eval", &["--which", which]));
        assert_eq!(code(&out), 0, "{which}: {}", stderr(&out));
        assert!(dir.path().join(format!("reports/eval_{which}.json")).exists());
    }
}
