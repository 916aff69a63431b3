use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMOKE: &str = r#"
seed = 1
[data]
n_stays = 40
[pretrain]
epochs = 2
batch_size = 8
[pretrain.model]
num_layers = 1
hidden_dim = 16
num_heads = 2
max_seq_len = 32
[pretrain.optimizer]
lr = 1e-3
[finetune]
epochs = 1
[eval]
repeats = 2
[eval.linear]
batch_sizes = [8]
epochs = [1]
lrs = [1e-3]
[grid]
epochs = 1
[grid.axes]
temperature = [0.1, 0.07]
batch_size = [8, 16]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_clinalign"));
    c.env_remove("CLINALIGN_OUT").env("RUST_LOG", "error");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("smoke.toml"), SMOKE).unwrap();
    ok(dir.path(), &["generate", "-c", "smoke.toml", "-o", "data"]);
    dir
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generate_layout_and_determinism() {
    let dir = setup();
    let d = dir.path();
    for f in ["stays", "notes.csv", "labels.csv", "splits.json", "manifest.json"] {
        assert!(d.join("data").join(f).exists(), "missing {f}");
    }
    ok(d, &["generate", "-c", "smoke.toml", "-o", "again"]);
    let mut a = snapshot(&d.join("data"));
    let mut b = snapshot(&d.join("again"));
    // the manifest records the output path, which differs by design
    a.remove(Path::new("manifest.json"));
    b.remove(Path::new("manifest.json"));
    assert_eq!(a, b);
}

#[test]
fn zero_stays_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["generate", "--set", "data.n_stays=0", "-o", "empty"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("empty").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["generate", "--set", "pretrain.epoch=3", "-o", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain.epoch"));
}

#[test]
fn output_root_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let out = bin()
        .current_dir(dir.path())
        .env("CLINALIGN_OUT", &root)
        .args(["generate", "--set", "data.n_stays=8"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("generate").join("splits.json").exists());
}

#[test]
fn pretrain_resume_and_eval() {
    let dir = setup();
    let d = dir.path();
    let before = snapshot(&d.join("data"));

    let table = ok(d, &["pretrain", "-c", "smoke.toml", "--data", "data", "-o", "full"]);
    assert!(table.contains("epoch"));
    for f in ["manifest.json", "metrics.jsonl", "last.ckpt", "best.ckpt", "tokenizer.json"] {
        assert!(d.join("full").join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("full/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["resolved"]["pretrain"]["epochs"], 2);

    ok(d, &["pretrain", "-c", "smoke.toml", "--data", "data", "-o", "part", "--stop-after", "1"]);
    ok(d, &["pretrain", "-c", "smoke.toml", "--data", "data", "-o", "part", "--resume", "part/last.ckpt"]);
    assert_eq!(std::fs::read(d.join("full/last.ckpt")).unwrap(), std::fs::read(d.join("part/last.ckpt")).unwrap());

    let r = ok(d, &["eval", "retrieval", "-c", "smoke.toml", "--data", "data", "--checkpoint", "full/last.ckpt", "-o", "ev"]);
    assert!(r.contains("R@1") && r.contains("R@5") && r.contains("R@10"));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ev/retrieval.json")).unwrap()).unwrap();
    for k in ["m_to_t_r1", "m_to_t_r5", "m_to_t_r10", "t_to_m_r1", "t_to_m_r5", "t_to_m_r10"] {
        assert!(rep["metrics"][k].is_number(), "{k}");
    }

    let z = ok(d, &["eval", "zeroshot", "-c", "smoke.toml", "--data", "data", "--checkpoint", "full/last.ckpt", "-o", "ev"]);
    assert!(z.contains("auc_roc") && z.contains("auc_pr"));

    let l = ok(d, &["eval", "linear", "-c", "smoke.toml", "--data", "data", "--checkpoint", "full/last.ckpt", "-o", "ev"]);
    assert!(l.contains("auc_roc"));

    ok(d, &[
        "eval", "semisup", "-c", "smoke.toml", "--data", "data", "--checkpoint", "full/last.ckpt", "-o", "ev",
        "--fractions", "1,10,50,100",
    ]);
    let summary = std::fs::read_to_string(d.join("ev/semisup.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next().unwrap(), "init,fraction,metric,mean,std,repeats");
    // 2 inits x 4 fractions x 2 metrics
    assert_eq!(lines.count(), 16);

    let info = ok(d, &["inspect-checkpoint", "full/last.ckpt"]);
    let info: serde_json::Value = serde_json::from_str(&info).unwrap();
    assert_eq!(info["meta"]["epochs_done"], 2);

    assert_eq!(before, snapshot(&d.join("data")), "input dataset was modified");
}

#[test]
fn zero_mask_weight_logs_zero_reconstruction() {
    let dir = setup();
    let d = dir.path();
    ok(d, &[
        "pretrain", "-c", "smoke.toml", "--data", "data", "-o", "align", "--set", "pretrain.weights.note=0",
        "--set", "pretrain.weights.meas=0",
    ]);
    let log = std::fs::read_to_string(d.join("align/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["loss"]["note_recon"], 0.0);
        assert_eq!(v["loss"]["meas_recon"], 0.0);
    }
}

#[test]
fn missing_checkpoint_names_the_flag() {
    let dir = setup();
    let out = run(dir.path(), &["eval", "retrieval", "-c", "smoke.toml", "--data", "data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
    let out = run(dir.path(), &["eval", "zeroshot", "--data", "data", "--checkpoint", "nope.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn semisup_without_checkpoint_runs_random_baseline() {
    let dir = setup();
    ok(dir.path(), &["eval", "semisup", "-c", "smoke.toml", "--data", "data", "-o", "ev", "--fractions", "100"]);
    let s = std::fs::read_to_string(dir.path().join("ev/semisup.csv")).unwrap();
    assert!(s.lines().skip(1).all(|l| l.starts_with("random,")));
}

#[test]
fn gridsearch_table_and_best_config_round_trip() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gridsearch", "-c", "smoke.toml", "--data", "data", "-o", "grid"]);
    let trials = std::fs::read_to_string(d.join("grid/trials.csv")).unwrap();
    let rows: Vec<&str> = trials.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let objectives: Vec<f64> = rows.iter().map(|r| r.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(objectives.windows(2).all(|w| w[0] >= w[1]));
    ok(d, &["pretrain", "-c", "grid/best_config.toml", "--data", "data", "-o", "refit"]);
    assert!(d.join("refit/last.ckpt").exists());
}

#[test]
fn ingest_writes_normalized_copy() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["ingest", "-c", "smoke.toml", "--data", "data", "-o", "norm"]);
    assert!(d.join("norm/norm_stats.json").exists());
    assert!(d.join("norm/splits.json").exists());
    ok(d, &["pretrain", "-c", "smoke.toml", "--data", "norm", "-o", "run", "--set", "pretrain.epochs=1"]);
}
