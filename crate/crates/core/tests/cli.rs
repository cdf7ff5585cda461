use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use snip_core::io::{load_checkpoint, HISTORY, REPORT_FILES, RESOLVED_CONFIG_FILE};

const FAST: &str = r#"
seed = 3
sn_target = 1.0

[model]
num_layers = 2
d_model = 8
num_heads = 2
d_k = 4
d_v = 4
d_ffn = 16

[task]
kind = "redundant_head_probe"
size = 200
seq_len = 8

[prune]
train_epochs = 2
prior_epochs = 1
retrain_epochs = 1
max_iterations = 2
theta = 0.3
accuracy_budget = 1.0
"#;

fn snip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snip")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

#[test]
fn prune_writes_all_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FAST);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = snip(&["prune", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in REPORT_FILES.iter().chain(&["model.ckpt", HISTORY]) {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    let resolved = std::fs::read_to_string(a.join(RESOLVED_CONFIG_FILE)).unwrap();
    assert!(resolved.contains("seed = 3"));
    assert!(!a.join(snip_core::io::LOCK_FILE).exists());

    // A different seed changes the outcome.
    let c = dir.path().join("c");
    assert_eq!(code(&snip(&["prune", "--config", s(&cfg), "--out", s(&c), "--seed", "4"])), 0);
    assert_ne!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(c.join("model.ckpt")).unwrap());

    // eval and profile run on the produced checkpoint.
    let o = snip(&["eval", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("eval_accuracy"));
    let p = dir.path().join("p");
    let ck = a.join("model.ckpt");
    let o = snip(&["profile", "--config", s(&cfg), "--out", s(&p), "--checkpoint", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("norm_hist.csv").exists() && p.join("spectral_trace.csv").exists());

    // report re-emits the same bytes from the saved history.
    let r = dir.path().join("r");
    let h = a.join(HISTORY);
    assert_eq!(code(&snip(&["report", "--config", s(&cfg), "--out", s(&r), "--history", s(&h)])), 0);
    for f in REPORT_FILES {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(r.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_writes_baseline_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FAST);
    let out = dir.path().join("t");
    let o = snip(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = load_checkpoint(&out.join("model.ckpt")).unwrap();
    assert!(ck.gate.is_none());
    assert_eq!(ck.state.arch.live_heads(), 4);
    let curve = std::fs::read_to_string(out.join("prune_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = snip(&["prune"]);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).to_lowercase().contains("usage"));
    assert_eq!(code(&snip(&["--help"])), 0);

    let bad = write_config(dir.path(), "[prune]\ntheta = 1.5\n");
    let o = snip(&["prune", "--config", s(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("prune.theta"));
    let o = snip(&["train", "--config", s(&dir.path().join("nope.toml"))]);
    assert_eq!(code(&o), 1);

    let cfg = write_config(dir.path(), FAST);
    let corrupt = dir.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, b"SNIPCKPT\x01\x00").unwrap();
    let o = snip(&["eval", "--config", s(&cfg), "--checkpoint", s(&corrupt)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn csv_task_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("reviews.csv");
    let mut body = String::from("text,label\n");
    for i in 0..120 {
        let (word, label) = if i % 2 == 0 { ("great", "pos") } else { ("awful", "neg") };
        body.push_str(&format!("\"the film was {word} and {}\",{label}\n", ["long", "short", "odd"][i % 3]));
    }
    std::fs::write(&data, body).unwrap();
    let cfg = FAST.replace(
        "kind = \"redundant_head_probe\"\nsize = 200\n",
        &format!("kind = \"csv\"\npath = \"{}\"\n", data.display()),
    );
    let cfg = write_config(dir.path(), &cfg);
    let out = dir.path().join("o");
    let o = snip(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = snip(&["eval", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
}
