use std::path::Path;
use std::process::{Command, Output};

fn hevit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hevit")).args(args).env_remove("HEVIT_THREADS").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The integer after `key` on its labelled stdout line.
fn field(out: &str, key: &str) -> u64 {
    out.lines()
        .find_map(|l| l.strip_prefix(key).map(|r| r.split_whitespace().next().unwrap().parse().unwrap()))
        .unwrap_or_else(|| panic!("no `{key}` line in\n{out}"))
}

#[test]
fn peow_reports_overlap_widths() {
    let o = hevit(&["peow", "7", "4"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("PEOW=3"), "{}", stdout(&o));

    let o = hevit(&["peow", "3", "2"]);
    assert!(stdout(&o).contains("distinct counts: {1, 2, 4}"), "{}", stdout(&o));

    let o = hevit(&["peow", "4", "4"]);
    assert!(stdout(&o).contains("PEOW=0 (non-overlapping)"));

    let o = hevit(&["peow", "2", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn audit_of_the_base_model() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let o = hevit(&["audit", "--preset", "B", "--input", "256x256", "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("(10.65M)"), "{out}");
    let params = field(&out, "params");
    let flops = field(&out, "flops");

    let text = std::fs::read_to_string(&csv).unwrap();
    let total = text.lines().find(|l| l.starts_with("total,")).expect("total row");
    let cols: Vec<&str> = total.split(',').collect();
    assert!(cols.contains(&params.to_string().as_str()), "{total}");
    assert!(cols.contains(&flops.to_string().as_str()), "{total}");
}

#[test]
fn finer_stems_cost_more() {
    let flops = |stem: &str| {
        let o = hevit(&["audit", "--preset", "B", "--stem", stem]);
        assert!(o.status.success(), "{}", stderr(&o));
        field(&stdout(&o), "flops")
    };
    assert!(flops("conv7s4") < flops("conv3s2,conv3s2"));
    assert!(flops("conv3s2,conv3s2") < flops("conv7s2,conv7s2"));
}

#[test]
fn config_errors_are_located() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"model\": {\"preset\": \"T\",}\n}\n").unwrap();
    let o = hevit(&["audit", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, "{\"train\": {\"stpes\": 3}}").unwrap();
    let o = hevit(&["audit", "--config", unknown.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
    assert!(stderr(&o).contains("stpes"), "{}", stderr(&o));
}

#[test]
fn gradcheck_exit_codes() {
    let o = hevit(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains(", 0 failed"));

    let o = hevit(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL"));
}

fn train(dir: &Path, steps: &str) -> Output {
    hevit(&["train-synth", "--out", dir.to_str().unwrap(), "--steps", steps, "--seed", "11"])
}

#[test]
fn train_then_evaluate_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let oa = train(&a, "3");
    assert!(oa.status.success(), "{}", stderr(&oa));
    let ob = Command::new(env!("CARGO_BIN_EXE_hevit"))
        .args(["train-synth", "--out", b.to_str().unwrap(), "--steps", "3", "--seed", "11"])
        .env("HEVIT_THREADS", "3")
        .output()
        .unwrap();
    assert!(ob.status.success(), "{}", stderr(&ob));
    for f in ["model.hevt", "loss.csv", "config.json"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert_eq!(x, y, "{f} differs between runs");
    }
    let loss = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,loss"));
    assert_eq!(loss.lines().count(), 1 + 4);

    let ckpt = a.join("model.hevt");
    let cfg = a.join("config.json");
    let eval = || hevit(&["eval-synth", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    let (e1, e2) = (eval(), eval());
    assert!(e1.status.success(), "{}", stderr(&e1));
    assert!(stdout(&e1).contains("PCKh@0.5"));
    assert_eq!(e1.stdout, e2.stdout);
}

#[test]
fn checkpoint_for_another_preset_is_refused() {
    let root = tempfile::tempdir().unwrap();
    let o = train(root.path(), "0");
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = root.path().join("model.hevt");
    let o = hevit(&["eval-synth", "--preset", "T", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("stage1.") || err.contains("stem.") || err.contains("head."), "{err}");
}

#[test]
fn environment_and_usage_errors() {
    let o = Command::new(env!("CARGO_BIN_EXE_hevit"))
        .args(["peow", "3", "2"])
        .env("HEVIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("HEVIT_THREADS"));

    let o = hevit(&["audit", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    let o = hevit(&["peow", "three", "2"]);
    assert_eq!(o.status.code(), Some(1));
}
