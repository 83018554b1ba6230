use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mpgcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpgcn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn count(args: &[&str]) -> (usize, usize) {
    let mut full = vec!["count"];
    full.extend_from_slice(args);
    let o = mpgcn(&full);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let field = |name: &str| -> usize {
        out.lines()
            .find_map(|l| l.strip_prefix(name))
            .unwrap_or_else(|| panic!("{name} missing in {out}"))
            .trim()
            .parse()
            .unwrap()
    };
    (field("conv_params"), field("total_params"))
}

#[test]
fn count_reports_parity() {
    let dims = ["--in-dim", "128", "--hidden", "256", "--classes", "7"];
    let mp = count(&[&["--arch", "mpgcn", "--paths", "3,4", "--shared-stem", "1"], &dims[..]].concat());
    let seq = count(&[&["--arch", "gcn", "--depth", "6"], &dims[..]].concat());
    assert_eq!(mp.0, 361_984);
    assert_eq!(mp, seq);

    let small = ["--in-dim", "8", "--hidden", "8", "--classes", "3"];
    assert_eq!(count(&[&["--arch", "mpgcn", "--paths", "1,2"], &small[..]].concat()).1, 243);
    assert_eq!(count(&[&["--arch", "gcn", "--depth", "3"], &small[..]].concat()).1, 243);
}

#[test]
fn count_rejects_incomplete_specs() {
    let o = mpgcn(&["count", "--arch", "mpgcn", "--in-dim", "4", "--hidden", "4", "--classes", "2"]);
    assert!(!o.status.success());
    let o = mpgcn(&[
        "count", "--arch", "mpgcn", "--paths", "1", "--shared-stem", "2", "--in-dim", "4", "--hidden", "4",
        "--classes", "2",
    ]);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).lines().count(), 1, "{}", stderr(&o));
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "dataset": {"kind": "sbm", "blocks": 2, "per_block": 12, "p_intra": 0.5, "p_inter": 0.05,
                    "features": 4, "train_per_class": 3, "val_per_class": 3},
        "model": {"hidden": 8},
        "train": {"epochs": 6, "seeds": [0, 1]},
        "output": {"metrics": dir.join("m.csv"), "summary": dir.join("s.csv")}
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn bench_is_bitwise_reproducible_and_echo_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    let run = |tag: &str| {
        let m = d.join(format!("m{tag}.csv"));
        let s = d.join(format!("s{tag}.csv"));
        let o = mpgcn(&["bench", "--config", cfg, "--metrics", m.to_str().unwrap(), "--summary", s.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("mpgcn"));
        (fs::read(&m).unwrap(), fs::read(&s).unwrap(), s)
    };
    let (m1, s1, s1_path) = run("1");
    let (m2, s2, _) = run("2");
    assert_eq!(m1, m2);
    assert_eq!(s1, s2);

    let summary = String::from_utf8(s1.clone()).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "model,params,mean_test_acc,std_test_acc,mean_epochs_to_95");
    assert_eq!(lines.len(), 4);
    let metrics = String::from_utf8(m1.clone()).unwrap();
    assert_eq!(metrics.lines().next(), Some("model,seed,epoch,train_loss,train_acc,val_acc,test_acc"));
    assert_eq!(metrics.lines().count(), 1 + 3 * 2 * 7);

    // the echo alone reproduces both files
    let echo = d.join("s1.csv.config.json");
    let echoed: serde_json::Value = serde_json::from_slice(&fs::read(&echo).unwrap()).unwrap();
    assert_eq!(echoed.as_array().map(Vec::len), Some(3));
    let m3 = d.join("m3.csv");
    let s3 = d.join("s3.csv");
    let o = mpgcn(&[
        "bench", "--config", echo.to_str().unwrap(),
        "--metrics", m3.to_str().unwrap(), "--summary", s3.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(m3).unwrap(), m1);
    assert_eq!(fs::read(s3).unwrap(), s1);
    assert!(s1_path.exists());
}

#[test]
fn train_writes_one_model_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = mpgcn(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "2", "--arch", "resgcn", "--depth", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().starts_with("resgcn,"));
    let metrics = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 3);
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s.csv.config.json")).unwrap()).unwrap();
    assert_eq!(echo["train"]["epochs"], 2);
    assert_eq!(echo["model"]["hidden"], 8);
    assert_eq!(echo["model"]["arch"], "resgcn");
}

#[test]
fn config_errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for args in [
        vec!["train", "--config", cfg, "--model.width", "3", "--train.speed", "2"],
        vec!["train", "--config", cfg, "--paths", "1,2"],
        vec!["train", "--config", "/nonexistent/cfg.json"],
        vec!["train", "--config", cfg, "--dataset", "linqs"],
    ] {
        let o = mpgcn(&args);
        assert!(!o.status.success(), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "), "{err}");
    }
    let o = mpgcn(&["train", "--config", cfg, "--model.width", "3", "--train.speed", "2"]);
    let err = stderr(&o);
    assert!(err.contains("model.width") && err.contains("train.speed"), "{err}");
}

#[test]
fn mismatched_bench_models_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let write = |name: &str, v: serde_json::Value| {
        let p = d.join(name);
        fs::write(&p, v.to_string()).unwrap();
        p
    };
    let out = serde_json::json!({"metrics": d.join("m.csv"), "summary": d.join("s.csv")});
    let a = write("a.json", serde_json::json!({"model": {"arch": "gcn"}, "train": {"epochs": 5}, "output": out}));
    let b = write("b.json", serde_json::json!({"model": {"arch": "mpgcn", "paths": [1, 2]}, "train": {"epochs": 7}, "output": out}));
    let o = mpgcn(&["bench", "--config", a.to_str().unwrap(), "--config", b.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train.epochs"), "{}", stderr(&o));
    assert!(!d.join("m.csv").exists());
}

#[test]
fn synth_cache_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cache = d.join("sbm.bin");
    let o = mpgcn(&["synth", "--out", cache.to_str().unwrap(), "--blocks", "2", "--per-block", "10", "--features", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(&fs::read(&cache).unwrap()[..8], b"MPGCNDS\0");
    let o = mpgcn(&[
        "train", "--dataset.kind", "cache", "--dataset.path", cache.to_str().unwrap(),
        "--dataset.train_per_class", "2", "--dataset.val_per_class", "2",
        "--epochs", "3", "--seed-count", "2", "--hidden", "4",
        "--metrics", d.join("m.csv").to_str().unwrap(), "--summary", d.join("s.csv").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(d.join("s.csv")).unwrap().contains("gcn,"));
}

#[test]
fn gradcheck_passes() {
    let o = mpgcn(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 11);
    assert!(out.lines().all(|l| l.ends_with("ok")), "{out}");
}

#[test]
fn linqs_files_train_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut content = String::new();
    let mut cites = String::new();
    for i in 0..24 {
        let class = i % 2;
        let bits: Vec<&str> = (0..4).map(|f| if f % 2 == class { "1" } else { "0" }).collect();
        content.push_str(&format!("n{i}\t{}\tlabel{class}\n", bits.join("\t")));
        cites.push_str(&format!("n{i}\tn{}\n", (i + 2) % 24));
    }
    cites.push_str("n0\tghost\n");
    fs::write(d.join("g.content"), content).unwrap();
    fs::write(d.join("g.cites"), cites).unwrap();
    let o = mpgcn(&[
        "train", "--dataset", "linqs",
        "--dataset.content", d.join("g.content").to_str().unwrap(),
        "--dataset.cites", d.join("g.cites").to_str().unwrap(),
        "--dataset.train_per_class", "3", "--dataset.val_per_class", "3",
        "--epochs", "4", "--seed-count", "2", "--hidden", "3",
        "--metrics", d.join("m.csv").to_str().unwrap(), "--summary", d.join("s.csv").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(d.join("m.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 5);
}
