//! End-to-end runs of the `ua3d` binary.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ua3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ua3d"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ua3d(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Two classes, few points, three views: seconds rather than minutes.
fn tiny_benchmark(dir: &Path, zero_shift: bool) {
    let mut args = vec!["synth", "--classes", "2", "--shots", "6", "--points", "128", "--seed", "3", "-o", s(dir)];
    if zero_shift {
        args.push("--zero-shift");
    }
    ok(&args);
}

const TINY_TRAIN: [&str; 8] = ["--epochs", "2", "--views", "3", "--batch-size", "4", "--shots", "4"];

#[test]
fn help_lists_flags_with_defaults() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "project", "train", "eval", "bound", "sinkhorn", "inspect"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let out = ok(&["sinkhorn", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--epsilon <EPSILON>") && text.contains("[default: 0.05]"));
    assert!(text.contains("[default: 0.000001]") && text.contains("[default: 1000]"));
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--lr <LR>") && text.contains("[default: 0.002]"));
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    assert_eq!(ua3d(&["synth", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(ua3d(&["frobnicate"]).status.code(), Some(1));
    let dir = TempDir::new().unwrap();
    assert_eq!(ua3d(&["synth", "--classes", "1", "-o", s(dir.path())]).status.code(), Some(1));
    let missing = dir.path().join("missing.csv");
    assert_eq!(ua3d(&["sinkhorn", "--cost", s(&missing), "-o", s(dir.path())]).status.code(), Some(2));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "0,1\n1,nope\n").unwrap();
    assert_eq!(ua3d(&["sinkhorn", "--cost", s(&bad), "-o", s(dir.path())]).status.code(), Some(2));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        ok(&["synth", "--classes", "5", "--shots", "16", "--seed", "7", "-o", s(d.path())]);
    }
    for f in ["manifest.json", "target_labels.json", "source/00000.xyz", "target/00079.xyz"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let run = read_json(&a.path().join("run.json"));
    assert_eq!(run["command"], "synth");
    assert_eq!(run["seed"], 7);
    assert_eq!(run["args"]["classes"], 5);
    // target files carry no labels
    let t = std::fs::read_to_string(a.path().join("target/00000.xyz")).unwrap();
    assert!(!t.contains("label"));
}

#[test]
fn replay_reproduces_a_run_from_run_json() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    ok(&["synth", "--classes", "3", "--shots", "2", "--points", "64", "--seed", "11", "--rotate", "0.3", "-o", s(a.path())]);
    ok(&["replay", s(&a.path().join("run.json")), "-o", s(b.path())]);
    let x = std::fs::read(a.path().join("manifest.json")).unwrap();
    let y = std::fs::read(b.path().join("manifest.json")).unwrap();
    assert_eq!(x, y);
    assert_eq!(
        std::fs::read(a.path().join("target/00003.xyz")).unwrap(),
        std::fs::read(b.path().join("target/00003.xyz")).unwrap()
    );
}

#[test]
fn sinkhorn_on_zero_cost_is_the_product_of_marginals() {
    let dir = TempDir::new().unwrap();
    let c = dir.path().join("C.csv");
    std::fs::write(&c, "0,0\n0,0\n").unwrap();
    let out = ok(&["sinkhorn", "--cost", s(&c), "--epsilon", "0.05", "-o", s(dir.path())]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["converged"], true);
    let plan = std::fs::read_to_string(dir.path().join("plan.csv")).unwrap();
    for line in plan.lines() {
        for v in line.split(',') {
            assert!((v.parse::<f64>().unwrap() - 0.25).abs() < 1e-12);
        }
    }

    let m = dir.path().join("m.csv");
    std::fs::write(&m, "0.2,0.8\n0.6,0.4\n").unwrap();
    ok(&["sinkhorn", "--cost", s(&c), "--marginals", s(&m), "-o", s(dir.path())]);
    let plan = std::fs::read_to_string(dir.path().join("plan.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        plan.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    let (a, b) = ([0.2, 0.8], [0.6, 0.4]);
    for i in 0..2 {
        for j in 0..2 {
            assert!((rows[i][j] - a[i] * b[j]).abs() < 1e-9, "{rows:?}");
        }
    }
    let run = read_json(&dir.path().join("run.json"));
    assert_eq!(run["command"], "sinkhorn");
    assert_eq!(run["args"]["max_iter"], 1000);
}

#[test]
fn stderr_log_lines_are_structured() {
    let dir = TempDir::new().unwrap();
    let out = ok(&["synth", "--classes", "2", "--shots", "2", "--points", "32", "-o", s(dir.path())]);
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().find(|l| l.starts_with("INFO ")).expect("an info line");
    let parts: Vec<&str> = line.splitn(4, ' ').collect();
    assert_eq!(parts.len(), 4, "{line}");
    assert!(parts[1].contains('T') && parts[1].ends_with('Z'), "timestamp {}", parts[1]);
    assert!(parts[2].starts_with("ua3d_core"), "module {}", parts[2]);
}

#[test]
fn project_writes_one_pgm_per_view() {
    let dir = TempDir::new().unwrap();
    let cloud = dir.path().join("c.xyz");
    let pts: String = (0..200)
        .map(|i| {
            let t = i as f64 * 0.1;
            format!("{} {} {}\n", t.cos(), t.sin(), (i % 7) as f64 * 0.1)
        })
        .collect();
    std::fs::write(&cloud, pts).unwrap();
    ok(&["project", "--input", s(&cloud), "--views", "4", "-o", s(dir.path())]);
    for i in 0..4 {
        let bytes = std::fs::read(dir.path().join(format!("view_{i:02}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + 32 * 32);
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    tiny_benchmark(&data, false);
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "epochs = 3\nlr = 0.01\nm_views = 3\nbatch_size = 4\nshots_per_class = 4\n").unwrap();
    let out = dir.path().join("run");
    let manifest = data.join("manifest.json");
    ok(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "--epochs", "1", "-o", s(&out)]);
    let run = read_json(&out.join("run.json"));
    assert_eq!(run["args"]["config"]["epochs"], 1);
    assert_eq!(run["args"]["config"]["lr"], 0.01);
    assert_eq!(run["args"]["config"]["m_views"], 3);
    let lines = std::fs::read_to_string(out.join("report.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);

    std::fs::write(&cfg, "epochs = 3\nbogus_key = 1\n").unwrap();
    let code = ua3d(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "-o", s(&out)]).status.code();
    assert_eq!(code, Some(1));
}

#[test]
fn train_eval_inspect_on_zero_shift() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    tiny_benchmark(&data, true);
    let manifest = data.join("manifest.json");
    let run = dir.path().join("run");
    let mut args = vec!["train", "--manifest", s(&manifest), "-o", s(&run), "--lr", "0.01", "--alpha", "0.1"];
    args.extend(TINY_TRAIN);
    ok(&args);
    let summary = read_json(&run.join("summary.json"));
    assert_eq!(summary["target_label_reads"], 0);
    assert_eq!(summary["epochs"].as_array().unwrap().len(), 2);

    let ckpt = run.join("model.ckpt");
    let ev = dir.path().join("eval");
    let pca = ev.join("pca.csv");
    ok(&[
        "eval", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--ablation", "views", "--export-pca", s(&pca),
        "-o", s(&ev),
    ]);
    let e = read_json(&ev.join("eval.json"));
    let (sa, ta) = (e["source_accuracy"].as_f64().unwrap(), e["target_accuracy"].as_f64().unwrap());
    assert!((sa - ta).abs() <= 0.05, "source {sa} target {ta}");
    let gap = read_json(&ev.join("gap.json"));
    for k in ["mmd", "frechet", "bound_source_risk", "bound_ot_term", "bound_proto_term", "bound_total", "beta"] {
        assert!(gap[k].as_f64().unwrap().is_finite(), "{k}");
    }
    let abl = std::fs::read_to_string(ev.join("ablation_views.csv")).unwrap();
    let mut lines = abl.lines();
    assert_eq!(lines.next().unwrap(), "avg,weighted_avg,random,max_sim,entropy_guided");
    assert_eq!(lines.next().unwrap().split(',').count(), 5);
    let pca_rows = std::fs::read_to_string(&pca).unwrap();
    assert_eq!(pca_rows.lines().next().unwrap(), "domain,label,pc1,pc2");
    assert_eq!(pca_rows.lines().count(), 1 + 24);

    let b = dir.path().join("bound");
    ok(&["bound", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "-o", s(&b)]);
    let bound = read_json(&b.join("bound.json"));
    assert_eq!(bound["bound_total"], gap["bound_total"]);

    let out = ok(&[
        "inspect", "--input", s(&data.join("target/00000.xyz")), "--checkpoint", s(&ckpt), "-o", s(&dir.path().join("i")),
    ]);
    let csv = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "view,entropy,selected,predicted");
    assert_eq!(rows.len(), 1 + 3, "one row per training view");
    let selected = rows[1..].iter().filter(|r| r.split(',').nth(2) == Some("true")).count();
    assert!(selected >= 1);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    tiny_benchmark(&data, false);
    let manifest = data.join("manifest.json");
    let mut outs = Vec::new();
    for t in ["1", "3"] {
        let o = dir.path().join(format!("t{t}"));
        let mut args = vec!["train", "--threads", t, "--manifest", s(&manifest), "-o", s(&o), "--track-gap", "true"];
        args.extend(TINY_TRAIN);
        ok(&args);
        outs.push(o);
    }
    for f in ["report.jsonl", "summary.json", "model.ckpt"] {
        assert_eq!(
            std::fs::read(outs[0].join(f)).unwrap(),
            std::fs::read(outs[1].join(f)).unwrap(),
            "{f} depends on the thread count"
        );
    }
}
