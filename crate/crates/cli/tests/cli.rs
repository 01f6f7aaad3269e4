use std::process::{Command, Output};

use serde_json::Value;

fn vmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmf"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = vmf(args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let o = vmf(args);
    assert!(!o.status.success(), "{args:?} should fail");
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    err
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Small enough that an ablation row trains in well under a second.
const QUICK: [&str; 8] = [
    "--train-size",
    "16",
    "--eval-size",
    "8",
    "--epochs",
    "1",
    "--batch-size",
    "8",
];

#[test]
fn summarize_reports_the_smallest_variant() {
    let out = ok(&["summarize", "--preset", "vmf-560m"]);
    let total = out.lines().last().unwrap();
    assert_eq!(total, "total params 4.693M");
    assert!(out.contains("blocks.0.former"));
}

#[test]
fn summarize_without_former_has_no_former_rows() {
    let out = ok(&["summarize", "--set", "former_enabled=false"]);
    assert!(!out.contains(".former"));
    assert!(out
        .lines()
        .any(|l| l.split_whitespace().collect::<Vec<_>>() == ["bridge_in", "0"]));
    let doc: Value = serde_json::from_str(&ok(&[
        "summarize",
        "--set",
        "former_enabled=false",
        "--report",
        "machine",
    ]))
    .unwrap();
    for cat in doc["categories"].as_array().unwrap() {
        if ["bridge_in", "bridge_out", "former_mhsa", "former_ffn"]
            .contains(&cat["category"].as_str().unwrap())
        {
            assert_eq!(cat["params"], 0);
        }
    }
}

#[test]
fn reports_are_deterministic() {
    for verb in ["summarize", "flops", "budget"] {
        let args = [verb, "--report", "machine"];
        assert_eq!(ok(&args), ok(&args), "{verb}");
    }
}

#[test]
fn budget_passes_for_every_variant() {
    let out = ok(&["budget"]);
    assert_eq!(out.lines().count(), 4);
    assert!(out.lines().all(|l| l.ends_with("PASS")));
}

#[test]
fn bad_input_fails_with_one_line() {
    fails(&["frobnicate"]);
    let e = fails(&["summarize", "--set", "widht=3"]);
    assert!(e.contains("widht"), "{e}");
    let e = fails(&["summarize", "--preset", "vmf-9g"]);
    assert!(e.contains("vmf-9g"), "{e}");
    fails(&["flops", "--frames", "15"]);
    fails(&["gradcheck", "--freeze", "everything"]);
    let e = fails(&["ablate", "head_hidden", "8,16"]);
    assert!(e.contains("head_hidden"), "{e}");
    fails(&["ablate", "token_mode", "per-frame,sideways"]);
    fails(&["train", "--task", "kinetics"]);
}

#[test]
fn config_file_and_output_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, "# narrower\nbase_dim = 4\n").unwrap();
    let out = dir.path().join("report.json");
    let args = [
        "flops",
        "--config",
        cfg.to_str().unwrap(),
        "--report",
        "machine",
        "--out",
        out.to_str().unwrap(),
    ];
    assert_eq!(ok(&args), "");
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let narrow = doc["total_macs"].as_u64().unwrap();
    let wide: Value = serde_json::from_str(&ok(&["flops", "--report", "machine"])).unwrap();
    assert!(narrow < wide["total_macs"].as_u64().unwrap());

    std::fs::write(&cfg, "base_dim = 4\nheads = x\n").unwrap();
    let e = fails(&["flops", "--config", cfg.to_str().unwrap()]);
    assert!(e.contains("line 2"), "{e}");
}

#[test]
fn token_count_ablation_leaves_mobile_compute_alone() {
    let mut args = vec!["ablate", "token_count", "2,6", "--report", "machine"];
    args.extend(QUICK);
    let rows = json_lines(&ok(&args));
    assert_eq!(rows.len(), 2);
    for cat in ["stem", "mobile_pointwise", "mobile_depthwise"] {
        assert_eq!(rows[0]["macs"][cat], rows[1]["macs"][cat], "{cat}");
    }
    assert!(rows[1]["macs"]["former_mhsa"].as_u64() > rows[0]["macs"]["former_mhsa"].as_u64());
}

#[test]
fn former_ablation_delta_is_the_token_side() {
    let mut args = vec![
        "ablate",
        "former_enabled",
        "true,false",
        "--report",
        "machine",
    ];
    args.extend(QUICK);
    let rows = json_lines(&ok(&args));
    let macs = |r: &Value, c: &str| r["macs"][c].as_u64().unwrap();
    let token_side: u64 = ["bridge_in", "bridge_out", "former_mhsa", "former_ffn"]
        .iter()
        .map(|c| macs(&rows[0], c))
        .sum();
    assert!(token_side > 0);
    let cats = rows[0]["macs"]
        .as_object()
        .unwrap()
        .keys()
        .cloned()
        .collect::<Vec<_>>();
    let total = |r: &Value| cats.iter().map(|c| macs(r, c)).sum::<u64>();
    // The per-frame activation generators read the tokens, so they go too.
    let generators = macs(&rows[0], "dyrelu_generator") - macs(&rows[1], "dyrelu_generator");
    assert_eq!(total(&rows[0]) - total(&rows[1]), token_side + generators);
    for c in ["stem", "mobile_pointwise", "mobile_depthwise", "head"] {
        assert_eq!(macs(&rows[0], c), macs(&rows[1], c), "{c}");
    }
}

#[test]
fn activation_ablation_completes() {
    let mut args = vec!["ablate", "activation", "relu,frame-dyrelu"];
    args.extend(QUICK);
    let out = ok(&args);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("relu") && rows[1].starts_with("frame-dyrelu"));
    for r in rows {
        let top1: f64 = r.split_whitespace().last().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&top1));
    }
}

#[test]
fn train_then_eval_reproduces_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.vmf");
    let cache = dir.path().join("eval.cache");
    let mut args = vec![
        "train",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--eval-cache",
        cache.to_str().unwrap(),
        "--report",
        "machine",
    ];
    args.extend(QUICK);
    let trained = json_lines(&ok(&args));
    assert!(ckpt.exists() && cache.exists());
    let held_out = &trained.last().unwrap()["held_out"];

    let mut args = vec![
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--eval-cache",
        cache.to_str().unwrap(),
        "--report",
        "machine",
    ];
    args.extend(QUICK);
    let eval = json_lines(&ok(&args));
    assert_eq!(&eval[0]["held_out"], held_out);
    assert_eq!(held_out["n"], 8);
}

#[test]
fn gradcheck_on_a_sample_passes() {
    let out = ok(&["gradcheck", "--max-per-tensor", "2"]);
    assert_eq!(
        out.lines().filter(|l| l.contains("PASS")).count(),
        7,
        "{out}"
    );
}
