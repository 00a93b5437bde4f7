use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vlbridge::cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlbridge"))
        .args(args)
        .env_remove("VLBRIDGE_CONFIG")
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    let mut full = vec!["vlbridge"];
    full.extend_from_slice(args);
    run(full)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_list_the_valid_set() {
    let out = bin(&["train"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in [
        "gen-data",
        "pretrain",
        "eval-itm",
        "dump-activations",
        "cka",
        "attn-distance",
        "gate-stats",
        "gradcheck",
    ] {
        assert!(err.contains(name), "missing {name} in {err}");
    }
    let out = bin(&["gen-data", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));

    assert_eq!(code(&[]), EXIT_USAGE);
    assert_eq!(code(&["gen-data"]), EXIT_USAGE);
    assert_eq!(code(&["gen-data", "--out", "x", "--set", "no_equals"]), EXIT_RUNTIME);
}

#[test]
fn help_lists_every_flag() {
    let out = bin(&["pretrain", "--help"]);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--seed", "--set", "--force", "--in", "--out", "--resume"] {
        assert!(text.contains(flag), "{flag}");
    }
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(
        code(&["eval-itm", "--checkpoint", p(&missing), "--in", p(&missing)]),
        EXIT_RUNTIME
    );
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "hidden_size = banana\n").unwrap();
    assert_eq!(
        code(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]),
        EXIT_RUNTIME
    );
}

#[test]
fn pipeline_runs_end_to_end_and_outputs_are_write_once() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let train = d("train");
    let held = d("held");
    let run_dir = d("run");
    let small = [
        "--set",
        "total_steps=3",
        "--set",
        "batch_size=4",
        "--set",
        "checkpoint_every=2",
    ];

    assert_eq!(
        code(&["gen-data", "--out", p(&train), "--count", "40", "--seed", "3"]),
        EXIT_OK
    );
    assert_eq!(
        code(&["gen-data", "--out", p(&train), "--count", "40", "--seed", "3"]),
        EXIT_RUNTIME
    );
    assert_eq!(
        code(&[
            "gen-data",
            "--out",
            p(&train),
            "--count",
            "40",
            "--seed",
            "3",
            "--force"
        ]),
        EXIT_OK
    );
    assert_eq!(
        code(&["gen-data", "--out", p(&held), "--count", "40", "--seed", "4"]),
        EXIT_OK
    );

    let mut args = vec!["pretrain", "--in", p(&train), "--out", p(&run_dir)];
    args.extend(small);
    assert_eq!(code(&args), EXIT_OK);
    assert_eq!(code(&args), EXIT_RUNTIME);
    let metrics = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(run_dir.join("step-000002.ckpt").exists());
    let ckpt = run_dir.join("final.ckpt");

    let eval_out = d("eval.json");
    assert_eq!(
        code(&[
            "eval-itm",
            "--checkpoint",
            p(&ckpt),
            "--in",
            p(&held),
            "--out",
            p(&eval_out),
            "--items",
            "20",
            "--recall-queries",
            "3"
        ]),
        EXIT_OK
    );
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(&eval_out).unwrap()).unwrap();
    assert_eq!(eval["items"], 20);

    let dump = d("dump.bin");
    assert_eq!(
        code(&[
            "dump-activations",
            "--checkpoint",
            p(&ckpt),
            "--in",
            p(&held),
            "--out",
            p(&dump),
            "--count",
            "8"
        ]),
        EXIT_OK
    );
    let grid = d("cka.txt");
    assert_eq!(
        code(&["cka", "--in", p(&dump), "--out", p(&grid), "--self", "text"]),
        EXIT_OK
    );
    let rows: Vec<Vec<f64>> = fs::read_to_string(&grid)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 4);
        assert!((r[i] - 1.0).abs() < 1e-6);
    }
    let pair = d("pair.txt");
    assert_eq!(
        code(&[
            "cka",
            "--in",
            p(&dump),
            "--out",
            p(&pair),
            "--pair",
            "visual",
            "fusion-visual"
        ]),
        EXIT_OK
    );
    assert_eq!(fs::read_to_string(&pair).unwrap().lines().count(), 4);
    assert_eq!(
        code(&["cka", "--in", p(&dump), "--out", p(&d("x.txt")), "--self", "audio"]),
        EXIT_RUNTIME
    );

    let dist = d("dist.txt");
    assert_eq!(
        code(&[
            "attn-distance",
            "--in",
            p(&dump),
            "--out",
            p(&dist),
            "--stream",
            "visual"
        ]),
        EXIT_OK
    );
    assert_eq!(fs::read_to_string(&dist).unwrap().lines().count(), 4);

    let gates = d("gates.jsonl");
    assert_eq!(code(&["gate-stats", "--in", p(&dump), "--out", p(&gates)]), EXIT_OK);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&gates)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    for l in &lines {
        let mean = l["mean"].as_f64().unwrap();
        assert!(mean > 0.0 && mean < 1.0);
        let total: u64 = l["histogram"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .sum();
        assert_eq!(total, l["count"].as_u64().unwrap());
    }
    assert_eq!(
        code(&["gate-stats", "--in", p(&dump), "--out", p(&gates)]),
        EXIT_RUNTIME
    );
    assert_eq!(
        code(&["gate-stats", "--in", p(&dump), "--out", p(&gates), "--force"]),
        EXIT_OK
    );
}

#[test]
fn paired_topology_runs_share_the_same_batches() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&["gen-data", "--out", p(&data), "--count", "36"]), EXIT_OK);
    let mut logs = Vec::new();
    for topo in ["all-gated", "last-only"] {
        let out = dir.path().join(topo);
        let set = format!("topology={topo}");
        let args = [
            "pretrain",
            "--in",
            p(&data),
            "--out",
            p(&out),
            "--set",
            &set,
            "--set",
            "total_steps=2",
            "--set",
            "batch_size=4",
        ];
        assert_eq!(code(&args), EXIT_OK);
        let rows: Vec<serde_json::Value> = fs::read_to_string(out.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        logs.push(rows);
    }
    assert_eq!(logs[0].len(), logs[1].len());
    for (a, b) in logs[0].iter().zip(&logs[1]) {
        assert_eq!(a["step"], b["step"]);
        assert_eq!(a["lr"], b["lr"]);
        assert_eq!(a["mlm_items"], b["mlm_items"]);
    }
}
