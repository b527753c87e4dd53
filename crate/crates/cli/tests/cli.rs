use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sunspin(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sunspin"));
    c.args(args);
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const RABI: &str = r#"{
  "protocol": "rabi",
  "fields": { "b": 960.0, "q": -320.0 },
  "scan": { "pair": { "low": -2.5, "high": -1.5 }, "omega": 71.0, "initial": -2.5, "durations": [0.0, 0.002, 0.004, 0.007] }
}"#;

#[test]
fn run_writes_csv_summary_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "rabi.json", RABI);
    let before = fs::read(&cfg).unwrap();
    let out = tmp.path().join("out");
    let o = sunspin(&["run", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&cfg).unwrap(), before);
    let csv = fs::read_to_string(out.join("populations.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("duration [s],P(-9/2) [1]"));
    assert_eq!(lines.count(), 4);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["schema_version"], "sunspin-output/1");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    let listed: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|e| e["file"].as_str().unwrap()).collect();
    assert_eq!(listed, ["populations.csv", "summary.json"]);
    assert_eq!(json(&out.join("summary.json"))["points"], 4);
}

#[test]
fn schema_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "rabi.json", RABI);
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    for params in [&["scan.durations=[]"][..], &["colour=1"], &["scan.pair.high=-3.5"], &["scan.initial=0"], &["n_shots=0"], &["fields=null"]] {
        let mut args = vec!["run", cfg.as_str(), "--out", out];
        for p in params {
            args.extend(["--param", p]);
        }
        assert_eq!(code(&sunspin(&args, &[])), 2, "{params:?}");
    }
    let bad = write_config(tmp.path(), "bad.json", "{ not json");
    assert_eq!(code(&sunspin(&["run", &bad], &[])), 2);
    assert_eq!(code(&sunspin(&["run", "/nonexistent/config.json"], &[])), 2);
    assert_eq!(code(&sunspin(&["rabi", "--out", out], &[("SUNSPIN_THREADS", "zero")])), 2);
    assert_eq!(code(&sunspin(&["frobnicate"], &[])), 2);
}

#[test]
fn simulation_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    // open time shorter than the interleaved pulses
    let o = sunspin(&["dual-ramsey", "--out", out.to_str().unwrap(), "--param", "scan.t_values=[0.001]"], &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(threads);
        let o = sunspin(&["ramsey", "--out", out.to_str().unwrap(), "--param", "scan.t_values=[0.0,0.004,0.01]"], &[("SUNSPIN_THREADS", threads)]);
        assert_eq!(code(&o), 0);
        csvs.push((fs::read(out.join("populations.csv")).unwrap(), fs::read(out.join("counts.csv")).unwrap()));
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn seed_changes_sampled_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut counts = Vec::new();
    for seed in ["1", "2"] {
        let out = tmp.path().join(seed);
        assert_eq!(code(&sunspin(&["ramsey", "--seed", seed, "--shots", "3", "--out", out.to_str().unwrap(), "--param", "scan.t_values=[0.004]"], &[])), 0);
        let text = fs::read_to_string(out.join("counts.csv")).unwrap();
        assert_eq!(text.lines().count(), 4);
        counts.push(text);
    }
    assert_ne!(counts[0], counts[1]);
}

#[test]
fn leakage_scan_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = sunspin(&["leakage-scan", "--ratios", "3,9,30,100,300", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(out.join("leakage.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [3.0, 9.0, 30.0, 100.0, 300.0]);
    for r in &rows {
        assert!(r[1] >= r[3] && r[3] >= r[2]);
    }
}

#[test]
fn fit_damped_sine_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = String::from("t_s,p\n");
    for k in 0..120 {
        let t = k as f64 * 1e-3;
        text += &format!("{t},{}\n", 0.5 + 0.4 * (-t / 0.05).exp() * (2.0 * std::f64::consts::PI * 40.0 * t + 0.3).cos());
    }
    let input = write_config(tmp.path(), "data.csv", &text);
    let out = tmp.path().join("o");
    let o = sunspin(&["fit", "damped-sine", &input, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc, json(&out.join("fit.json")));
    let r = &doc["result"];
    let get = |n: &str| {
        let k = r["names"].as_array().unwrap().iter().position(|x| x == n).unwrap();
        r["values"][k].as_f64().unwrap()
    };
    assert!((get("frequency").abs() - 40.0).abs() < 1e-6);
    assert!((get("tau") - 0.05).abs() < 1e-6);
    assert_eq!(fs::read_to_string(&input).unwrap(), text);
    let junk = write_config(tmp.path(), "junk.csv", "a,b\n1,x\n");
    assert_eq!(code(&sunspin(&["fit", "sine", &junk, "--out", out.to_str().unwrap()], &[])), 2);
}

#[test]
fn decompose_haar_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = sunspin(&["decompose", "--haar", "--n", "10", "--count", "20", "--seed", "4", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0);
    let stats = json(&out.join("stats.json"));
    assert_eq!(stats["targets"], 20);
    assert!(stats["max_error"].as_f64().unwrap() < 1e-8);
    // 45 Givens rotations, each an x and a z step, plus nine z phases
    assert!(stats["max_steps"].as_f64().unwrap() <= 99.0);
    let o = sunspin(&["decompose", "--haar", "--n", "11", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn decompose_explicit_target() {
    let tmp = tempfile::tempdir().unwrap();
    let n = 10;
    // swap of the two lowest levels
    let mut re = vec![vec![0.0; n]; n];
    for i in 2..n {
        re[i][i] = 1.0;
    }
    re[0][1] = 1.0;
    re[1][0] = 1.0;
    let target = serde_json::json!({ "re": re, "im": vec![vec![0.0; n]; n] });
    let path = write_config(tmp.path(), "u.json", &target.to_string());
    let out = tmp.path().join("o");
    let o = sunspin(&["decompose", "--target", &path, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let plan = json(&out.join("plan.json"));
    assert!(plan["error"].as_f64().unwrap() < 1e-12);
    let scaled = serde_json::json!({ "re": vec![vec![0.5; n]; n], "im": vec![vec![0.0; n]; n] });
    let bad = write_config(tmp.path(), "bad.json", &scaled.to_string());
    assert_eq!(code(&sunspin(&["decompose", "--target", &bad, "--out", out.to_str().unwrap()], &[])), 3);
}
