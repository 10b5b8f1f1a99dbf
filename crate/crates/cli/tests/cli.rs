use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn d2m(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2m"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> String {
    let out = d2m(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 6-layer trace whose layer 4 is an exact copy of layer 3.
fn duplicate_fixture(dir: &Path) -> PathBuf {
    let trace = dir.join("trace.bin");
    ok(&[
        "synth-trace", "--layers", "6", "--tokens", "16", "--dim", "8", "--redundancy", "3:1:0", "--seed", "5",
        "--out", s(&trace),
    ]);
    let analysis = dir.join("analysis");
    ok(&["analyze", "--trace", s(&trace), "--out", s(&analysis)]);
    analysis.join("matrices.bin")
}

fn qwen_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = r#"{
      "model": {"num_layers": 24, "hidden_dim": 896, "mlp_dim": 4864, "num_heads": 14,
                "num_kv_heads": 2, "head_dim": 64, "vocab_size": 151936},
      "hardware": {"peak_flops": 350e12, "mem_bandwidth": 273e9},
      "workload": {"batch": 1, "prompt_len": 1000, "gen_len": 50}
    }"#;
    fs::write(&path, cfg).unwrap();
    path
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn analyze_writes_square_heatmaps_deterministically() {
    let dir = TempDir::new().unwrap();
    duplicate_fixture(dir.path());
    let a = dir.path().join("analysis");
    for name in ["s_out.csv", "s_mlp.csv", "delta_norm.csv"] {
        let text = fs::read_to_string(a.join(name)).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().all(|r| r.split(',').count() == 7));
    }
    let before = fs::read(a.join("s_out.csv")).unwrap();
    ok(&["analyze", "--trace", s(&dir.path().join("trace.bin")), "--out", s(&a)]);
    assert_eq!(fs::read(a.join("s_out.csv")).unwrap(), before);
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.bin");
    let out = d2m(&["analyze", "--trace", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.bin"));
}

#[test]
fn corrupt_input_exits_2_and_unwritable_output_exits_3() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a trace").unwrap();
    assert_eq!(code(&d2m(&["analyze", "--trace", s(&junk), "--out", s(dir.path())])), 2);
    // a regular file where a directory is needed
    let blocked = junk.join("sub").join("trace.bin");
    let out = d2m(&["synth-trace", "--layers", "2", "--tokens", "2", "--dim", "2", "--out", s(&blocked)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn search_prunes_the_planted_duplicate() {
    let dir = TempDir::new().unwrap();
    let m = duplicate_fixture(dir.path());
    let plan = dir.path().join("plan.json");
    ok(&["search", "--matrices", s(&m), "--delta", "0.05", "--epsilon", "0.1", "--out", s(&plan)]);
    let v = json(&plan);
    assert_eq!(v["prune"], serde_json::json!([4]));
    assert_eq!(v["blocks"][0]["base"], 3);
}

#[test]
fn sweep_grid_has_one_row_per_cell() {
    let dir = TempDir::new().unwrap();
    let m = duplicate_fixture(dir.path());
    let csv = dir.path().join("sweep.csv");
    ok(&[
        "search", "--matrices", s(&m), "--sweep", "--deltas", "0.01,0.02,0.05,0.1,0.2", "--epsilons",
        "0.01,0.02,0.05,0.1,0.2", "--out", s(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "delta,epsilon,pruned_count");
    assert_eq!(text.lines().count(), 26);
}

#[test]
fn invalid_thresholds_exit_2() {
    let dir = TempDir::new().unwrap();
    let m = duplicate_fixture(dir.path());
    let out = dir.path().join("p.json");
    for delta in ["1.5", "0", "-0.1"] {
        let r = d2m(&["search", "--matrices", s(&m), "--delta", delta, "--out", s(&out)]);
        assert_eq!(code(&r), 2, "delta {delta}");
    }
    assert!(!out.exists());
    assert_eq!(code(&d2m(&["search", "--bogus"])), 2);
}

fn fused_fixture(dir: &Path) -> PathBuf {
    let model = dir.join("model.bin");
    ok(&["init-model", "--seed", "1", "--out", s(&model)]);
    let plan = dir.join("plan.json");
    fs::write(&plan, r#"{"keep":[1,2,4,5,6],"prune":[3],"blocks":[{"base":2,"redundant":[3]}]}"#).unwrap();
    let fused = dir.join("fused.bin");
    ok(&[
        "fuse", "--model", s(&model), "--plan", s(&plan), "--base-copies", "2", "--supp-copies", "2", "--out",
        s(&fused),
    ]);
    fused
}

#[test]
fn fuse_writes_model_and_provenance() {
    let dir = TempDir::new().unwrap();
    let fused = fused_fixture(dir.path());
    assert!(fused.exists());
    let prov = json(&dir.path().join("fused.provenance.json"));
    assert_eq!(prov[0]["layer"], 2);
    assert_eq!(prov[0]["experts"].as_array().unwrap().len(), 4);
    // a plan for another depth does not fit the model
    let plan = dir.path().join("bad.json");
    fs::write(&plan, r#"{"keep":[1,3],"prune":[2],"blocks":[{"base":1,"redundant":[2]}]}"#).unwrap();
    let r = d2m(&["fuse", "--model", s(&dir.path().join("model.bin")), "--plan", s(&plan), "--out", s(&dir.path().join("x.bin"))]);
    assert_eq!(code(&r), 2);
}

#[test]
fn train_toy_log_feeds_diagnose() {
    let dir = TempDir::new().unwrap();
    let fused = fused_fixture(dir.path());
    let train = dir.path().join("train");
    ok(&["train-toy", "--model", s(&fused), "--steps", "5", "--seed", "2", "--out", s(&train)]);
    let log = fs::read_to_string(train.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.starts_with("step,task_loss,lb_loss,load_e1,load_e2,load_e3,load_e4"));
    let wta = dir.path().join("wta.csv");
    let routing = train.join("routing.csv");
    ok(&[
        "diagnose", "--log", s(&routing), "--compare", s(&routing), "--compare-out", s(&dir.path().join("cmp.csv")),
        "--out", s(&wta),
    ]);
    let summary = fs::read_to_string(&wta).unwrap();
    assert_eq!(summary.lines().count(), 7);
    let cmp = fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    assert!(cmp.lines().skip(1).all(|l| l.ends_with(",0")));
    // the dense model has nothing to train
    let r = d2m(&["train-toy", "--model", s(&dir.path().join("model.bin")), "--steps", "1", "--out", s(&train)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn estimate_reports_roofline_and_memory() {
    let dir = TempDir::new().unwrap();
    let cfg = qwen_config(dir.path());
    let out = dir.path().join("cost.json");
    ok(&["estimate", "--config", s(&cfg), "--out", s(&out)]);
    let v = json(&out);
    assert!((v[0]["prefill_s"].as_f64().unwrap() * 1e3 - 2.0447).abs() < 1e-3);
    assert!((v[0]["decode_s"].as_f64().unwrap() * 1e3 - 133.38).abs() < 1e-2);

    ok(&["estimate", "--config", s(&cfg), "--layers", "19", "--experts", "2,6,10,60", "--out", s(&out)]);
    let v = json(&out);
    let records = v.as_array().unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r["total_s"] == records[0]["total_s"]));
    assert!((records[1]["bytes"].as_f64().unwrap() - 3.32e9).abs() < 0.01e9);
    assert_eq!(records[1]["config_id"], "L19-N6-k1");
}

fn table_candidates(dir: &Path) -> PathBuf {
    let path = dir.join("candidates.csv");
    fs::write(
        &path,
        "config_id,depth,latency_ms,score\nL13,13,135.78,29.85\nL15,15,148.84,39.06\nL17,17,161.89,42.76\n\
         L19,19,174.95,47.31\nL21,21,188.00,47.50\nL23,23,201.05,47.93\n",
    )
    .unwrap();
    path
}

#[test]
fn pareto_selects_depth_19() {
    let dir = TempDir::new().unwrap();
    let c = table_candidates(dir.path());
    let (out, front) = (dir.path().join("r.csv"), dir.path().join("f.csv"));
    let stdout = ok(&[
        "pareto", "--candidates", s(&c), "--base-latency", "195.87", "--w", "-0.15", "--out", s(&out), "--frontier",
        s(&front),
    ]);
    assert!(stdout.contains("best L19"), "{stdout}");
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# w=-0.1500\nconfig_id,depth,latency_ms,score,reward\n"));
    assert!(text.contains("L19,19,174.95,47.31,48.12"));
    // every row is faster-but-worse or slower-but-better than its neighbours
    assert_eq!(fs::read_to_string(&front).unwrap().lines().count(), 2 + 6);
    // the rewritten output is itself a valid candidate file
    ok(&["pareto", "--candidates", s(&out), "--base-latency", "195.87", "--w", "-0.15", "--out", s(&out), "--frontier", s(&front)]);
}

#[test]
fn pareto_calibration_is_echoed() {
    let dir = TempDir::new().unwrap();
    let c = table_candidates(dir.path());
    let (out, front) = (dir.path().join("r.csv"), dir.path().join("f.csv"));
    ok(&[
        "pareto", "--candidates", s(&c), "--base-latency", "195.87", "--calibrate", "2", "1.11", "--out", s(&out),
        "--frontier", s(&front),
    ]);
    assert!(fs::read_to_string(&out).unwrap().starts_with("# w=-0.1506\n"));
}

#[test]
fn pareto_rejects_empty_input() {
    let dir = TempDir::new().unwrap();
    let c = dir.path().join("empty.csv");
    fs::write(&c, "config_id,depth,latency_ms,score\n").unwrap();
    let r = d2m(&[
        "pareto", "--candidates", s(&c), "--base-latency", "1", "--w", "-0.15", "--out", s(&dir.path().join("r.csv")),
        "--frontier", s(&dir.path().join("f.csv")),
    ]);
    assert_eq!(code(&r), 2);
    let r = d2m(&["pareto", "--candidates", s(&c), "--base-latency", "1", "--out", "r", "--frontier", "f"]);
    assert_eq!(code(&r), 2, "needs --w or --calibrate");
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |out: &Path| ok(&["pipeline", "--out", s(out), "--seed", "3", "--steps", "5"]);
    args(&a);
    args(&b);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta, tb);
    assert_eq!(ta.len(), 16);
    let manifest = json(&a.join("manifest.json"));
    let stages: Vec<&str> = manifest["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        stages,
        ["init-model", "trace", "analyze", "search", "fuse", "estimate", "train-toy", "diagnose"]
    );
    // stage inputs carry the hash their producer recorded
    assert_eq!(
        manifest["stages"][4]["inputs"]["plan.json"],
        manifest["stages"][3]["outputs"]["plan.json"]
    );
}

#[test]
fn single_job_matches_parallel() {
    let dir = TempDir::new().unwrap();
    let m = duplicate_fixture(dir.path());
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let grid = ["--sweep", "--deltas", "0.01,0.1", "--epsilons", "0.05,0.2"];
    let mut args = vec!["search", "--matrices", s(&m), "--out", s(&a)];
    args.extend(grid);
    ok(&args);
    let mut args = vec!["--jobs", "1", "search", "--matrices", s(&m), "--out", s(&b)];
    args.extend(grid);
    ok(&args);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    assert_eq!(code(&d2m(&["--jobs", "0", "search", "--matrices", s(&m), "--out", "x"])), 2);
}
