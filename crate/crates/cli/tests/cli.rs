use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn loadbench() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_loadbench"));
    c.env_remove("LOADBENCH_ENDPOINT");
    c
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "stdout:\n{stdout}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

const TINY_SPEC: &str = r#"{"n_train": 120, "n_val": 40, "n_test": 20, "width": 8, "height": 8,
    "channels": 3, "n_classes": 4, "seed": 3}"#;

fn tiny_dataset(root: &Path) -> std::path::PathBuf {
    let spec = root.join("spec.json");
    std::fs::write(&spec, TINY_SPEC).unwrap();
    let data = root.join("data");
    let out = ok(loadbench()
        .args(["generate", "--shard-capacity", "50", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap());
    assert!(out.contains("train: 120 records"), "{out}");
    assert!(out.contains("test: 20 records"), "{out}");
    data
}

#[test]
fn generate_then_bench_locally() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(tmp.path());
    assert!(data.join("train/manifest.json").exists());

    let results = tmp.path().join("runs.json");
    let out = ok(loadbench()
        .args([
            "bench",
            "--batch-size",
            "10",
            "--cutoff-batches",
            "5",
            "--repetitions",
            "2",
            "--workers",
            "1",
        ])
        .arg("--dir")
        .arg(&data)
        .arg("--out")
        .arg(&results)
        .output()
        .unwrap());
    assert_eq!(out.matches("samples/s").count(), 2, "{out}");

    let runs: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&results).unwrap()).unwrap();
    let runs = runs.as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["per_batch_seconds"].as_array().unwrap().len(), 5);
    assert_eq!(runs[0]["n"], 40);
}

#[test]
fn bench_filter_and_memory_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(tmp.path());
    let results = tmp.path().join("runs.json");
    let config = tmp.path().join("bench.json");
    std::fs::write(
        &config,
        r#"{"repetitions": 1, "cutoff": null, "split": "val"}"#,
    )
    .unwrap();
    ok(loadbench()
        .arg("bench")
        .arg(&config)
        .args([
            "--backend",
            "memory",
            "--batch-size",
            "4",
            "--filter-classes",
            "0,2",
            "--seed",
            "5",
        ])
        .arg("--dir")
        .arg(&data)
        .arg("--out")
        .arg(&results)
        .output()
        .unwrap());
    let runs: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&results).unwrap()).unwrap();
    let ids = runs[0]["processed_ids"].as_array().unwrap();
    assert!(!ids.is_empty());
    assert!(ids.len() < 40);
}

#[test]
fn sweep_analyze_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(tmp.path());
    let grid = tmp.path().join("grid.json");
    let grid_json = serde_json::json!({
        "base": {"repetitions": 1, "cutoff": {"batches": 3}, "backend": {"kind": "local", "dir": data}},
        "batch_sizes": [4, 8],
        "num_workers": [0, 1],
    });
    std::fs::write(&grid, grid_json.to_string()).unwrap();
    let out_dir = tmp.path().join("results");
    let out = ok(loadbench()
        .arg("sweep")
        .arg(&grid)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap());
    assert!(out.contains("4 runs (0 failed)"), "{out}");

    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert!(csv.starts_with(
        "fingerprint,batch_size,num_workers,backend,run_model,filter,repetition,m,n,t_f,"
    ));
    assert_eq!(csv.lines().count(), 5);

    let tables = ok(loadbench()
        .arg("analyze")
        .arg(out_dir.join("results.csv"))
        .output()
        .unwrap());
    assert!(tables.contains("Maximum speed"), "{tables}");
    let json = ok(loadbench()
        .arg("analyze")
        .arg("--json")
        .arg(out_dir.join("results.json"))
        .output()
        .unwrap());
    let analysis: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(analysis["correlation"]["r"].is_number());

    let runs = tmp.path().join("runs.json");
    ok(loadbench()
        .args(["bench", "--repetitions", "1", "--cutoff-batches", "3"])
        .arg("--dir")
        .arg(&data)
        .arg("--out")
        .arg(&runs)
        .output()
        .unwrap());
    let report_dir = tmp.path().join("report");
    ok(loadbench()
        .arg("report")
        .arg(out_dir.join("results.csv"))
        .arg("--svg")
        .arg("--runs")
        .arg(&runs)
        .arg("--out")
        .arg(&report_dir)
        .output()
        .unwrap());
    assert!(std::fs::read_to_string(report_dir.join("report.md"))
        .unwrap()
        .contains("4 runs, 0 failed"));
    assert!(std::fs::read_to_string(report_dir.join("max_speed.svg"))
        .unwrap()
        .starts_with("<svg"));
    assert!(report_dir.join("timing_bands.svg").exists());
}

#[test]
fn tune_reports_best_candidate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(tmp.path());
    let space = tmp.path().join("space.json");
    std::fs::write(&space, r#"{"batch_sizes": [4, 8], "num_workers": [0, 1]}"#).unwrap();
    let base = tmp.path().join("base.json");
    let base_json = serde_json::json!({
        "repetitions": 1, "cutoff": {"batches": 3}, "backend": {"kind": "local", "dir": data}
    });
    std::fs::write(&base, base_json.to_string()).unwrap();
    let out_file = tmp.path().join("tune.json");
    let out = ok(loadbench()
        .arg("tune")
        .arg(&space)
        .arg("--config")
        .arg(&base)
        .args(["--budget", "3"])
        .arg("--out")
        .arg(&out_file)
        .output()
        .unwrap());
    assert!(out.contains("best: "), "{out}");
    let result: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&out_file).unwrap()).unwrap();
    assert_eq!(result["trace"].as_array().unwrap().len(), 3);
}

#[test]
fn serve_and_bench_remote() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(tmp.path());
    let mut server = loadbench()
        .args(["serve", "--port", "0", "--latency-mean-ms", "1"])
        .arg("--dir")
        .arg(&data)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let endpoint = line.trim().rsplit(' ').next().unwrap().to_string();
    assert!(endpoint.starts_with("http://127.0.0.1:"), "{line}");

    let result = loadbench()
        .args([
            "bench",
            "--backend",
            "remote",
            "--repetitions",
            "1",
            "--cutoff-batches",
            "2",
            "--batch-size",
            "8",
        ])
        .env("LOADBENCH_ENDPOINT", &endpoint)
        .output()
        .unwrap();
    server.kill().unwrap();
    server.wait().unwrap();
    let out = ok(result);
    assert!(out.contains("rep 0: m = "), "{out}");
}

#[test]
fn invalid_arguments_fail() {
    let out = loadbench()
        .args(["bench", "--cutoff-batches", "3", "--cutoff-seconds", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = loadbench()
        .args(["bench", "--workers", "1", "--batch-size", "0"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let tmp = tempfile::tempdir().unwrap();
    let out = loadbench()
        .arg("bench")
        .arg("--dir")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
