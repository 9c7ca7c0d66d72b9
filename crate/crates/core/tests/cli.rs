use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
    "seed": 3,
    "model": {"num_blocks": 4, "model_dim": 16, "num_heads": 2, "tokens_per_frame": 4,
              "frames": 2, "cond_dim": 8, "cond_tokens": 2},
    "schedule": {"steps": 10},
    "calibration": {"batch_timesteps": 3, "rotation_block": 8},
    "output": {"run_id": "small"}
}"#;

fn cli(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dit-accel"))
        .args(args)
        .env("DIT_ACCEL_OUT_DIR", out)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn run_replay_compare_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out");

    let o = cli(&out, &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = out.join("small");
    for f in [
        "trace.jsonl",
        "metrics.csv",
        "output.bin",
        "baseline.bin",
        "config.json",
    ] {
        assert!(run_dir.join(f).exists(), "{f}");
    }

    let o = cli(
        &out,
        &[
            "replay",
            "--trace",
            run_dir.join("trace.jsonl").to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let a = run_dir.join("baseline.bin");
    let o = cli(
        &out,
        &[
            "compare",
            "--a",
            a.to_str().unwrap(),
            "--b",
            a.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("psnr=99"));

    let o = cli(&out, &["calibrate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run_dir.join("calibration.json").exists());
}

#[test]
fn bench_writes_merged_csv() {
    let dir = tempfile::tempdir().unwrap();
    let base: serde_json::Value = serde_json::from_str(SMALL).unwrap();
    let mut entries = Vec::new();
    for (id, hlc) in [("a", false), ("b", true)] {
        let mut c = base.clone();
        c["output"]["run_id"] = id.into();
        c["toggles"] = serde_json::json!({"hlc": hlc, "srap": false, "aigq_weights": false, "aigq_acts": false});
        entries.push(c);
    }
    let sweep = dir.path().join("sweep.json");
    std::fs::write(&sweep, serde_json::to_string(&entries).unwrap()).unwrap();
    let out = dir.path().join("out");
    let o = cli(&out, &["bench", "--sweep", sweep.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(
        lines[1].starts_with("a,") && lines[2].starts_with("b,"),
        "{csv}"
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"seed": 1, "thresholds": {"delta1": 5.0, "delta2": 1.0}}"#,
    )
    .unwrap();
    let o = cli(&out, &["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("delta1"));

    let missing = dir.path().join("nope.json");
    assert_eq!(
        code(&cli(&out, &["run", "--config", missing.to_str().unwrap()])),
        3
    );

    let cfg = dir.path().join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    assert_eq!(
        code(&cli(&out, &["run", "--config", cfg.to_str().unwrap()])),
        0
    );
    let trace = std::fs::read_to_string(out.join("small/trace.jsonl")).unwrap();
    let cut = trace.len() - 30;
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, &trace[..cut]).unwrap();
    let o = cli(&out, &["replay", "--trace", broken.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}
