use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn lpvsync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpvsync"))
        .args(args)
        .env_remove("LPVSYNC_OUT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synthesize(config: &Path, dir: &Path) -> PathBuf {
    let out = lpvsync(&[
        "synthesize",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("schedule.json")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn synthesize_simulate_verify() {
    let tmp = TempDir::new().unwrap();
    let config = configs().join("synthetic.toml");
    let schedule = synthesize(&config, &tmp.path().join("syn"));
    for f in ["schedule.json", "report.json", "manifest.json"] {
        assert!(tmp.path().join("syn").join(f).exists(), "{f}");
    }
    let report: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("syn/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["grid"].as_array().unwrap().len(), 3);
    let gamma_sq = report["gamma_sq"].as_f64().unwrap();
    assert!(gamma_sq > 0.0 && gamma_sq.is_finite());

    let sim_dir = tmp.path().join("sim");
    let out = lpvsync(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--schedule",
        schedule.to_str().unwrap(),
        "--out",
        sim_dir.to_str().unwrap(),
        "--horizon",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["trace.csv", "plot.py", "metrics.json", "manifest.json"] {
        assert!(sim_dir.join(f).exists(), "{f}");
    }
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(sim_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let out = lpvsync(&["verify", "--schedule", schedule.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn seeded_simulations_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let config = configs().join("synthetic.toml");
    let schedule = synthesize(&config, &tmp.path().join("syn"));
    let run = |name: &str, seed: &str| {
        let dir = tmp.path().join(name);
        let out = lpvsync(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--schedule",
            schedule.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            seed,
            "--horizon",
            "2",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(dir.join("trace.csv")).unwrap()
    };
    let a = run("a", "7");
    assert_eq!(a, run("b", "7"));
    assert_ne!(a, run("c", "8"));
}

#[test]
fn single_point_schedule_verifies() {
    let tmp = TempDir::new().unwrap();
    let schedule = synthesize(&configs().join("single_point.toml"), tmp.path());
    let out = lpvsync(&["verify", "--schedule", schedule.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn infeasible_gamma_exits_2() {
    let tmp = TempDir::new().unwrap();
    let text = fs::read_to_string(configs().join("synthetic.toml"))
        .unwrap()
        .replace(
            "gamma = { mode = \"minimize\" }",
            "gamma = { mode = \"fixed\", value = 1e-6 }",
        );
    let config = write_config(tmp.path(), "tight.toml", &text);
    let out = lpvsync(&[
        "synthesize",
        "--config",
        config.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("infeasible"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    let text = fs::read_to_string(configs().join("synthetic.toml"))
        .unwrap()
        .replace("q_scale = 1.0", "q_scale = 1.0\ngird = 4");
    let config = write_config(tmp.path(), "typo.toml", &text);
    let out = lpvsync(&["synthesize", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("gird"), "{}", stderr(&out));

    let out = lpvsync(&[
        "synthesize",
        "--config",
        tmp.path().join("missing.toml").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn corrupted_archive_fails_verification() {
    let tmp = TempDir::new().unwrap();
    let schedule = synthesize(&configs().join("synthetic.toml"), tmp.path());
    let mut archive: Value = serde_json::from_str(&fs::read_to_string(&schedule).unwrap()).unwrap();
    // flip the sign of X_1 at the middle grid point
    let x = &mut archive["certificates"][1]["x"][0];
    for row in x.as_array_mut().unwrap() {
        for v in row.as_array_mut().unwrap() {
            *v = Value::from(-v.as_f64().unwrap());
        }
    }
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, serde_json::to_string(&archive).unwrap()).unwrap();
    let out = lpvsync(&["verify", "--schedule", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("segment"), "{}", stderr(&out));
}

#[test]
fn incompatible_archive_exits_2() {
    let tmp = TempDir::new().unwrap();
    let schedule = synthesize(&configs().join("synthetic.toml"), &tmp.path().join("syn"));
    let text = fs::read_to_string(configs().join("synthetic.toml"))
        .unwrap()
        .replacen("d2 = [[0.05]]", "d2 = [[0.06]]", 1);
    let other = write_config(tmp.path(), "other.toml", &text);
    let out = lpvsync(&[
        "simulate",
        "--config",
        other.to_str().unwrap(),
        "--schedule",
        schedule.to_str().unwrap(),
        "--out",
        tmp.path().join("sim").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("network"), "{}", stderr(&out));
}

#[test]
fn unreadable_archive_exits_1() {
    let tmp = TempDir::new().unwrap();
    let junk = write_config(tmp.path(), "junk.json", "{\"format\": 3}");
    let out = lpvsync(&["verify", "--schedule", junk.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn output_root_from_environment() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lpvsync"))
        .args([
            "synthesize",
            "--config",
            configs().join("single_point.toml").to_str().unwrap(),
        ])
        .env("LPVSYNC_OUT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(tmp.path().join("synthesize/schedule.json").exists());
}
