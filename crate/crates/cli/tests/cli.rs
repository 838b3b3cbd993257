use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn esbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esbm"))
        .args(args)
        .env_remove("ESBM_THREADS")
        .output()
        .expect("spawn esbm")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn smoke_config() -> PathBuf {
    workspace().join("configs/smoke.conf")
}

/// Trains the smoke config into `dir/run`.
fn smoke_run(dir: &Path) -> PathBuf {
    let run = dir.join("run");
    let o = esbm(&["train", "--config", s(&smoke_config()), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    run
}

#[test]
fn missing_data_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = esbm(&["fit-manifold", "--data", "no/such.csv", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no/such.csv"));
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "n_rollouts = 1\nlearning_rate = 0.1\n").unwrap();
    let o = esbm(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"));
    let o = esbm(&["train", "--out", s(&dir.path().join("r")), "lr"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_usage_and_thread_settings_exit_2() {
    assert_eq!(code(&esbm(&["train"])), 2);
    assert_eq!(code(&esbm(&["frobnicate"])), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_esbm"))
        .args(["selfcheck", "--seeds", "1"])
        .env("ESBM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_esbm"))
        .args(["selfcheck", "--seeds", "1"])
        .env("ESBM_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = esbm(&[
        "train",
        "--config",
        s(&smoke_config()),
        "--out",
        s(&dir.path().join("r")),
        "potential=double_well:NaN,1",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn smoke_train_is_fast_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let run = smoke_run(dir.path());
    assert!(t.elapsed() < Duration::from_secs(60));
    for f in ["config.txt", "checkpoint.bin", "checkpoint.json", "curves.csv", "manifest.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(!run.join(".lock").exists());
    let curves = std::fs::read_to_string(run.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 3);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["input_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn busy_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".lock"), "").unwrap();
    let o = esbm(&["train", "--config", s(&smoke_config()), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("in use"));
}

#[test]
fn seed_override_changes_outputs_and_reruns_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let train = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = esbm(&["train", "--config", s(&smoke_config()), "--seed", seed, "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(out.join("checkpoint.bin")).unwrap()
    };
    let a = train("a", "4");
    assert_eq!(a, train("b", "4"));
    assert_ne!(a, train("c", "5"));
}

fn simulate(run: &Path, out: &Path, target: &str, seed: &str) -> Output {
    esbm(&[
        "simulate",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--init",
        "point:-1,0,-1,0.2,-1,-0.2,-0.8,0",
        "--target",
        target,
        "--samples",
        "6",
        "--seed",
        seed,
        "--out",
        s(out),
    ])
}

fn output_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn simulate_writes_paths_and_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = smoke_run(dir.path());
    let target = "point:1,0,1,0.2,1,-0.2,0.8,0";
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&simulate(&run, &a, target, "3")), 0);
    assert_eq!(code(&simulate(&run, &b, target, "3")), 0);
    let files = output_bytes(&a);
    assert_eq!(files.len(), 7);
    assert_eq!(files, output_bytes(&b));
    let endpoints = std::fs::read_to_string(a.join("endpoints.csv")).unwrap();
    assert_eq!(endpoints.lines().count() - 1, 6 * 4);
    let traj = std::fs::read_to_string(a.join("traj_0000.csv")).unwrap();
    assert_eq!(traj.lines().count() - 1, 11 * 4);

    // a target cloud never seen in training
    let cloud = dir.path().join("unseen.csv");
    std::fs::write(&cloud, "x0,x1\n0.5,1\n0.6,1.1\n0.4,0.9\n0.5,1.2\n0.7,1\n").unwrap();
    let c = dir.path().join("c");
    let o = simulate(&run, &c, s(&cloud), "3");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(c.join("endpoints.csv").is_file());
}

#[test]
fn simulate_rejects_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = smoke_run(dir.path());
    let cfg = dir.path().join("d3.conf");
    let text = std::fs::read_to_string(run.join("config.txt")).unwrap().replace("d = 2", "d = 3");
    std::fs::write(&cfg, text).unwrap();
    let o = esbm(&[
        "simulate",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--config",
        s(&cfg),
        "--init",
        "point:0,0,0,1,0,0,2,0,0,3,0,0",
        "--target",
        "point:1,0,0,1,1,0,1,2,0,1,3,0",
        "--out",
        s(&dir.path().join("sim")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn evaluate_identity_filtering_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let run = smoke_run(dir.path());
    let sim = dir.path().join("sim");
    assert_eq!(code(&simulate(&run, &sim, "point:1,0,1,0.2,1,-0.2,0.8,0", "1")), 0);
    // the generated endpoints themselves as the reference
    let endpoints = std::fs::read_to_string(sim.join("endpoints.csv")).unwrap();
    let reference: String = endpoints
        .lines()
        .map(|l| l.splitn(3, ',').nth(2).unwrap().to_string() + "\n")
        .collect();
    let ref_path = dir.path().join("ref.csv");
    std::fs::write(&ref_path, reference).unwrap();
    let out = dir.path().join("m.json");
    let o = esbm(&["evaluate", "--generated", s(&sim), "--reference", s(&ref_path), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["repeats"], 5);
    for k in ["mmd", "w1", "w2"] {
        assert!(v["metrics"][k]["mean"].as_f64().unwrap().abs() < 1e-12, "{k}");
        assert_eq!(v["metrics"][k]["values"].as_array().unwrap().len(), 5);
    }

    let o = esbm(&["evaluate", "--generated", s(&sim), "--reference", s(&ref_path), "--metrics", "w1"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["metrics"].as_object().unwrap().keys().collect::<Vec<_>>(), ["w1"]);

    let o = esbm(&["evaluate", "--generated", s(&sim), "--reference", s(&ref_path), "--metrics", "kl"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn evaluate_empty_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let reference = dir.path().join("ref.csv");
    std::fs::write(&reference, "1,2\n").unwrap();
    let o = esbm(&["evaluate", "--generated", s(dir.path()), "--reference", s(&reference)]);
    assert_eq!(code(&o), 2);
}

fn sha256(path: &Path) -> String {
    format!("{:x}", Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn golden_two_moons_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = workspace().join("data/two_moons.csv");
    let fit = |name: &str| {
        let out = dir.path().join(name);
        let o = esbm(&["fit-manifold", "--data", s(&data), "--nc", "100", "--kappa", "5", "--seed", "11", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let (a, b) = (fit("a"), fit("b"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("fit_report.json")).unwrap()).unwrap();
    assert!(report["residual"].as_f64().unwrap() < 1e-3);
    assert_eq!(std::fs::read(a.join("manifold.bin")).unwrap(), std::fs::read(b.join("manifold.bin")).unwrap());
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/two_moons_manifold.sha256"))
        .unwrap();
    assert_eq!(sha256(&a.join("manifold.bin")), golden.trim());
}

#[test]
fn cell_protocol_fit_settings_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let data = workspace().join("data/two_moons.csv");
    let o = esbm(&["fit-manifold", "--data", s(&data), "--nc", "150", "--kappa", "1.5", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn selfcheck_passes_and_flags_corrupted_checkpoints() {
    let t = Instant::now();
    let o = esbm(&["selfcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(t.elapsed() < Duration::from_secs(120));
    let out = String::from_utf8_lossy(&o.stdout);
    for suite in ["gradcheck", "girsanov", "positivity", "metric-oracles"] {
        assert!(out.contains(suite));
    }

    let dir = tempfile::tempdir().unwrap();
    let run = smoke_run(dir.path());
    let ckpt = run.join("checkpoint.bin");
    assert_eq!(code(&esbm(&["selfcheck", "--seeds", "1", "--checkpoint", s(&ckpt)])), 0);
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&ckpt, bytes).unwrap();
    let o = esbm(&["selfcheck", "--seeds", "1", "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("checkpoint"));
}
