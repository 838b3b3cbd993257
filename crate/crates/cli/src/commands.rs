use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use esbm::autodiff::checkpoint;
use esbm::biasnet::BiasNetwork;
use esbm::dynamics::{write_endpoints_csv, write_trajectory_csv};
use esbm::energy::{RbfFit, RbfManifold};
use esbm::io::{parse_points, read_points_csv, PointCloud};
use esbm::metrics::{distribution_metrics, MetricsConfig, MetricsReport, Samples};
use esbm::selfcheck;
use esbm::trainer::{infer, Problem, TrainConfig, CHECKPOINT_FILE, CURVES_FILE};

use crate::error::CliError;
use crate::manifest::{content_hash, now_unix, RunLock, RunManifest};

pub const MANIFOLD_FILE: &str = "manifold.bin";
pub const FIT_REPORT_FILE: &str = "fit_report.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const ENDPOINTS_FILE: &str = "endpoints.csv";
pub const METRIC_NAMES: [&str; 3] = ["mmd", "w1", "w2"];

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::input(path, e))
}

fn read_cloud(path: &Path) -> Result<PointCloud, CliError> {
    parse_points(&read_text(path)?, &path.display().to_string()).map_err(CliError::from)
}

/// Config values that name files, so their contents enter the input hash.
fn referenced_files(cfg: &TrainConfig) -> Vec<PathBuf> {
    [&cfg.potential, &cfg.initial, &cfg.target]
        .into_iter()
        .map(PathBuf::from)
        .filter(|p| p.is_file())
        .collect()
}

#[derive(Debug, Serialize)]
struct FitReport {
    points: usize,
    dim: usize,
    n_centers: usize,
    kappa: f64,
    seed: u64,
    residual: f64,
}

pub fn fit_manifold(data: &Path, nc: usize, kappa: f64, seed: u64, out: &Path) -> Result<(), CliError> {
    let started = now_unix();
    let cloud = read_cloud(data)?;
    let _lock = RunLock::acquire(out)?;
    let fit = RbfManifold::fit(&cloud.data, cloud.dim, RbfFit { n_centers: nc, kappa, seed })?;
    checkpoint::save(&out.join(MANIFOLD_FILE), &fit.to_tensors())?;
    let report = FitReport {
        points: cloud.len(),
        dim: cloud.dim,
        n_centers: nc,
        kappa,
        seed,
        residual: fit.fit_residual(&cloud.data),
    };
    let json = serde_json::to_string_pretty(&report).map_err(esbm::Error::from)?;
    std::fs::write(out.join(FIT_REPORT_FILE), json + "\n").map_err(esbm::Error::from)?;
    let config = format!("nc = {nc}\nkappa = {kappa}\nseed = {seed}\n");
    RunManifest {
        command: "fit-manifold".into(),
        input_hash: content_hash(&config, &[data])?,
        config,
        seed,
        outputs: vec![MANIFOLD_FILE.into(), FIT_REPORT_FILE.into()],
        started_unix: started,
        finished_unix: now_unix(),
    }
    .write(out)?;
    println!("fitted {nc} centers to {} points, residual {:.3e}", report.points, report.residual);
    Ok(())
}

pub fn train(config: Option<&Path>, overrides: &[String], seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let started = now_unix();
    let mut cfg = match config {
        Some(p) => TrainConfig::parse(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{o}` is not `key=value`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let problem = Problem::from_config(&cfg)?;
    let _lock = RunLock::acquire(out)?;
    let text = cfg.to_text();
    std::fs::write(out.join(CONFIG_FILE), &text).map_err(esbm::Error::from)?;
    let (_, report) = esbm::trainer::train(&cfg, &problem, Some(out), |s| {
        eprintln!("rollout {:>4}  loss {:>12.5}  mean reward {:>10.4}", s.rollout, s.loss, s.mean_reward);
    })?;
    let files = referenced_files(&cfg);
    RunManifest {
        command: "train".into(),
        input_hash: content_hash(&text, &files.iter().map(PathBuf::as_path).collect::<Vec<_>>())?,
        config: text,
        seed: cfg.seed,
        outputs: vec![
            CONFIG_FILE.into(),
            CHECKPOINT_FILE.into(),
            Path::new(CHECKPOINT_FILE).with_extension("json").display().to_string(),
            CURVES_FILE.into(),
        ],
        started_unix: started,
        finished_unix: now_unix(),
    }
    .write(out)?;
    println!(
        "trained {} rollouts in {:.1}s; checkpoint {}",
        cfg.n_rollouts,
        report.wall_time_s,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub struct SimulateArgs<'a> {
    pub checkpoint: &'a Path,
    pub config: Option<&'a Path>,
    pub init: &'a str,
    pub target: &'a str,
    pub samples: Option<usize>,
    pub seed: u64,
    pub out: &'a Path,
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let started = now_unix();
    let net = BiasNetwork::load(a.checkpoint)?;
    let config_path = match a.config {
        Some(p) => p.to_path_buf(),
        None => a.checkpoint.with_file_name(CONFIG_FILE),
    };
    let mut cfg = TrainConfig::parse(&read_text(&config_path)?)?;
    cfg.initial = a.init.to_string();
    cfg.target = a.target.to_string();
    let problem = Problem::from_config(&cfg)?;
    let count = a.samples.unwrap_or(cfg.samples);
    if count == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let trajs = infer(&net, &cfg, &problem, count, a.seed)?;
    let _lock = RunLock::acquire(a.out)?;
    let mut outputs = Vec::with_capacity(count + 1);
    for (m, t) in trajs.iter().enumerate() {
        let name = format!("traj_{m:04}.csv");
        write_trajectory_csv(&a.out.join(&name), t)?;
        outputs.push(name);
    }
    write_endpoints_csv(&a.out.join(ENDPOINTS_FILE), &trajs)?;
    outputs.push(ENDPOINTS_FILE.into());
    let text = cfg.to_text();
    let mut inputs = vec![a.checkpoint.to_path_buf(), config_path];
    inputs.extend(referenced_files(&cfg));
    RunManifest {
        command: "simulate".into(),
        input_hash: content_hash(&text, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?,
        config: text,
        seed: a.seed,
        outputs,
        started_unix: started,
        finished_unix: now_unix(),
    }
    .write(a.out)?;
    println!("wrote {count} trajectories to {}", a.out.display());
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub generated: &'a Path,
    pub reference: &'a Path,
    pub metrics: &'a [String],
    pub repeats: usize,
    pub seed: u64,
    pub wasserstein_dims: usize,
    pub out: Option<&'a Path>,
}

/// Endpoint coordinates with the `trajectory,particle` columns dropped.
fn read_endpoints(dir: &Path) -> Result<PointCloud, CliError> {
    let path = dir.join(ENDPOINTS_FILE);
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "{} holds no trajectories (expected {ENDPOINTS_FILE} from `simulate`)",
            dir.display()
        )));
    }
    let raw = read_cloud(&path)?;
    if raw.dim < 3 {
        return Err(CliError::Usage(format!("{}: no coordinate columns", path.display())));
    }
    let dim = raw.dim - 2;
    let data = (0..raw.len()).flat_map(|i| raw.row(i)[2..].to_vec()).collect();
    Ok(PointCloud { dim, data })
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    if let Some(bad) = a.metrics.iter().find(|m| !METRIC_NAMES.contains(&m.as_str())) {
        return Err(CliError::Usage(format!("unknown metric `{bad}` (choose from {})", METRIC_NAMES.join(", "))));
    }
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be positive".into()));
    }
    let generated = read_endpoints(a.generated)?;
    let reference = read_points_csv(a.reference)?;
    if generated.dim != reference.dim {
        return Err(CliError::Usage(format!(
            "generated samples are {}-dimensional, reference is {}-dimensional",
            generated.dim, reference.dim
        )));
    }
    let config = MetricsConfig {
        wasserstein_dims: (a.wasserstein_dims > 0).then_some(a.wasserstein_dims),
        ..MetricsConfig::default()
    };
    let g = Samples::new(&generated.data, generated.dim)?;
    let r = Samples::new(&reference.data, reference.dim)?;
    let repeats = (0..a.repeats as u64)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(k));
            let mut m = distribution_metrics(g, r, &config, &mut rng)?;
            m.retain(|name, _| a.metrics.contains(name));
            Ok(m)
        })
        .collect::<Result<Vec<_>, esbm::Error>>()?;
    let json = MetricsReport::from_repeats(&repeats).to_json()? + "\n";
    match a.out {
        Some(p) => std::fs::write(p, json).map_err(|e| CliError::input(p, e))?,
        None => print!("{json}"),
    }
    Ok(())
}

pub fn selfcheck(checkpoint: Option<&Path>, seeds: u64) -> Result<(), CliError> {
    let reports = selfcheck::run_all(seeds.max(1), checkpoint);
    for r in &reports {
        println!("{:<15} {}  {}", r.name, if r.passed { "ok  " } else { "FAIL" }, r.detail);
    }
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.name.to_string()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(failed))
    }
}
