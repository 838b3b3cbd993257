use esbm::biasnet::{BiasNetwork, TargetSpec};
use esbm::dynamics::{rollout_batch, FnControl, SystemState};
use esbm::io::{write_points_csv, PointCloud};
use esbm::trainer::{infer, train, Problem, TrainConfig, Trainer, CHECKPOINT_FILE, CURVES_FILE};
use esbm::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn smoke() -> TrainConfig {
    TrainConfig {
        n_rollouts: 2,
        n_epochs: 3,
        samples: 8,
        batch_size: 4,
        steps: 10,
        width: 8,
        heads: 2,
        ff: 16,
        layers: 1,
        chunk: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_rollouts_give_untrained_checkpoint() {
    let cfg = TrainConfig { n_rollouts: 0, ..smoke() };
    let dir = tempfile::tempdir().unwrap();
    let problem = Problem::from_config(&cfg).unwrap();
    let (net, report) = train(&cfg, &problem, Some(dir.path()), |_| {}).unwrap();
    assert!(report.loss.is_empty() && report.mean_reward.is_empty());
    let fresh = BiasNetwork::new(cfg.net_config(), cfg.seed).unwrap();
    assert_eq!(net.params(), fresh.params());
    let loaded = BiasNetwork::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded.params(), fresh.params());
}

#[test]
fn fixed_seed_reproduces_curves_and_files() {
    let cfg = smoke();
    let problem = Problem::from_config(&cfg).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (_, ra) = train(&cfg, &problem, Some(a.path()), |_| {}).unwrap();
    let (_, rb) = train(&cfg, &problem, Some(b.path()), |_| {}).unwrap();
    assert_eq!(ra.loss.len(), 2);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ra.loss), bits(&rb.loss));
    assert_eq!(bits(&ra.mean_reward), bits(&rb.mean_reward));
    for f in [CHECKPOINT_FILE, CURVES_FILE, "checkpoint.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let other = TrainConfig { seed: 1, ..cfg };
    let (_, rc) = train(&other, &problem, None, |_| {}).unwrap();
    assert_ne!(bits(&ra.loss), bits(&rc.loss));
}

#[test]
fn underdamped_lv_run_completes() {
    let cfg = TrainConfig {
        mode: esbm::dynamics::Integrator::Underdamped,
        objective: esbm::objective::Objective::Lv,
        n: 3,
        initial: "point:-1,0,-1,0.3,-1,-0.3".into(),
        target: "point:1,0,1,0.3,1,-0.3".into(),
        dropout: 0.1,
        ..smoke()
    };
    let problem = Problem::from_config(&cfg).unwrap();
    let mut seen = Vec::new();
    let (_, r) = train(&cfg, &problem, None, |s| seen.push(s.rollout)).unwrap();
    assert_eq!(seen, vec![0, 1]);
    assert!(r.loss.iter().all(|l| l.is_finite() && *l >= 0.0));
}

#[test]
fn rollout_failure_names_the_rollout() {
    let cfg = TrainConfig {
        potential: "double_well:NaN,1".into(),
        ..smoke()
    };
    let problem = Problem::from_config(&cfg).unwrap();
    match train(&cfg, &problem, None, |_| {}) {
        Err(Error::Rollout { index: 0, source }) => {
            assert!(matches!(*source, Error::NonFiniteForce { .. }), "{source}")
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn bad_config_references_rejected() {
    let cfg = TrainConfig {
        initial: "point:1,2,3".into(),
        ..smoke()
    };
    assert!(Problem::from_config(&cfg).is_err());
    let cfg = TrainConfig {
        target: "/does/not/exist.csv".into(),
        ..smoke()
    };
    assert!(matches!(Problem::from_config(&cfg), Err(Error::Io(_))));
}

/// Repeated CE steps on a frozen buffer lower the smoothed loss.
#[test]
fn frozen_buffer_training_descends() {
    let mut descending = 0;
    let runs = 10;
    for seed in 0..runs {
        let cfg = TrainConfig {
            seed,
            samples: 16,
            batch_size: 16,
            lr: 3e-3,
            ..smoke()
        };
        let mut t = Trainer::new(cfg.clone(), Problem::from_config(&cfg).unwrap()).unwrap();
        t.collect().unwrap();
        let losses: Vec<f64> = (0..30).map(|e| t.gradient_step(e).unwrap()).collect();
        let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        if window(&losses[25..]) <= window(&losses[..5]) {
            descending += 1;
        }
    }
    assert!(descending * 10 >= runs * 9, "{descending} of {runs}");
}

#[test]
fn untrained_inference_matches_analytic_control() {
    let cfg = TrainConfig {
        n: 2,
        initial: "point:-1,0,-1,0.5".into(),
        target: "point:1,0,1,0.5".into(),
        ..smoke()
    };
    let problem = Problem::from_config(&cfg).unwrap();
    let net = BiasNetwork::new(cfg.net_config(), 5).unwrap();
    let got = infer(&net, &cfg, &problem, 64, 11).unwrap();
    assert_eq!(got.len(), 64);
    let params = cfg.dynamics();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (init, tgts, seeds) = problem.sample(&cfg, &params, 64, &mut rng).unwrap();
    let analytic = FnControl(|s: &SystemState, t: &TargetSpec| {
        let mut u = vec![0.0; 4];
        for i in 0..2 {
            let (dx, dy) = (t.r_b[2 * i] - s.r[2 * i], t.r_b[2 * i + 1] - s.r[2 * i + 1]);
            let norm = dx.hypot(dy);
            u[2 * i] = std::f64::consts::LN_2 * dx / norm;
            u[2 * i + 1] = std::f64::consts::LN_2 * dy / norm;
        }
        u
    });
    let want = rollout_batch(&analytic, &init, &tgts, &params, &problem.potential, &seeds).unwrap();
    for (a, b) in got.iter().zip(&want) {
        let diff = a.final_state().r.iter().zip(&b.final_state().r).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10);
    }
    assert_eq!(infer(&net, &cfg, &problem, 3, 11).unwrap(), infer(&net, &cfg, &problem, 3, 11).unwrap());
    let wrong = TrainConfig { d: 3, initial: "point:0,0,0,0,0,0".into(), target: "point:1,1,1,1,1,1".into(), ..cfg };
    assert!(infer(&net, &wrong, &problem, 3, 0).is_err());
}

#[test]
fn trained_checkpoint_round_trip() {
    let cfg = smoke();
    let dir = tempfile::tempdir().unwrap();
    let problem = Problem::from_config(&cfg).unwrap();
    let (net, _) = train(&cfg, &problem, Some(dir.path()), |_| {}).unwrap();
    let back = BiasNetwork::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let s = SystemState::new(1, 2, vec![-0.3, 0.2], vec![0.1, 0.0]).unwrap();
    let t = TargetSpec::new(1, 2, vec![1.0, 0.0], 0.1).unwrap();
    let (a, b) = (net.compute_bias(&s, &t).unwrap(), back.compute_bias(&s, &t).unwrap());
    for (x, y) in a.b.iter().zip(&b.b) {
        assert!((x - y).abs() <= 1e-15);
    }
}

#[test]
fn cloud_sources_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let src = PointCloud { dim: 2, data: (0..40).map(|i| -1.0 + 0.01 * i as f64).collect() };
    let tgt = PointCloud { dim: 2, data: (0..40).map(|i| 1.0 + 0.01 * i as f64).collect() };
    write_points_csv(&dir.path().join("a.csv"), &src).unwrap();
    write_points_csv(&dir.path().join("b.csv"), &tgt).unwrap();
    let cfg = TrainConfig {
        n: 4,
        initial: dir.path().join("a.csv").display().to_string(),
        target: dir.path().join("b.csv").display().to_string(),
        n_rollouts: 1,
        ..smoke()
    };
    let problem = Problem::from_config(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (init, tgts, _) = problem.sample(&cfg, &cfg.dynamics(), 5, &mut rng).unwrap();
    for (s, t) in init.iter().zip(&tgts) {
        assert!(s.r.iter().all(|x| (-1.0..-0.6).contains(x)));
        assert!(t.r_b.iter().all(|x| (1.0..1.4).contains(x)));
    }
    train(&cfg, &problem, None, |_| {}).unwrap();
    let too_big = TrainConfig { n: 30, ..cfg };
    assert!(Problem::from_config(&too_big).is_err());
}
