use esbm::biasnet::TargetSpec;
use esbm::buffer::ReplayBuffer;
use esbm::dynamics::{rollout_batch, DynamicsParams, Integrator, SystemState, Trajectory, ZeroControl};
use esbm::energy::{PotentialSpec, ToyPotential};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn paths(count: usize, seed: u64) -> Vec<Trajectory> {
    let p = DynamicsParams {
        mode: Integrator::Underdamped,
        gamma: 2.0,
        tau_start: 0.3,
        tau_end: 0.3,
        k_b: 1.0,
        masses: vec![1.0],
        dt: 0.01,
        steps: 4,
    };
    let init = vec![SystemState::at_rest(2, 2, vec![-1.0, 0.0, -1.0, 0.5]).unwrap(); count];
    let tgt = vec![TargetSpec::new(2, 2, vec![1.0, 0.0, 1.0, 0.5], 0.5).unwrap(); count];
    let seeds: Vec<u64> = (seed..seed + count as u64).collect();
    rollout_batch(&ZeroControl, &init, &tgt, &p, &PotentialSpec::Toy(ToyPotential::default()), &seeds).unwrap()
}

fn with_log_weight(mut t: Trajectory, l: f64) -> Trajectory {
    t.reward = l - t.log_p0 + t.log_pb;
    t
}

fn counts(buf: &ReplayBuffer, draws: usize, seed: u64) -> Vec<usize> {
    let first = buf.entries().next().unwrap().id;
    let mut c = vec![0; buf.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in buf.sample(draws, &mut rng).unwrap() {
        c[(e.id - first) as usize] += 1;
    }
    c
}

#[test]
fn equal_weights_sample_uniformly() {
    let mut buf = ReplayBuffer::new(10).unwrap();
    for t in paths(10, 0) {
        buf.push(with_log_weight(t, -4.0)).unwrap();
    }
    let n = 100_000;
    let c = counts(&buf, n, 1);
    let expect = n as f64 / 10.0;
    let chi2: f64 = c.iter().map(|&x| (x as f64 - expect).powi(2) / expect).sum();
    // 9 degrees of freedom, 0.999 quantile
    assert!(chi2 < 27.88, "chi2 = {chi2}");
    let sd = (n as f64 * 0.1 * 0.9).sqrt();
    assert!(c.iter().all(|&x| (x as f64 - expect).abs() < 3.0 * sd));
}

#[test]
fn two_entry_softmax_frequency() {
    let mut buf = ReplayBuffer::new(2).unwrap();
    let mut it = paths(2, 5).into_iter();
    buf.push(with_log_weight(it.next().unwrap(), 0.0)).unwrap();
    buf.push(with_log_weight(it.next().unwrap(), 3f64.ln())).unwrap();
    let c = counts(&buf, 100_000, 2);
    let freq = c[1] as f64 / 1e5;
    assert!((freq - 0.75).abs() < 0.01, "{freq}");
}

#[test]
fn sampling_is_seeded() {
    let mut buf = ReplayBuffer::new(8).unwrap();
    for t in paths(8, 9) {
        buf.push(t).unwrap();
    }
    assert_eq!(counts(&buf, 500, 3), counts(&buf, 500, 3));
}

#[test]
fn persistence_round_trip() {
    let mut buf = ReplayBuffer::new(3).unwrap();
    for t in paths(5, 20) {
        buf.push(t).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    buf.save(dir.path()).unwrap();
    let back = ReplayBuffer::load(dir.path()).unwrap();
    assert_eq!(back.capacity(), 3);
    assert!(buf.entries().eq(back.entries()));
    assert_eq!(counts(&buf, 100, 4), counts(&back, 100, 4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn buffer_invariants(capacity in 1usize..6, weights in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let base = paths(1, 0).remove(0);
        let mut buf = ReplayBuffer::new(capacity).unwrap();
        for (i, &l) in weights.iter().enumerate() {
            buf.push(with_log_weight(base.clone(), l)).unwrap();
            prop_assert!(buf.len() <= capacity);
            let ids: Vec<u64> = buf.entries().map(|e| e.id).collect();
            let lo = (i + 1).saturating_sub(capacity) as u64;
            prop_assert_eq!(ids, (lo..=i as u64).collect::<Vec<_>>());
            let total: f64 = buf.probabilities().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            prop_assert!(buf.sample(20, &mut rng).unwrap().iter().all(|e| e.id >= lo));
        }
    }
}
