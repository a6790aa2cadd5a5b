use proptest::prelude::*;
use rand::Rng;
use sfbc::data::{decode_dataset, encode_dataset, read_dataset, write_dataset, Dataset, Trajectory};
use sfbc::diffusion::{ScoreModel, ScoreModelConfig};
use sfbc::env::{
    arrival_counts, car_reset, car_step, evaluate_policy, generate_dataset, CarState, DatasetMode, RESET_HALF_WIDTH,
    T_MAX, V_MAX,
};
use sfbc::policy::BehaviorSampler;
use sfbc::rng::seeded;

fn steps_to_arrive(x0: f64, a: f64) -> Option<usize> {
    let mut s = CarState { x: x0, v: 0.0, t: 0 };
    loop {
        let out = car_step(s, a).unwrap();
        s = out.state;
        if out.terminal {
            return Some(s.t);
        }
        if out.timeout {
            return None;
        }
    }
}

/// Full throttle either way arrives from every start, well inside the time
/// limit, and never later than ceil((1 + |x0|) / v_max) steps.
#[test]
fn full_throttle_reaches_both_ends_from_a_grid() {
    for i in 0..=400 {
        let x0 = -RESET_HALF_WIDTH + 2.0 * RESET_HALF_WIDTH * i as f64 / 400.0;
        for a in [-1.0, 1.0] {
            let steps = steps_to_arrive(x0, a).unwrap_or_else(|| panic!("x0 {x0} a {a} timed out"));
            let bound = ((1.0 - a * x0) / V_MAX - 1e-9).ceil() as usize;
            assert_eq!(steps, bound, "x0 {x0} a {a}");
            assert!(steps <= 24);
        }
    }
    // Slow throttle from the far side runs out of time.
    assert_eq!(steps_to_arrive(0.2, -0.3), None);
}

#[test]
fn reset_is_centred_and_bounded() {
    let mut rng = seeded(0);
    let n = 100_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let s = car_reset(&mut rng);
        assert!(s.x.abs() <= RESET_HALF_WIDTH && s.v == 0.0 && s.t == 0);
        sum += s.x;
        sq += s.x * s.x;
    }
    let mean = sum / n as f64;
    // U(-w, w) has variance w^2 / 3.
    let se = (RESET_HALF_WIDTH * RESET_HALF_WIDTH / 3.0 / n as f64).sqrt();
    assert!(mean.abs() < 4.0 * se, "mean {mean}");
    let var = sq / n as f64 - mean * mean;
    assert!((var - RESET_HALF_WIDTH.powi(2) / 3.0).abs() < 2e-4);
}

proptest! {
    /// Starts are at least one full step from either end, so no arrival
    /// clips the move.
    #[test]
    fn speed_is_monotone_in_throttle_and_direction_is_its_sign(
        x in -0.94f64..0.94,
        a1 in -1.5f64..1.5,
        a2 in -1.5f64..1.5,
    ) {
        let s = CarState { x, v: 0.0, t: 0 };
        let d1 = (car_step(s, a1).unwrap().state.x - x).abs();
        let d2 = (car_step(s, a2).unwrap().state.x - x).abs();
        // Saturated throttles give equal speeds up to rounding in x + v - x.
        if a2.abs() > a1.abs() {
            prop_assert!(d2 >= d1 - 1e-15);
        }
        let moved = car_step(s, a1).unwrap().state.x - x;
        if a1 != 0.0 {
            prop_assert_eq!(moved.signum(), a1.signum());
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = seeded(seed);
        let trajectories: Vec<Trajectory> = (0..n)
            .map(|_| {
                let len = rng.random_range(1..8);
                let mut t = Trajectory {
                    observations: (0..len).map(|_| vec![rng.random_range(-1.0..1.0), rng.random::<f64>() * 1e-3]).collect(),
                    actions: (0..len).map(|_| vec![rng.random_range(-1.0..1.0)]).collect(),
                    rewards: (0..len).map(|_| rng.random::<f64>()).collect(),
                    terminals: vec![false; len],
                    timeouts: vec![false; len],
                };
                *t.terminals.last_mut().unwrap() = true;
                t
            })
            .collect();
        let ds = Dataset::new("bidirectional-car", "both", seed, trajectories).unwrap();
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        prop_assert_eq!(&back, &ds);
        for (a, b) in back.trajectories.iter().zip(&ds.trajectories) {
            for (ra, rb) in a.observations.iter().flatten().zip(b.observations.iter().flatten()) {
                prop_assert_eq!(ra.to_bits(), rb.to_bits());
            }
        }
    }
}

#[test]
fn generated_datasets_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(DatasetMode::Both, 60, 9).unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&ds, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);
    assert_eq!(generate_dataset(DatasetMode::Both, 60, 9).unwrap(), ds);
    assert_ne!(generate_dataset(DatasetMode::Both, 60, 10).unwrap(), ds);
}

#[test]
fn dataset_sides_and_lengths() {
    let both = generate_dataset(DatasetMode::Both, 1000, 0).unwrap();
    let (left, right) = arrival_counts(&both);
    let share = left as f64 / (left + right) as f64;
    assert!((share - 0.5).abs() <= 0.05, "left share {share}");
    for t in &both.trajectories {
        assert!(t.len() <= T_MAX);
    }
    let single = generate_dataset(DatasetMode::Single, 300, 0).unwrap();
    assert_eq!(arrival_counts(&single).0, 0);
}

/// An untrained behavior model acts about as well as uniform random
/// throttle, far from the trained policy's near-perfect score.
#[test]
fn untrained_behavior_is_near_random_baseline() {
    let random = evaluate_policy(|_, rng| Ok(vec![rng.random_range(-1.0..=1.0)]), 200, 7).unwrap();
    for seed in 0..3 {
        let model = ScoreModel::new(2, 1, &ScoreModelConfig::default(), &mut seeded(seed)).unwrap();
        let report = evaluate_policy(
            |s, rng| {
                let row = ndarray::ArrayView2::from_shape((1, 2), s).unwrap();
                Ok(model.sample_candidates(row, 1, 30, rng)?.row(0).to_vec())
            },
            200,
            7,
        )
        .unwrap();
        assert!(
            (report.score - random.score).abs() <= 10.0,
            "untrained {} vs random {}",
            report.score,
            random.score
        );
    }
}
