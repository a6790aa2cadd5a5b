use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use sfbc::rng::seeded;
use sfbc::tabular::{
    bellman_expectation, bellman_optimality, emaq_target, exact_optimal, exact_state_values, exact_values, fixed_point,
    planning_operator, vem_operator, TabularMdp, TabularPolicy, DEFAULT_TOL,
};

fn random_q<R: Rng>(mdp: &TabularMdp, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (1.0 - mdp.gamma);
    Array2::from_shape_simple_fn((mdp.n_states, mdp.n_actions), || rng.random_range(-bound..bound))
}

fn instance(seed: u64) -> (TabularMdp, TabularPolicy, TabularPolicy) {
    let mut rng = seeded(seed);
    let s = rng.random_range(2..=8);
    let a = rng.random_range(2..=4);
    let gamma = if rng.random_bool(0.5) { 0.9 } else { 0.99 };
    let mdp = TabularMdp::random(s, a, gamma, &mut rng).unwrap();
    let pi = TabularPolicy::random(s, a, &mut rng);
    let mu = TabularPolicy::random(s, a, &mut rng);
    (mdp, pi, mu)
}

fn planning_fixed_point(mdp: &TabularMdp, pi: &TabularPolicy, mu: &TabularPolicy) -> Array2<f64> {
    let horizon = 4 * mdp.n_states;
    let init = Array2::zeros((mdp.n_states, mdp.n_actions));
    fixed_point(
        init,
        |q| planning_operator(mdp, q.view(), pi, mu, horizon),
        1e-12,
        1_000_000,
    )
    .unwrap()
    .value
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emaq_with_one_sample_is_the_expectation_backup(seed in any::<u64>()) {
        let (mdp, _, mu) = instance(seed);
        let q = random_q(&mdp, &mut seeded(seed ^ 1));
        let emaq = emaq_target(&mdp, q.view(), &mu, 1).unwrap();
        let expect = bellman_expectation(&mdp, q.view(), &mu).unwrap();
        prop_assert!(max_abs_diff(&emaq, &expect) <= 1e-12);
    }

    /// Many samples from a full-support behavior approach the optimality
    /// backup. Mixing with the uniform policy keeps every action at
    /// probability >= 1 / (2 |A|), so the miss probability is below
    /// (1 - 1/8)^10000.
    #[test]
    fn emaq_with_many_samples_approaches_the_max(seed in any::<u64>()) {
        let (mdp, _, mu) = instance(seed);
        let uniform = TabularPolicy::uniform(mdp.n_states, mdp.n_actions);
        let mixed = TabularPolicy::new((&mu.probs + &uniform.probs) * 0.5).unwrap();
        let q = random_q(&mdp, &mut seeded(seed ^ 2));
        let emaq = emaq_target(&mdp, q.view(), &mixed, 10_000).unwrap();
        let best = bellman_optimality(&mdp, q.view()).unwrap();
        prop_assert!(max_abs_diff(&emaq, &best) <= 1e-3);
        // The sample max is never above the true max.
        for (e, b) in emaq.iter().zip(&best) {
            prop_assert!(*e <= b + 1e-12);
        }
    }

    #[test]
    fn emaq_is_monotone_in_sample_count(seed in any::<u64>(), n in 1usize..50) {
        let (mdp, _, mu) = instance(seed);
        let q = random_q(&mdp, &mut seeded(seed ^ 3));
        let fewer = emaq_target(&mdp, q.view(), &mu, n).unwrap();
        let more = emaq_target(&mdp, q.view(), &mu, n + 1).unwrap();
        for (a, b) in fewer.iter().zip(&more) {
            prop_assert!(*b >= a - 1e-12);
        }
    }

    #[test]
    fn single_action_emaq_ignores_sample_count(seed in any::<u64>(), n in 1usize..1000) {
        let mut rng = seeded(seed);
        let mdp = TabularMdp::random(rng.random_range(1..=6), 1, 0.9, &mut rng).unwrap();
        let mu = TabularPolicy::uniform(mdp.n_states, 1);
        let q = random_q(&mdp, &mut rng);
        let one = emaq_target(&mdp, q.view(), &mu, 1).unwrap();
        let many = emaq_target(&mdp, q.view(), &mu, n).unwrap();
        prop_assert!(max_abs_diff(&one, &many) <= 1e-12);
    }

    #[test]
    fn vem_at_half_is_policy_evaluation(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let s = rng.random_range(2..=8);
        let a = rng.random_range(1..=4);
        let gamma = if rng.random_bool(0.5) { 0.9 } else { 0.99 };
        let mdp = TabularMdp::random_deterministic(s, a, gamma, &mut rng).unwrap();
        let mu = TabularPolicy::random(s, a, &mut rng);
        let exact = exact_state_values(&mdp, &mu).unwrap();

        let fp = fixed_point(Array1::zeros(s), |v| vem_operator(&mdp, v.view(), &mu, 0.5), 1e-12, 1_000_000).unwrap();
        let err = fp.value.iter().zip(&exact).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-6, "fixed point off by {err}");

        // V^mu itself is left in place.
        let again = vem_operator(&mdp, exact.view(), &mu, 0.5).unwrap();
        let step = again.iter().zip(&exact).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(step <= 1e-10);
    }

    #[test]
    fn vem_is_monotone_in_expectile(seed in any::<u64>(), t1 in 0.0f64..0.99, dt in 0.0f64..0.5) {
        let t2 = (t1 + dt).min(0.999);
        let mut rng = seeded(seed);
        let s = rng.random_range(2..=8);
        let a = rng.random_range(1..=4);
        let mdp = TabularMdp::random_deterministic(s, a, 0.9, &mut rng).unwrap();
        let mu = TabularPolicy::random(s, a, &mut rng);
        let v = Array1::from_shape_simple_fn(s, || rng.random_range(-10.0..10.0));
        let low = vem_operator(&mdp, v.view(), &mu, t1).unwrap();
        let high = vem_operator(&mdp, v.view(), &mu, t2).unwrap();
        for (l, h) in low.iter().zip(&high) {
            prop_assert!(*h >= l - 1e-12);
        }
    }

    #[test]
    fn zero_horizon_planning_is_the_expectation_backup(seed in any::<u64>()) {
        let (mdp, pi, mu) = instance(seed);
        let q = random_q(&mdp, &mut seeded(seed ^ 4));
        let plan = planning_operator(&mdp, q.view(), &pi, &mu, 0).unwrap();
        let expect = bellman_expectation(&mdp, q.view(), &pi).unwrap();
        prop_assert_eq!(plan, expect);
    }

    /// With pi = mu and Q below Q^mu, planning never backs up less than one
    /// expectation step.
    #[test]
    fn planning_dominates_expectation_below_the_fixed_point(seed in any::<u64>()) {
        let (mdp, _, mu) = instance(seed);
        let q_mu = exact_values(&mdp, &mu).unwrap();
        let mut rng = seeded(seed ^ 5);
        let q = q_mu.mapv(|v| v - rng.random_range(0.0..1.0 / (1.0 - mdp.gamma)));
        let plan = planning_operator(&mdp, q.view(), &mu, &mu, 4 * mdp.n_states).unwrap();
        let expect = bellman_expectation(&mdp, q.view(), &mu).unwrap();
        for (p, e) in plan.iter().zip(&expect) {
            prop_assert!(*p >= *e);
        }
    }
}

#[test]
fn planning_fixed_point_is_optimal_for_the_greedy_policy() {
    for seed in 0..40 {
        let (mdp, _, mu) = instance(seed);
        let (q_star, greedy) = exact_optimal(&mdp).unwrap();
        let tilde = planning_fixed_point(&mdp, &greedy, &mu);
        let scale = 1.0 / (1.0 - mdp.gamma);
        assert!(max_abs_diff(&tilde, &q_star) <= 1e-8 * scale, "seed {seed}");
    }
}

#[test]
fn planning_fixed_point_dominates_behavior_values() {
    for seed in 100..140 {
        let (mdp, _, mu) = instance(seed);
        let q_mu = exact_values(&mdp, &mu).unwrap();
        let tilde = planning_fixed_point(&mdp, &mu, &mu);
        for (t, q) in tilde.iter().zip(&q_mu) {
            assert!(*t >= q - 1e-8, "seed {seed}");
        }
    }
}

#[test]
fn expectation_fixed_point_matches_linear_solve() {
    for seed in 200..240 {
        let (mdp, pi, _) = instance(seed);
        let exact = exact_values(&mdp, &pi).unwrap();
        let init = Array2::zeros((mdp.n_states, mdp.n_actions));
        let fp = fixed_point(init, |q| bellman_expectation(&mdp, q.view(), &pi), 1e-12, 1_000_000).unwrap();
        assert!(max_abs_diff(&fp.value, &exact) <= 1e-8, "seed {seed}");
        assert!(fp.residual < 1e-12);
    }
}

#[test]
fn optimal_values_dominate_every_policy() {
    for seed in 300..400 {
        let (mdp, pi, _) = instance(seed);
        let (q_star, _) = exact_optimal(&mdp).unwrap();
        let q_pi = exact_values(&mdp, &pi).unwrap();
        for (o, p) in q_star.iter().zip(&q_pi) {
            assert!(*o >= p - 1e-9, "seed {seed}");
        }
    }
}

#[test]
fn fixed_point_stops_at_the_default_tolerance() {
    let (mdp, pi, _) = instance(7);
    let init = Array2::zeros((mdp.n_states, mdp.n_actions));
    let fp = fixed_point(
        init,
        |q| bellman_expectation(&mdp, q.view(), &pi),
        DEFAULT_TOL,
        1_000_000,
    )
    .unwrap();
    assert!(fp.residual < DEFAULT_TOL);
    let err = fixed_point(
        Array2::zeros((mdp.n_states, mdp.n_actions)),
        |q| bellman_expectation(&mdp, q.view(), &pi),
        DEFAULT_TOL,
        3,
    );
    assert!(err.is_err());
}
