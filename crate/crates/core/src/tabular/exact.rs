use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

use super::{TabularMdp, TabularPolicy};
use crate::error::{Error, Result};

/// `Q^pi` from the linear system `(I - gamma P_pi) q = r`.
pub fn exact_values(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Array2<f64>> {
    pi.check(mdp)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let dim = ns * na;
    let mut system = DMatrix::<f64>::identity(dim, dim);
    for s in 0..ns {
        for a in 0..na {
            let row = s * na + a;
            for next in (0..ns).filter(|&n| !mdp.terminal[n]) {
                let p = mdp.prob(s, a, next);
                if p == 0.0 {
                    continue;
                }
                for b in 0..na {
                    system[(row, next * na + b)] -= mdp.gamma * p * pi.probs[[next, b]];
                }
            }
        }
    }
    let rhs = DVector::from_column_slice(&mdp.rewards);
    let q = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::invalid("policy evaluation system is singular"))?;
    Ok(Array2::from_shape_vec((ns, na), q.as_slice().to_vec()).expect("sized"))
}

/// `V^pi(s) = sum_a pi(a|s) Q^pi(s, a)`.
pub fn exact_state_values(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Array1<f64>> {
    Ok(pi.expect(exact_values(mdp, pi)?.view()))
}

/// `Q*` and a greedy optimal policy, by policy iteration with exact
/// evaluation.
pub fn exact_optimal(mdp: &TabularMdp) -> Result<(Array2<f64>, TabularPolicy)> {
    let mut pi = TabularPolicy::greedy(mdp.reward_table().view());
    // Policy iteration terminates in at most |A|^|S| rounds; in practice a
    // handful.
    for _ in 0..10_000 {
        let q = exact_values(mdp, &pi)?;
        let mut changed = false;
        let mut next = pi.probs.clone();
        for s in 0..mdp.n_states {
            let current = pi.probs.row(s).iter().position(|&p| p == 1.0).expect("deterministic");
            let scale = 1.0 + q.row(s).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let (best, value) =
                q.row(s).iter().enumerate().fold(
                    (current, q[[s, current]]),
                    |acc, (a, &v)| if v > acc.1 { (a, v) } else { acc },
                );
            // Switch only on a clear improvement so round-off cannot cycle.
            if best != current && value > q[[s, current]] + 1e-12 * scale {
                next.row_mut(s).fill(0.0);
                next[[s, best]] = 1.0;
                changed = true;
            }
        }
        if !changed {
            return Ok((q, pi));
        }
        pi = TabularPolicy { probs: next };
    }
    Err(Error::NotConverged {
        iterations: 10_000,
        residual: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tabular::{bellman_expectation, bellman_optimality, fixed_point};
    use rand::Rng;

    #[test]
    fn absorbing_rewardless_state() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![0.0], 0.9, vec![false]).unwrap();
        let (q, _) = exact_optimal(&mdp).unwrap();
        assert_eq!(q, Array2::<f64>::zeros((1, 1)));
    }

    #[test]
    fn chain_solution() {
        let mdp = TabularMdp::new(
            3,
            1,
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
            0.5,
            vec![false, false, true],
        )
        .unwrap();
        let q = exact_values(&mdp, &TabularPolicy::uniform(3, 1)).unwrap();
        assert!((q[[0, 0]] - 0.5).abs() < 1e-15 && (q[[1, 0]] - 1.0).abs() < 1e-15);
        assert_eq!(exact_optimal(&mdp).unwrap().0, q);
    }

    #[test]
    fn linear_solve_matches_iteration() {
        let mut rng = seeded(11);
        for _ in 0..20 {
            let mdp = TabularMdp::random(rng.random_range(2..9), rng.random_range(1..5), 0.9, &mut rng).unwrap();
            let pi = TabularPolicy::random(mdp.n_states, mdp.n_actions, &mut rng);
            let exact = exact_values(&mdp, &pi).unwrap();
            let iter = fixed_point(
                Array2::zeros(exact.raw_dim()),
                |q| bellman_expectation(&mdp, q.view(), &pi),
                1e-12,
                100_000,
            )
            .unwrap();
            let gap = (&exact - &iter.value).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(gap < 1e-8, "gap {gap}");
        }
    }

    #[test]
    fn optimal_is_fixed_point_of_optimality_and_dominates() {
        let mut rng = seeded(12);
        for _ in 0..100 {
            let gamma = if rng.random() { 0.9 } else { 0.99 };
            let mdp = TabularMdp::random(rng.random_range(2..9), rng.random_range(1..5), gamma, &mut rng).unwrap();
            let (q_star, _) = exact_optimal(&mdp).unwrap();
            let residual = bellman_optimality(&mdp, q_star.view()).unwrap() - &q_star;
            assert!(residual.iter().all(|r| r.abs() < 1e-9));
            let pi = TabularPolicy::random(mdp.n_states, mdp.n_actions, &mut rng);
            let q_pi = exact_values(&mdp, &pi).unwrap();
            assert!(q_star.iter().zip(q_pi.iter()).all(|(a, b)| *a >= b - 1e-9));
        }
    }
}
