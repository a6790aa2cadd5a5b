//! Finite MDPs with exact operators, used to check the planning operator's
//! theory by brute force.
//!
//! Q-tables are `(n_states, n_actions)` arrays and V-tables have length
//! `n_states`. Transitions into a terminal state bootstrap zero.

mod exact;
mod operators;
mod propositions;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use exact::{exact_optimal, exact_state_values, exact_values};
pub use operators::{
    bellman_expectation, bellman_optimality, emaq_target, fixed_point, planning_operator,
    planning_operator_with_argmax, vem_operator, FixedPoint, DEFAULT_TOL,
};
pub use propositions::{
    check_propositions, contraction_race, Check, CheckRow, ContractionRace, PropositionConfig, PropositionReport,
    TrialInstance,
};

const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major `P[s][a][s']`.
    pub transitions: Vec<f64>,
    /// Row-major `r[s][a]`.
    pub rewards: Vec<f64>,
    pub gamma: f64,
    pub terminal: Vec<bool>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 || a == 0 {
            return Err(Error::invalid("an MDP needs at least one state and one action"));
        }
        if self.transitions.len() != s * a * s {
            return Err(Error::shape("transition tensor", s * a * s, self.transitions.len()));
        }
        if self.rewards.len() != s * a {
            return Err(Error::shape("reward table", s * a, self.rewards.len()));
        }
        if self.terminal.len() != s {
            return Err(Error::shape("terminal mask", s, self.terminal.len()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("discount {} outside [0, 1]", self.gamma)));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("MDP rewards".into()));
        }
        for (k, row) in self.transitions.chunks(s).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > SUM_TOL {
                return Err(Error::invalid(format!(
                    "transition row for state {}, action {} is not a distribution",
                    k / a,
                    k % a
                )));
            }
        }
        Ok(())
    }

    /// Dirichlet(1) transition rows, U(0, 1) rewards, no terminal states.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            transitions.extend(dirichlet_ones(n_states, rng));
        }
        let rewards = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
        Self::new(n_states, n_actions, transitions, rewards, gamma, vec![false; n_states])
    }

    /// Each state-action pair moves to one uniformly chosen successor.
    pub fn random_deterministic<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut transitions = vec![0.0; n_states * n_actions * n_states];
        for row in transitions.chunks_mut(n_states) {
            row[rng.random_range(0..n_states)] = 1.0;
        }
        let rewards = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
        Self::new(n_states, n_actions, transitions, rewards, gamma, vec![false; n_states])
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn reward_table(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.n_states, self.n_actions), self.rewards.clone()).expect("validated")
    }

    /// Successor of a Dirac transition row.
    pub fn successor(&self, s: usize, a: usize) -> Result<usize> {
        let row = &self.transitions[(s * self.n_actions + a) * self.n_states..][..self.n_states];
        match row.iter().position(|&p| (p - 1.0).abs() <= SUM_TOL) {
            Some(next) if row.iter().enumerate().all(|(j, &p)| j == next || p == 0.0) => Ok(next),
            _ => Err(Error::StochasticTransitions { state: s, action: a }),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        (0..self.n_states).all(|s| (0..self.n_actions).all(|a| self.successor(s, a).is_ok()))
    }

    /// `r(s, a) + gamma * sum_s' P(s'|s, a) v(s')`, with terminal successors
    /// contributing zero.
    pub fn backup(&self, v: ArrayView1<f64>) -> Array2<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut out = self.reward_table();
        for s in 0..ns {
            for a in 0..na {
                let row = &self.transitions[(s * na + a) * ns..][..ns];
                let mut acc = 0.0;
                for (next, &p) in row.iter().enumerate() {
                    if !self.terminal[next] {
                        acc += p * v[next];
                    }
                }
                out[[s, a]] += self.gamma * acc;
            }
        }
        out
    }

    pub(crate) fn check_q(&self, q: ArrayView2<f64>) -> Result<()> {
        if q.dim() != (self.n_states, self.n_actions) {
            return Err(Error::shape(
                "Q-table",
                format!("({}, {})", self.n_states, self.n_actions),
                format!("{:?}", q.dim()),
            ));
        }
        Ok(())
    }
}

/// Row-stochastic action distribution per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (s, row) in probs.outer_iter().enumerate() {
            let total: f64 = row.sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > SUM_TOL {
                return Err(Error::invalid(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut probs = Array2::zeros((n_states, n_actions));
        for mut row in probs.outer_iter_mut() {
            row.assign(&Array1::from(dirichlet_ones(n_actions, rng)));
        }
        Self { probs }
    }

    /// Deterministic argmax of `q`; ties go to the lowest action index.
    pub fn greedy(q: ArrayView2<f64>) -> Self {
        let mut probs = Array2::zeros(q.raw_dim());
        for (s, row) in q.outer_iter().enumerate() {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (a, &v)| if v > row[best] { a } else { best });
            probs[[s, best]] = 1.0;
        }
        Self { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    /// `sum_a pi(a|s) q(s, a)` per state.
    pub fn expect(&self, q: ArrayView2<f64>) -> Array1<f64> {
        (&self.probs * &q).sum_axis(ndarray::Axis(1))
    }

    pub(crate) fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if self.probs.dim() != (mdp.n_states, mdp.n_actions) {
            return Err(Error::shape(
                "policy table",
                format!("({}, {})", mdp.n_states, mdp.n_actions),
                format!("{:?}", self.probs.dim()),
            ));
        }
        Ok(())
    }
}

/// Dirichlet(1, ..., 1) via normalized unit exponentials.
fn dirichlet_ones<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let mut out: Vec<f64> = draws.iter().map(|d| d / total).collect();
    // Absorb rounding so rows sum to one as tightly as possible.
    let drift: f64 = 1.0 - out.iter().sum::<f64>();
    out[k - 1] += drift;
    out
}
