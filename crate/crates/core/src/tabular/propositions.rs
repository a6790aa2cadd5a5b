//! Randomized brute-force checks of the planning operator's guarantees.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::operators::sup_distance;
use super::{
    bellman_expectation, exact_optimal, exact_values, fixed_point, planning_operator_with_argmax, TabularMdp,
    TabularPolicy, DEFAULT_TOL,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropositionConfig {
    pub trials: usize,
    pub seed: u64,
    pub max_states: usize,
    pub max_actions: usize,
    /// Planning horizon is `horizon_factor * n_states`.
    pub horizon_factor: usize,
    /// Random Q-table probes per trial for the pointwise checks.
    pub probes: usize,
    /// Slack for the monotonicity and contraction inequalities.
    pub operator_slack: f64,
    /// Slack for checks that compare iterated fixed points.
    pub fixed_point_slack: f64,
    /// Test hook: replace the operator with `T Q - 2 gamma Q`, which is not
    /// monotone.
    pub inject_violation: bool,
}

impl Default for PropositionConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            seed: 0,
            max_states: 8,
            max_actions: 4,
            horizon_factor: 4,
            probes: 4,
            operator_slack: 1e-12,
            fixed_point_slack: 1e-8,
            inject_violation: false,
        }
    }
}

impl PropositionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("at least one trial is required"));
        }
        if self.max_states < 2 || self.max_actions < 2 {
            return Err(Error::invalid("random MDPs need at least two states and two actions"));
        }
        if self.probes == 0 {
            return Err(Error::invalid("at least one probe per trial is required"));
        }
        Ok(())
    }
}

/// One random problem: an MDP with target and behavior policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialInstance {
    pub mdp: TabularMdp,
    pub pi: TabularPolicy,
    pub mu: TabularPolicy,
}

impl TrialInstance {
    pub fn random<R: Rng + ?Sized>(max_states: usize, max_actions: usize, rng: &mut R) -> Result<Self> {
        let ns = rng.random_range(2..=max_states);
        let na = rng.random_range(2..=max_actions);
        let gamma = if rng.random_bool(0.5) { 0.9 } else { 0.99 };
        Ok(Self {
            mdp: TabularMdp::random(ns, na, gamma, rng)?,
            pi: TabularPolicy::random(ns, na, rng),
            mu: TabularPolicy::random(ns, na, rng),
        })
    }

    fn horizon(&self, cfg: &PropositionConfig) -> usize {
        cfg.horizon_factor * self.mdp.n_states
    }

    /// The operator under test, with its maximizing `n` per entry.
    fn apply(&self, q: ArrayView2<f64>, cfg: &PropositionConfig) -> Result<(Array2<f64>, Array2<usize>)> {
        let (mut out, arg) = planning_operator_with_argmax(&self.mdp, q, &self.pi, &self.mu, self.horizon(cfg))?;
        if cfg.inject_violation {
            out.scaled_add(-2.0 * self.mdp.gamma, &q);
        }
        Ok((out, arg))
    }

    /// Sup-norm scale of attainable values, used to size random probes.
    fn value_scale(&self) -> f64 {
        1.0 / (1.0 - self.mdp.gamma)
    }

    fn pessimistic_init(&self) -> Array2<f64> {
        let r_min = self.mdp.rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        Array2::from_elem((self.mdp.n_states, self.mdp.n_actions), r_min * self.value_scale())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Monotonicity,
    Contraction,
    Sandwich,
    OptimisticBound,
}

impl Check {
    pub const ALL: [Check; 4] = [
        Check::Monotonicity,
        Check::Contraction,
        Check::Sandwich,
        Check::OptimisticBound,
    ];
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Check::Monotonicity => "monotonicity",
            Check::Contraction => "contraction",
            Check::Sandwich => "sandwich",
            Check::OptimisticBound => "optimistic_bound",
        })
    }
}

/// One CSV row. `max_violation` is the largest amount by which the
/// inequality failed, zero when it held everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub trial: usize,
    pub seed: u64,
    pub check: Check,
    pub max_violation: f64,
    pub passed: bool,
    /// JSON of the offending instance, empty for passing rows.
    pub instance: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropositionReport {
    pub trials: usize,
    pub rows: Vec<CheckRow>,
    /// Largest observed `||TQ1 - TQ2|| / (gamma ||Q1 - Q2||)`.
    pub max_modulus_ratio: f64,
}

impl PropositionReport {
    pub fn violations(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    pub fn passed(&self) -> bool {
        self.violations().next().is_none()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut counts: BTreeMap<Check, (usize, f64)> = BTreeMap::new();
        for row in &self.rows {
            let entry = counts.entry(row.check).or_insert((0, 0.0));
            entry.0 += usize::from(!row.passed);
            entry.1 = entry.1.max(row.max_violation);
        }
        let mut text = format!("{} random MDPs\n", self.trials);
        for (check, (failures, worst)) in counts {
            text += &format!("{check:<18} {failures:>4} violations  worst {worst:.3e}\n");
        }
        text += &format!(
            "largest contraction modulus / gamma: {:.6}\n{}\n",
            self.max_modulus_ratio,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        text
    }
}

struct Excess(f64);

impl Excess {
    fn new() -> Self {
        Excess(f64::NEG_INFINITY)
    }

    /// Records `lhs <= rhs` as the excess `lhs - rhs`.
    fn le(&mut self, lhs: f64, rhs: f64) {
        let e = lhs - rhs;
        self.0 = if e.is_nan() { f64::INFINITY } else { self.0.max(e) };
    }
}

fn run_trial(trial: usize, cfg: &PropositionConfig) -> (Vec<CheckRow>, f64) {
    let seed = derive_seed(cfg.seed, trial as u64);
    let mut rng = seeded(seed);
    let inst = match TrialInstance::random(cfg.max_states, cfg.max_actions, &mut rng) {
        Ok(inst) => inst,
        Err(_) => unreachable!("random instances are valid by construction"),
    };
    let mut results: Vec<(Check, Result<f64>)> = Vec::new();
    let mut ratio = 0.0f64;
    let scale = inst.value_scale();
    let (ns, na) = (inst.mdp.n_states, inst.mdp.n_actions);
    let probes: Vec<Array2<f64>> = (0..cfg.probes)
        .map(|_| Array2::from_shape_fn((ns, na), |_| rng.random_range(-scale..scale)))
        .collect();

    let mono = (|| {
        let mut ex = Excess::new();
        for q1 in &probes {
            let bump = Array2::from_shape_fn((ns, na), |_| {
                if rng.random_bool(0.5) {
                    rng.random_range(0.0..scale)
                } else {
                    0.0
                }
            });
            let q2 = q1 + &bump;
            let (t1, _) = inst.apply(q1.view(), cfg)?;
            let (t2, _) = inst.apply(q2.view(), cfg)?;
            Zip::from(&t1).and(&t2).for_each(|&a, &b| ex.le(a, b));
        }
        Ok(ex.0)
    })();
    results.push((Check::Monotonicity, mono));

    let contraction = (|| {
        let mut ex = Excess::new();
        for pair in probes.windows(2).chain(std::iter::once(&probes[..1])) {
            let q1 = &pair[0];
            let q2 = pair.get(1).cloned().unwrap_or_else(|| q1.mapv(|x| x * 0.5));
            let (t1, _) = inst.apply(q1.view(), cfg)?;
            let (t2, _) = inst.apply(q2.view(), cfg)?;
            let (lhs, dist) = (sup_distance(&t1, &t2), sup_distance(q1, &q2));
            ex.le(lhs, inst.mdp.gamma * dist);
            if dist > 0.0 {
                ratio = ratio.max(lhs / (inst.mdp.gamma * dist));
            }
        }
        Ok(ex.0)
    })();
    results.push((Check::Contraction, contraction));

    let q_star = exact_optimal(&inst.mdp).map(|(q, _)| q);
    let sandwich = (|| {
        let q_star = q_star.as_ref().map_err(|e| Error::invalid(e.to_string()))?;
        let q_pi = exact_values(&inst.mdp, &inst.pi)?;
        let tilde = fixed_point(
            inst.pessimistic_init(),
            |q| Ok(inst.apply(q.view(), cfg)?.0),
            1e-12,
            200_000,
        )?;
        let mut ex = Excess::new();
        Zip::from(&q_pi)
            .and(&tilde.value)
            .and(q_star)
            .for_each(|&lo, &mid, &hi| {
                ex.le(lo, mid);
                ex.le(mid, hi);
            });
        Ok(ex.0)
    })();
    results.push((Check::Sandwich, sandwich));

    let bound = (|| {
        let q_star = q_star.as_ref().map_err(|e| Error::invalid(e.to_string()))?;
        let mut ex = Excess::new();
        let mut cache: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
        let mut pessimistic = probes.clone();
        pessimistic.push(inst.pessimistic_init());
        for q in &pessimistic {
            let (tq, arg) = inst.apply(q.view(), cfg)?;
            for ((s, a), &n) in arg.indexed_iter() {
                if let Entry::Vacant(slot) = cache.entry(n) {
                    let composite = |x: &Array2<f64>| -> Result<Array2<f64>> {
                        let mut y = bellman_expectation(&inst.mdp, x.view(), &inst.pi)?;
                        for _ in 0..n {
                            y = bellman_expectation(&inst.mdp, y.view(), &inst.mu)?;
                        }
                        Ok(y)
                    };
                    slot.insert(fixed_point(q.clone(), composite, 1e-12, 200_000)?.value);
                }
                let tilde_n = &cache[&n];
                let rhs = inst.mdp.gamma.powi(n as i32) * sup_distance(q, tilde_n) + sup_distance(tilde_n, q_star);
                ex.le((tq[[s, a]] - q_star[[s, a]]).abs(), rhs);
            }
        }
        Ok(ex.0)
    })();
    results.push((Check::OptimisticBound, bound));

    let rows = results
        .into_iter()
        .map(|(check, outcome)| {
            let slack = match check {
                Check::Monotonicity | Check::Contraction => cfg.operator_slack,
                Check::Sandwich | Check::OptimisticBound => cfg.fixed_point_slack,
            };
            // A failed computation (for example a diverging fixed point)
            // counts as an unbounded violation.
            let excess = outcome.unwrap_or(f64::INFINITY);
            let passed = excess <= slack;
            CheckRow {
                trial,
                seed,
                check,
                max_violation: excess.max(0.0),
                passed,
                instance: if passed {
                    String::new()
                } else {
                    serde_json::to_string(&inst).unwrap_or_default()
                },
            }
        })
        .collect();
    (rows, ratio)
}

/// Runs every check on `cfg.trials` random instances in parallel. Violations
/// are report rows, not errors.
pub fn check_propositions(cfg: &PropositionConfig) -> Result<PropositionReport> {
    cfg.validate()?;
    let per_trial: Vec<(Vec<CheckRow>, f64)> = (0..cfg.trials).into_par_iter().map(|t| run_trial(t, cfg)).collect();
    let max_modulus_ratio = per_trial.iter().map(|(_, r)| *r).fold(0.0, f64::max);
    let rows = per_trial.into_iter().flat_map(|(rows, _)| rows).collect();
    Ok(PropositionReport {
        trials: cfg.trials,
        rows,
        max_modulus_ratio,
    })
}

/// Fixed-point iteration counts of the planning operator and of `T^pi` from
/// the same pessimistic start.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionRace {
    pub planning_iterations: Vec<usize>,
    pub expectation_iterations: Vec<usize>,
}

impl ContractionRace {
    /// Fraction of trials where planning needed no more iterations.
    pub fn fraction_not_slower(&self) -> f64 {
        let wins = self
            .planning_iterations
            .iter()
            .zip(&self.expectation_iterations)
            .filter(|(p, e)| p <= e)
            .count();
        wins as f64 / self.planning_iterations.len() as f64
    }
}

pub fn contraction_race(cfg: &PropositionConfig) -> Result<ContractionRace> {
    cfg.validate()?;
    let counts: Vec<(usize, usize)> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = seeded(derive_seed(cfg.seed, trial as u64));
            let inst = TrialInstance::random(cfg.max_states, cfg.max_actions, &mut rng)?;
            let init = inst.pessimistic_init();
            let planning = fixed_point(init.clone(), |q| Ok(inst.apply(q.view(), cfg)?.0), DEFAULT_TOL, 200_000)?;
            let expectation = fixed_point(
                init,
                |q| bellman_expectation(&inst.mdp, q.view(), &inst.pi),
                DEFAULT_TOL,
                200_000,
            )?;
            Ok((planning.iterations, expectation.iterations))
        })
        .collect::<Result<_>>()?;
    let (planning_iterations, expectation_iterations) = counts.into_iter().unzip();
    Ok(ContractionRace {
        planning_iterations,
        expectation_iterations,
    })
}
