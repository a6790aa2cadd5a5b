//! Bidirectional-Car: a car on `[-1, 1]` rewarded for reaching either end.
//!
//! The throttle `a` in `[-1, 1]` sets the velocity directly, `v' = a v_max`,
//! and the position integrates it. Reaching `|x| >= 1` pays 1 and ends the
//! episode; otherwise the episode times out after [`T_MAX`] steps with nothing.
//! Going full speed in either direction is optimal, which makes the optimal
//! policy bimodal around the symmetric start.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::rng::stream;

pub const ENV_NAME: &str = "bidirectional-car";
pub const V_MAX: f64 = 0.05;
pub const T_MAX: usize = 60;
pub const RESET_HALF_WIDTH: f64 = 0.2;
/// Positions this close to an endpoint count as arrived, so accumulated
/// rounding in `x + v` cannot cost an arrival.
const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarState {
    pub x: f64,
    pub v: f64,
    /// Steps taken so far in the episode.
    pub t: usize,
}

impl CarState {
    pub fn observation(&self) -> [f64; 2] {
        [self.x, self.v]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: CarState,
    pub reward: f64,
    pub terminal: bool,
    pub timeout: bool,
}

pub fn car_reset<R: Rng + ?Sized>(rng: &mut R) -> CarState {
    CarState {
        x: rng.random_range(-RESET_HALF_WIDTH..=RESET_HALF_WIDTH),
        v: 0.0,
        t: 0,
    }
}

/// Advances one step. Actions outside `[-1, 1]` are clipped.
pub fn car_step(state: CarState, action: f64) -> Result<StepOutcome> {
    if !action.is_finite() {
        return Err(Error::NonFinite(format!("throttle {action}")));
    }
    let v = action.clamp(-1.0, 1.0) * V_MAX;
    let mut x = state.x + v;
    let t = state.t + 1;
    let terminal = x.abs() >= 1.0 - BOUNDARY_TOL;
    if terminal {
        x = x.signum();
    }
    Ok(StepOutcome {
        state: CarState { x, v, t },
        reward: if terminal { 1.0 } else { 0.0 },
        terminal,
        timeout: !terminal && t >= T_MAX,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    /// Trajectories heading to both ends in roughly equal numbers.
    Both,
    /// Trajectories that end at the left endpoint are dropped.
    Single,
}

impl fmt::Display for DatasetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetMode::Both => "both",
            DatasetMode::Single => "single",
        })
    }
}

impl FromStr for DatasetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(DatasetMode::Both),
            "single" => Ok(DatasetMode::Single),
            other => Err(Error::invalid(format!(
                "unknown dataset mode {other:?} (expected both|single)"
            ))),
        }
    }
}

/// Parameters of the data-collecting behavior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub throttle_min: f64,
    pub throttle_max: f64,
    pub throttle_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            throttle_min: 0.2,
            throttle_max: 1.0,
            throttle_noise: 0.15,
        }
    }
}

/// One behavior episode: a side and a throttle level fixed per trajectory,
/// with per-step jitter on the throttle magnitude.
pub fn rollout_behavior(config: &GeneratorConfig, rng: &mut dyn RngCore) -> Result<Trajectory> {
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let level = rng.random_range(config.throttle_min..=config.throttle_max);
    let jitter = Normal::new(0.0, config.throttle_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut state = car_reset(rng);
    let mut traj = Trajectory {
        observations: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        terminals: Vec::new(),
        timeouts: Vec::new(),
    };
    loop {
        let a = side * (level + jitter.sample(rng)).clamp(0.0, 1.0);
        let out = car_step(state, a)?;
        traj.observations.push(state.observation().to_vec());
        traj.actions.push(vec![a]);
        traj.rewards.push(out.reward);
        traj.terminals.push(out.terminal);
        traj.timeouts.push(out.timeout);
        state = out.state;
        if out.terminal || out.timeout {
            return Ok(traj);
        }
    }
}

fn ends_left(traj: &Trajectory) -> bool {
    *traj.terminals.last().unwrap_or(&false) && traj.actions.last().is_some_and(|a| a[0] < 0.0)
}

fn ends_right(traj: &Trajectory) -> bool {
    *traj.terminals.last().unwrap_or(&false) && traj.actions.last().is_some_and(|a| a[0] > 0.0)
}

/// Deterministic in `(mode, n_traj, seed)`. Trajectory `i` uses its own RNG
/// stream, so the data does not depend on thread scheduling.
pub fn generate_dataset(mode: DatasetMode, n_traj: usize, seed: u64) -> Result<Dataset> {
    generate_dataset_with(mode, n_traj, seed, &GeneratorConfig::default())
}

pub fn generate_dataset_with(mode: DatasetMode, n_traj: usize, seed: u64, config: &GeneratorConfig) -> Result<Dataset> {
    if n_traj < 2 {
        return Err(Error::invalid("need at least 2 trajectories"));
    }
    const MAX_ATTEMPTS: u64 = 64;
    for attempt in 0..MAX_ATTEMPTS {
        let trajectories: Vec<Trajectory> = (0..n_traj as u64)
            .into_par_iter()
            .map(|i| rollout_behavior(config, &mut stream(seed, (attempt << 32) | i)))
            .collect::<Result<_>>()?;
        let trajectories = match mode {
            DatasetMode::Both => {
                let has_both = trajectories.iter().any(ends_left) && trajectories.iter().any(ends_right);
                if !has_both {
                    continue;
                }
                trajectories
            }
            DatasetMode::Single => {
                let kept: Vec<_> = trajectories.into_iter().filter(|t| !ends_left(t)).collect();
                if kept.is_empty() {
                    continue;
                }
                kept
            }
        };
        return Dataset::new(ENV_NAME, &mode.to_string(), seed, trajectories);
    }
    Err(Error::invalid(format!(
        "no valid {mode} dataset of {n_traj} trajectories after {MAX_ATTEMPTS} attempts"
    )))
}

/// Counts of arrivals by side for a dataset.
pub fn arrival_counts(dataset: &Dataset) -> (usize, usize) {
    let left = dataset.trajectories.iter().filter(|t| ends_left(t)).count();
    let right = dataset.trajectories.iter().filter(|t| ends_right(t)).count();
    (left, right)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub final_x: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub left: usize,
    pub right: usize,
    /// `100 * successes / episodes`.
    pub score: f64,
    pub results: Vec<EpisodeResult>,
}

pub fn run_episode<F>(policy: &F, rng: &mut dyn RngCore) -> Result<EpisodeResult>
where
    F: Fn(&[f64], &mut dyn RngCore) -> Result<Vec<f64>> + ?Sized,
{
    let mut state = car_reset(rng);
    loop {
        let action = policy(&state.observation(), rng)?;
        let a = *action
            .first()
            .ok_or_else(|| Error::shape("policy action", 1, action.len()))?;
        let out = car_step(state, a)?;
        state = out.state;
        if out.terminal || out.timeout {
            return Ok(EpisodeResult {
                success: out.terminal,
                final_x: state.x,
                steps: state.t,
            });
        }
    }
}

/// Runs `n_episodes` in parallel, episode `i` on RNG stream `(seed, i)`.
pub fn evaluate_policy<F>(policy: F, n_episodes: usize, seed: u64) -> Result<EvalReport>
where
    F: Fn(&[f64], &mut dyn RngCore) -> Result<Vec<f64>> + Sync,
{
    if n_episodes == 0 {
        return Err(Error::invalid("need at least one evaluation episode"));
    }
    let results: Vec<Result<EpisodeResult>> = (0..n_episodes)
        .into_par_iter()
        .map(|i| run_episode(&policy, &mut stream(seed, i as u64)))
        .collect();
    let mut episodes = Vec::with_capacity(n_episodes);
    for (i, r) in results.into_iter().enumerate() {
        episodes.push(r.map_err(|e| Error::Episode {
            episode: i,
            source: Box::new(e),
        })?);
    }
    let successes = episodes.iter().filter(|e| e.success).count();
    let left = episodes.iter().filter(|e| e.success && e.final_x < 0.0).count();
    Ok(EvalReport {
        episodes: n_episodes,
        successes,
        left,
        right: successes - left,
        score: 100.0 * successes as f64 / n_episodes as f64,
        results: episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn at(x: f64) -> CarState {
        CarState { x, v: 0.0, t: 0 }
    }

    #[test]
    fn zero_throttle_stands_still() {
        let out = car_step(at(0.37), 0.0).unwrap();
        assert_eq!((out.state.x, out.state.v, out.reward), (0.37, 0.0, 0.0));
        assert!(!out.terminal && !out.timeout);
    }

    #[test]
    fn twenty_full_steps_reach_right_end() {
        let mut s = at(0.0);
        for i in 0..20 {
            let out = car_step(s, 1.0).unwrap();
            s = out.state;
            assert_eq!(out.terminal, i == 19, "step {i}");
            if out.terminal {
                assert_eq!(s.x, 1.0);
                assert_eq!(out.reward, 1.0);
            }
        }
    }

    #[test]
    fn overshoot_is_clipped_to_left_end() {
        let out = car_step(at(-0.96), -1.0).unwrap();
        assert_eq!(out.state.x, -1.0);
        assert!(out.terminal && out.reward == 1.0);
    }

    #[test]
    fn timeout_after_rated_time() {
        let mut s = at(0.0);
        for _ in 0..T_MAX - 1 {
            let out = car_step(s, 0.1).unwrap();
            assert!(!out.timeout && !out.terminal);
            s = out.state;
        }
        let out = car_step(s, 0.1).unwrap();
        assert!(out.timeout && !out.terminal && out.reward == 0.0);
    }

    #[test]
    fn throttle_is_clipped_and_checked() {
        assert_eq!(car_step(at(0.0), 3.0).unwrap().state.v, V_MAX);
        assert!(car_step(at(0.0), f64::NAN).is_err());
    }

    #[test]
    fn resets_stay_in_box() {
        let mut rng = seeded(3);
        for _ in 0..10_000 {
            let s = car_reset(&mut rng);
            assert!(s.x.abs() <= RESET_HALF_WIDTH && s.v == 0.0 && s.t == 0);
        }
        assert_eq!(car_reset(&mut seeded(5)), car_reset(&mut seeded(5)));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("both".parse::<DatasetMode>().unwrap(), DatasetMode::Both);
        assert_eq!(DatasetMode::Single.to_string(), "single");
        assert!("left".parse::<DatasetMode>().is_err());
    }

    #[test]
    fn evaluation_formula() {
        let always = evaluate_policy(|_, _| Ok(vec![1.0]), 20, 0).unwrap();
        assert_eq!((always.score, always.right, always.left), (100.0, 20, 0));
        let never = evaluate_policy(|_, _| Ok(vec![0.0]), 20, 0).unwrap();
        assert_eq!(never.score, 0.0);
        assert!(evaluate_policy(|_, _| Ok(vec![0.0]), 0, 0).is_err());
    }

    #[test]
    fn failing_policy_reports_episode() {
        let err = evaluate_policy(
            |obs, _| {
                if obs[0] > 0.0 {
                    Err(Error::invalid("boom"))
                } else {
                    Ok(vec![-1.0])
                }
            },
            8,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Episode { .. }));
    }
}
