//! Selecting from behavior candidates.
//!
//! A policy step draws `M` actions from the behavior model and then either
//! resamples one of them with weights `softmax(alpha Q)` (training-time,
//! stochastic) or returns the mean of the `k` best by Q (evaluation).

use ndarray::{Array2, ArrayView2, Axis};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source of behavior actions.
pub trait BehaviorSampler: Sync {
    fn action_dim(&self) -> usize;

    /// `per_state` actions for each row of `states`, state-major: rows
    /// `i * per_state .. (i + 1) * per_state` belong to state `i`.
    fn sample_candidates(
        &self,
        states: ArrayView2<f64>,
        per_state: usize,
        steps: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>>;
}

/// Anything that scores state-action pairs, one value per row.
pub trait ActionScorer: Sync {
    fn score(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub candidates: usize,
    pub alpha: f64,
    pub top_k: usize,
    pub diffusion_steps: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            candidates: 32,
            alpha: 20.0,
            top_k: 1,
            diffusion_steps: 30,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::invalid("candidate count must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.candidates {
            return Err(Error::invalid(format!(
                "top-k must lie in [1, {}], got {}",
                self.candidates, self.top_k
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("inverse temperature must be non-negative"));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::invalid("diffusion steps must be at least 1"));
        }
        Ok(())
    }
}

/// `softmax(alpha q)`, shifted by the maximum so large `alpha q` cannot overflow.
pub fn importance_weights(q: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if q.is_empty() {
        return Err(Error::invalid("no candidate values to weight"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "inverse temperature {alpha} must be finite and >= 0"
        )));
    }
    if let Some(bad) = q.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("candidate value {bad}")));
    }
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = q.iter().map(|&v| (alpha * (v - max)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// Self-normalized `sum_m w_m q_m` with `w = softmax(alpha q)`.
pub fn softmax_value(q: &[f64], alpha: f64) -> Result<f64> {
    let w = importance_weights(q, alpha)?;
    Ok(w.iter().zip(q).map(|(w, q)| w * q).sum())
}

/// Index drawn with probability `importance_weights(q, alpha)`.
pub fn resample_index(q: &[f64], alpha: f64, rng: &mut dyn RngCore) -> Result<usize> {
    let w = importance_weights(q, alpha)?;
    let dist = WeightedIndex::new(&w).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Indices of the `k` largest scores, best first; ties keep the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Stable sort on descending score leaves equal scores in index order.
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k);
    idx
}

/// Element-wise mean of the `k` highest-scoring candidate rows.
pub fn top_k_mean(candidates: ArrayView2<f64>, scores: &[f64], k: usize) -> Result<Vec<f64>> {
    if scores.len() != candidates.nrows() {
        return Err(Error::shape("candidate scores", candidates.nrows(), scores.len()));
    }
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!("top-k {k} outside [1, {}]", scores.len())));
    }
    let picked = top_k_indices(scores, k);
    let rows = candidates.select(Axis(0), &picked);
    Ok(rows.mean_axis(Axis(0)).expect("k >= 1").to_vec())
}

fn candidates_and_scores(
    state: &[f64],
    behavior: &dyn BehaviorSampler,
    critic: &dyn ActionScorer,
    config: &PolicyConfig,
    rng: &mut dyn RngCore,
) -> Result<(Array2<f64>, Vec<f64>)> {
    config.validate()?;
    let state_row = ArrayView2::from_shape((1, state.len()), state).map_err(|e| Error::invalid(e.to_string()))?;
    let candidates = behavior.sample_candidates(state_row, config.candidates, config.diffusion_steps, rng)?;
    let states = state_row
        .broadcast((candidates.nrows(), state.len()))
        .expect("single row broadcasts");
    let scores = critic.score(states, candidates.view())?;
    if scores.len() != candidates.nrows() {
        return Err(Error::shape("critic output", candidates.nrows(), scores.len()));
    }
    Ok((candidates, scores))
}

/// Training-time selection: one candidate resampled by `softmax(alpha Q)`.
pub fn select_action_stochastic(
    state: &[f64],
    behavior: &dyn BehaviorSampler,
    critic: &dyn ActionScorer,
    config: &PolicyConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let (candidates, scores) = candidates_and_scores(state, behavior, critic, config, rng)?;
    let i = resample_index(&scores, config.alpha, rng)?;
    Ok(candidates.row(i).to_vec())
}

/// Evaluation-time selection: the mean of the `top_k` candidates by Q.
pub fn select_action_eval(
    state: &[f64],
    behavior: &dyn BehaviorSampler,
    critic: &dyn ActionScorer,
    config: &PolicyConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let (candidates, scores) = candidates_and_scores(state, behavior, critic, config, rng)?;
    top_k_mean(candidates.view(), &scores, config.top_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn weights_examples() {
        assert_eq!(importance_weights(&[3.0, -1.0, 7.0, 0.5], 0.0).unwrap(), vec![0.25; 4]);
        assert_eq!(importance_weights(&[2.0; 3], 5.0).unwrap(), vec![1.0 / 3.0; 3]);
        let w = importance_weights(&[1.0, 0.0], 3f64.ln()).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert!(importance_weights(&[f64::NAN], 1.0).is_err());
        assert!(importance_weights(&[], 1.0).is_err());
        assert!(importance_weights(&[1.0], -1.0).is_err());
    }

    #[test]
    fn weights_survive_huge_alpha() {
        let w = importance_weights(&[1000.0, 999.0, -1000.0], 1e6).unwrap();
        assert_eq!(w, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_value_examples() {
        assert!((softmax_value(&[1.0, 0.0], 3f64.ln()).unwrap() - 0.75).abs() < 1e-15);
        assert!((softmax_value(&[4.0; 5], 20.0).unwrap() - 4.0).abs() < 1e-15);
        assert!((softmax_value(&[1.0, 2.0, 6.0], 0.0).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn top_k_examples() {
        let cands = array![[-1.0], [0.0], [1.0]];
        assert_eq!(top_k_mean(cands.view(), &[3.0, 1.0, 2.0], 2).unwrap(), vec![0.0]);
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.5], 1), vec![1]);
        assert_eq!(top_k_mean(cands.view(), &[5.0, 5.0, 5.0], 3).unwrap(), vec![0.0]);
        // Ties: lowest index wins.
        assert_eq!(top_k_indices(&[2.0, 7.0, 7.0, 1.0], 1), vec![1]);
        assert!(top_k_mean(cands.view(), &[1.0, 2.0, 3.0], 0).is_err());
        assert!(top_k_mean(cands.view(), &[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PolicyConfig::default().validate().is_ok());
        let bad_k = PolicyConfig {
            top_k: 33,
            ..Default::default()
        };
        assert!(bad_k.validate().is_err());
        let no_cands = PolicyConfig {
            candidates: 0,
            ..Default::default()
        };
        assert!(no_cands.validate().is_err());
    }
}
