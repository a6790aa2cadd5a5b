//! Critic training by implicit in-sample planning.
//!
//! Targets start as discounted Monte Carlo returns. Each iteration fits a
//! fresh critic to the current targets, estimates the state value of every
//! record from behavior candidates, and rebuilds the targets with the
//! backward recursion
//!
//! ```text
//! R_n = r_n                              at the last step of an episode
//! R_n = r_n + gamma max(R_{n+1}, V_{n+1}) otherwise
//! ```
//!
//! Only dataset actions are ever bootstrapped through, so the critic is never
//! asked about actions outside the data.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Transitions;
use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::{mse_loss, Activation, AdamConfig, AdamState, Mlp, MlpParams, MlpSpec, Standardizer};
use crate::policy::{softmax_value, ActionScorer, BehaviorSampler};

/// Affine map applied to targets before regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub std: f64,
}

impl TargetStats {
    pub const IDENTITY: TargetStats = TargetStats { mean: 0.0, std: 1.0 };

    pub fn normalize(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.std
    }

    pub fn denormalize(&self, normalized: f64) -> f64 {
        self.std * normalized + self.mean
    }
}

/// Zero mean, unit population variance. Constant targets are passed through
/// unchanged with identity stats.
pub fn normalize_targets(targets: &[f64]) -> Result<(Vec<f64>, TargetStats)> {
    if targets.len() < 2 {
        return Err(Error::invalid("need at least two targets to normalize"));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("planning targets".into()));
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        warn!("targets are constant ({mean}); skipping normalization");
        return Ok((targets.to_vec(), TargetStats::IDENTITY));
    }
    let stats = TargetStats { mean, std: var.sqrt() };
    Ok((targets.iter().map(|&t| stats.normalize(t)).collect(), stats))
}

/// Discounted return-to-go within each episode.
pub fn vanilla_returns(data: &Transitions, gamma: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; data.len()];
    for ep in data.episodes()? {
        let mut acc = 0.0;
        for n in ep.rev() {
            acc = data.rewards[n] + gamma * acc;
            out[n] = acc;
        }
    }
    Ok(out)
}

/// Backward planning recursion; `values[n]` is the value estimate of the
/// state stored in record `n`.
pub fn plan_targets(data: &Transitions, values: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if values.len() != data.len() {
        return Err(Error::shape("state values", data.len(), values.len()));
    }
    let mut out = vec![0.0; data.len()];
    for ep in data.episodes()? {
        let last = ep.end - 1;
        out[last] = data.rewards[last];
        for n in (ep.start..last).rev() {
            out[n] = data.rewards[n] + gamma * out[n + 1].max(values[n + 1]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            activation: Activation::SiLU,
            epochs: 20,
            batch_size: 512,
            lr: 1e-3,
        }
    }
}

/// `Q(s, a)` regressor trained on normalized targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub net: Mlp,
    pub stats: TargetStats,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Applied to the concatenated `(s, a)` input.
    pub input_norm: Standardizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticMeta {
    pub state_dim: usize,
    pub action_dim: usize,
    pub stats: TargetStats,
    pub input_norm: Standardizer,
    pub mlp: MlpSpec,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &CriticConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![state_dim + action_dim];
        widths.extend(&config.hidden);
        widths.push(1);
        let spec = MlpSpec::new(widths, config.activation, Activation::Identity)?;
        Ok(Self {
            net: Mlp::init(spec, rng)?,
            stats: TargetStats::IDENTITY,
            state_dim,
            action_dim,
            input_norm: Standardizer::identity(state_dim + action_dim),
        })
    }

    fn input(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        if states.nrows() != actions.nrows() {
            return Err(Error::shape("critic batch", states.nrows(), actions.nrows()));
        }
        if states.ncols() != self.state_dim || actions.ncols() != self.action_dim {
            return Err(Error::shape(
                "critic input",
                format!("{} + {}", self.state_dim, self.action_dim),
                format!("{} + {}", states.ncols(), actions.ncols()),
            ));
        }
        let joined = concatenate(Axis(1), &[states, actions]).map_err(|e| Error::invalid(e.to_string()))?;
        self.input_norm.apply(joined.view())
    }

    /// Outputs on the normalized training scale.
    pub fn predict_normalized(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        let x = self.input(states, actions)?;
        Ok(self.net.forward_batch(x.view())?.into_raw_vec_and_offset().0)
    }

    /// Outputs mapped back to the scale of the returns.
    pub fn predict(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        let mut q = self.predict_normalized(states, actions)?;
        q.iter_mut().for_each(|v| *v = self.stats.denormalize(*v));
        Ok(q)
    }

    pub fn meta(&self) -> CriticMeta {
        CriticMeta {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            stats: self.stats,
            input_norm: self.input_norm.clone(),
            mlp: self.net.spec.clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        checkpoint::write_arrays(dir.join(format!("{stem}.bin")), &self.net.params.to_named("critic"))?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.meta())?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: CriticMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let arrays = checkpoint::read_arrays(dir.join(format!("{stem}.bin")))?;
        let params = MlpParams::from_named(&meta.mlp, "critic", &arrays)?;
        Ok(Self {
            net: Mlp::new(meta.mlp, params)?,
            stats: meta.stats,
            state_dim: meta.state_dim,
            action_dim: meta.action_dim,
            input_norm: meta.input_norm,
        })
    }
}

/// Candidates are ranked on the normalized scale, so the inverse temperature
/// does not depend on the reward scale.
impl ActionScorer for Critic {
    fn score(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.predict_normalized(states, actions)
    }
}

/// Fresh critic regressed onto already-normalized `targets` with `stats`
/// attached. Returns the critic and the mean loss of every epoch.
pub fn fit_critic(
    data: &Transitions,
    targets: &[f64],
    stats: TargetStats,
    config: &CriticConfig,
    rng: &mut dyn RngCore,
) -> Result<(Critic, Vec<f64>)> {
    if targets.len() != data.len() {
        return Err(Error::shape("critic targets", data.len(), targets.len()));
    }
    if data.is_empty() || config.batch_size == 0 {
        return Err(Error::invalid("critic fit needs records and a positive batch size"));
    }
    let mut critic = Critic::new(data.state_dim(), data.action_dim(), config, rng)?;
    critic.stats = stats;
    let raw =
        concatenate(Axis(1), &[data.states.view(), data.actions.view()]).map_err(|e| Error::invalid(e.to_string()))?;
    critic.input_norm = Standardizer::fit(raw.view())?;
    let inputs = critic.input_norm.apply(raw.view())?;
    let mut adam = AdamState::new(&critic.net.params, AdamConfig::default());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch_targets = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let x = inputs.select(Axis(0), chunk);
            batch_targets.clear();
            batch_targets.extend(chunk.iter().map(|&i| targets[i]));
            let (loss, grads) = critic.net.gradients(x.view(), mse_loss(&batch_targets))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("critic loss at epoch {epoch}")));
            }
            adam.update(&mut critic.net.params, &grads, config.lr)?;
            sum += loss;
            batches += 1;
        }
        history.push(sum / batches as f64);
    }
    Ok((critic, history))
}

/// Softmax-weighted value of every state row, on the raw return scale.
///
/// States are processed in shards of `batch` rows; shard `i` draws its
/// behavior candidates from RNG stream `(seed, i)`, so results do not depend
/// on how rayon schedules the shards.
#[allow(clippy::too_many_arguments)]
pub fn estimate_state_values(
    states: ArrayView2<f64>,
    behavior: &dyn BehaviorSampler,
    critic: &Critic,
    alpha: f64,
    mc_samples: usize,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if mc_samples == 0 || batch == 0 {
        return Err(Error::invalid(
            "value estimation needs samples and a positive batch size",
        ));
    }
    let n = states.nrows();
    let shards: Vec<usize> = (0..n.div_ceil(batch)).collect();
    let values: Vec<Vec<f64>> = shards
        .par_iter()
        .map(|&i| {
            let rows = states.slice(s![i * batch..((i + 1) * batch).min(n), ..]);
            let mut rng = crate::rng::stream(seed, i as u64);
            let actions = behavior.sample_candidates(rows, mc_samples, steps, &mut rng)?;
            let repeated = crate::diffusion::repeat_rows(rows, mc_samples);
            let q = critic.predict_normalized(repeated.view(), actions.view())?;
            q.chunks(mc_samples)
                .map(|qs| softmax_value(qs, alpha).map(|v| critic.stats.denormalize(v)))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(values.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanningConfig {
    /// Discount. 0.95 keeps the gap between near and far endpoints of the
    /// car task well above critic noise.
    pub gamma: f64,
    /// Inverse temperature of the value estimate.
    pub alpha: f64,
    pub mc_samples: usize,
    /// Number of critic fits; 1 trains on plain returns only.
    pub iterations: usize,
    /// ODE steps for the value-estimate candidates.
    pub diffusion_steps: usize,
    pub value_batch: usize,
    pub critic: CriticConfig,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            alpha: 20.0,
            mc_samples: 16,
            iterations: 3,
            diffusion_steps: 15,
            value_batch: 512,
            critic: CriticConfig::default(),
        }
    }
}

impl PlanningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("discount {} outside (0, 1]", self.gamma)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("inverse temperature must be non-negative"));
        }
        if self.mc_samples == 0 || self.iterations == 0 {
            return Err(Error::invalid("need at least one value sample and one iteration"));
        }
        if !(self.critic.lr > 0.0) {
            return Err(Error::invalid("critic learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PlanningOutcome {
    pub critic: Critic,
    /// `R^(0) ..= R^(K)`, raw scale.
    pub targets: Vec<Vec<f64>>,
    /// Per-iteration critic loss curves.
    pub losses: Vec<Vec<f64>>,
}

/// The full iterative loop: `iterations` critic fits interleaved with value
/// estimation and target planning.
pub fn train_evaluation_loop(
    data: &Transitions,
    behavior: &dyn BehaviorSampler,
    config: &PlanningConfig,
    seed: u64,
) -> Result<PlanningOutcome> {
    config.validate()?;
    let mut targets = vec![vanilla_returns(data, config.gamma)?];
    let mut losses = Vec::with_capacity(config.iterations);
    let mut critic = None;
    for k in 1..=config.iterations {
        let current = targets.last().expect("starts with returns");
        let (normalized, stats) = normalize_targets(current)?;
        let mut rng = crate::rng::stream(seed, 2 * k as u64);
        let (fitted, history) = fit_critic(data, &normalized, stats, &config.critic, &mut rng)?;
        info!(
            "iteration {k}: critic loss {:.5} -> {:.5}",
            history.first().copied().unwrap_or(f64::NAN),
            history.last().copied().unwrap_or(f64::NAN)
        );
        let values = estimate_state_values(
            data.states.view(),
            behavior,
            &fitted,
            config.alpha,
            config.mc_samples,
            config.diffusion_steps,
            config.value_batch,
            crate::rng::stream(seed, 2 * k as u64 + 1).random(),
        )?;
        targets.push(plan_targets(data, &values, config.gamma)?);
        losses.push(history);
        critic = Some(fitted);
    }
    Ok(PlanningOutcome {
        critic: critic.expect("at least one iteration"),
        targets,
        losses,
    })
}

/// Long-format CSV with header `iteration,record,target`.
pub fn write_target_history(path: impl AsRef<Path>, history: &[Vec<f64>]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "iteration,record,target")?;
    for (k, targets) in history.iter().enumerate() {
        for (n, t) in targets.iter().enumerate() {
            writeln!(out, "{k},{n},{t}")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_target_history(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "iteration,record,target")) => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "expected header iteration,record,target".into(),
            })
        }
    }
    let mut history: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines {
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let k: usize = fields[0].parse().map_err(|e| parse_err(format!("iteration: {e}")))?;
        let n: usize = fields[1].parse().map_err(|e| parse_err(format!("record: {e}")))?;
        let t: f64 = fields[2].parse().map_err(|e| parse_err(format!("target: {e}")))?;
        if k == history.len() {
            history.push(Vec::new());
        }
        if k + 1 != history.len() || n != history[k].len() {
            return Err(parse_err("rows must be ordered by iteration then record".into()));
        }
        history[k].push(t);
    }
    Ok(history)
}
