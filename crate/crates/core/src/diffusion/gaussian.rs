//! Unimodal baseline: a tanh-squashed diagonal Gaussian whose mean and
//! log standard deviation are produced by an MLP.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::score_model::{repeat_rows, BehaviorTrainConfig};
use crate::data::Transitions;
use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::{Activation, AdamConfig, AdamState, Mlp, MlpParams, MlpSpec, Standardizer};
use crate::policy::BehaviorSampler;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Dataset actions are pulled inside this bound before `atanh`.
pub const ACTION_CLIP: f64 = 1.0 - 1e-4;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::ReLU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMeta {
    pub state_dim: usize,
    pub action_dim: usize,
    pub state_norm: Standardizer,
    pub mlp: MlpSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBehavior {
    pub net: Mlp,
    pub state_dim: usize,
    pub action_dim: usize,
    pub state_norm: Standardizer,
}

/// Smooth map from an unconstrained output onto `[LOG_STD_MIN, LOG_STD_MAX]`,
/// with its derivative.
fn bounded_log_std(raw: f64) -> (f64, f64) {
    let th = raw.tanh();
    let half_range = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
    (LOG_STD_MIN + half_range * (th + 1.0), half_range * (1.0 - th * th))
}

impl GaussianBehavior {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &GaussianConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![state_dim];
        widths.extend(&config.hidden);
        widths.push(2 * action_dim);
        let spec = MlpSpec::new(widths, config.activation, Activation::Identity)?;
        Ok(Self {
            net: Mlp::init(spec, rng)?,
            state_dim,
            action_dim,
            state_norm: Standardizer::identity(state_dim),
        })
    }

    /// Pre-squash mean and log standard deviation for each state row.
    pub fn distribution(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.net.forward_batch(self.state_norm.apply(states)?.view())?;
        let d = self.action_dim;
        let mean = out.slice(s![.., ..d]).to_owned();
        let log_std = out.slice(s![.., d..]).mapv(|r| bounded_log_std(r).0);
        Ok((mean, log_std))
    }

    /// Mean negative log-likelihood of the (clipped) actions, with gradients.
    pub fn nll_and_gradients(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<(f64, MlpParams)> {
        if actions.ncols() != self.action_dim || actions.nrows() != states.nrows() {
            return Err(Error::shape(
                "gaussian batch",
                format!("({}, {})", states.nrows(), self.action_dim),
                format!("{:?}", actions.dim()),
            ));
        }
        let n = states.nrows() as f64;
        let d = self.action_dim;
        let inputs = self.state_norm.apply(states)?;
        self.net.gradients(inputs.view(), |out| {
            let mut grad = Array2::zeros(out.raw_dim());
            let mut total = 0.0;
            for (i, a_row) in actions.axis_iter(Axis(0)).enumerate() {
                for j in 0..d {
                    let a = a_row[j].clamp(-ACTION_CLIP, ACTION_CLIP);
                    let u = a.atanh();
                    let mean = out[[i, j]];
                    let (log_std, dlog) = bounded_log_std(out[[i, d + j]]);
                    let std = log_std.exp();
                    let z = (u - mean) / std;
                    total += 0.5 * z * z + log_std + HALF_LN_2PI + (1.0 - a * a).ln();
                    grad[[i, j]] = -z / std / n;
                    grad[[i, d + j]] = (1.0 - z * z) * dlog / n;
                }
            }
            Ok((total / n, grad))
        })
    }

    pub fn meta(&self) -> GaussianMeta {
        GaussianMeta {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            state_norm: self.state_norm.clone(),
            mlp: self.net.spec.clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        checkpoint::write_arrays(dir.join(format!("{stem}.bin")), &self.net.params.to_named("gaussian"))?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.meta())?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: GaussianMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let arrays = checkpoint::read_arrays(dir.join(format!("{stem}.bin")))?;
        let params = MlpParams::from_named(&meta.mlp, "gaussian", &arrays)?;
        Ok(Self {
            net: Mlp::new(meta.mlp, params)?,
            state_dim: meta.state_dim,
            action_dim: meta.action_dim,
            state_norm: meta.state_norm,
        })
    }
}

impl BehaviorSampler for GaussianBehavior {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// `tanh(mean + std xi)`; `steps` is ignored.
    fn sample_candidates(
        &self,
        states: ArrayView2<f64>,
        per_state: usize,
        _steps: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>> {
        if per_state == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let (mean, log_std) = self.distribution(states)?;
        let mean = repeat_rows(mean.view(), per_state);
        let log_std = repeat_rows(log_std.view(), per_state);
        let mut out = mean;
        out.zip_mut_with(&log_std, |m, &ls| {
            let xi: f64 = StandardNormal.sample(rng);
            *m = (*m + ls.exp() * xi).tanh();
        });
        Ok(out)
    }
}

/// Minibatch Adam on the negative log-likelihood.
pub fn train_gaussian(
    data: &Transitions,
    model_config: &GaussianConfig,
    config: &BehaviorTrainConfig,
    seed: u64,
) -> Result<(GaussianBehavior, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train a behavior model on an empty dataset"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = crate::rng::stream(seed, 0);
    let mut model = GaussianBehavior::new(data.state_dim(), data.action_dim(), model_config, &mut rng)?;
    model.state_norm = Standardizer::fit(data.states.view())?;
    let mut adam = AdamState::new(&model.net.params, AdamConfig::default());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let states = data.states.select(Axis(0), chunk);
            let actions = data.actions.select(Axis(0), chunk);
            let (loss, grads) = model.nll_and_gradients(states.view(), actions.view())?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("gaussian loss at epoch {epoch}")));
            }
            adam.update(&mut model.net.params, &grads, config.lr)?;
            sum += loss;
            batches += 1;
        }
        history.push(sum / batches as f64);
    }
    Ok((model, history))
}
