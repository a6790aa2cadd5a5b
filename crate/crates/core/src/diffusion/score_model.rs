//! State-conditioned diffusion model of the behavior policy.
//!
//! The network predicts the noise `eps_hat(a_t, s, t)`; the score is
//! `s_theta = -eps_hat / sigma_t`. With that parameterization the denoising
//! objective `|sigma_t s_theta + eps|^2` becomes `|eps - eps_hat|^2` and the
//! probability-flow ODE of the VP-SDE reads
//!
//! ```text
//! da/dt = -1/2 beta(t) (a + s_theta) = -1/2 beta(t) (a - eps_hat / sigma_t)
//! ```
//!
//! which is integrated from `t = 1` down to `t_min` with Heun steps.

use std::path::Path;

use log::info;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::data::Transitions;
use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::{Activation, AdamConfig, AdamState, Mlp, MlpParams, MlpSpec, Standardizer};
use crate::policy::BehaviorSampler;

/// Anything that predicts the noise added to a perturbed action.
pub trait NoisePredictor {
    /// One row per example; `times[i]` is the diffusion time of row `i`.
    fn predict_noise(&self, noisy: ArrayView2<f64>, states: ArrayView2<f64>, times: &[f64]) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Number of Heun steps between `t = 1` and `t_min`.
    pub steps: usize,
    pub t_min: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { steps: 30, t_min: 1e-3 }
    }
}

/// Sinusoidal features of `t` at geometrically spaced frequencies in `[1, 64]`.
pub fn time_embedding(t: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    for k in 0..half {
        let freq = if half > 1 {
            (64f64.ln() * k as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out[k] = (freq * t).sin();
        out[half + k] = (freq * t).cos();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embed_dim: usize,
    pub schedule: NoiseSchedule,
    pub solver: SolverConfig,
}

impl Default for ScoreModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::SiLU,
            embed_dim: 16,
            schedule: NoiseSchedule::default(),
            solver: SolverConfig::default(),
        }
    }
}

/// Sidecar describing a saved score model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModelMeta {
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub schedule: NoiseSchedule,
    pub solver: SolverConfig,
    pub state_norm: Standardizer,
    pub mlp: MlpSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub net: Mlp,
    pub schedule: NoiseSchedule,
    pub solver: SolverConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    /// Applied to states before they enter the network.
    pub state_norm: Standardizer,
}

impl ScoreModel {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &ScoreModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.embed_dim < 2 || !config.embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("time embedding dimension must be even and >= 2"));
        }
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::invalid("state and action dims must be positive"));
        }
        let mut widths = vec![action_dim + state_dim + config.embed_dim];
        widths.extend(&config.hidden);
        widths.push(action_dim);
        let spec = MlpSpec::new(widths, config.activation, Activation::Identity)?;
        Ok(Self {
            net: Mlp::init(spec, rng)?,
            schedule: config.schedule,
            solver: config.solver,
            state_dim,
            action_dim,
            embed_dim: config.embed_dim,
            state_norm: Standardizer::identity(state_dim),
        })
    }

    fn network_input(&self, noisy: ArrayView2<f64>, states: ArrayView2<f64>, times: &[f64]) -> Result<Array2<f64>> {
        let n = noisy.nrows();
        if noisy.ncols() != self.action_dim {
            return Err(Error::shape("noisy action width", self.action_dim, noisy.ncols()));
        }
        if states.ncols() != self.state_dim {
            return Err(Error::shape("state width", self.state_dim, states.ncols()));
        }
        if states.nrows() != n || times.len() != n {
            return Err(Error::shape(
                "score model batch",
                n,
                format!("{} states / {} times", states.nrows(), times.len()),
            ));
        }
        let (ad, sd) = (self.action_dim, self.state_dim);
        let mut input = Array2::zeros((n, ad + sd + self.embed_dim));
        input.slice_mut(s![.., ..ad]).assign(&noisy);
        input.slice_mut(s![.., ad..ad + sd]).assign(&states);
        for mut row in input.slice_mut(s![.., ad..ad + sd]).axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.state_norm.mean[j]) / self.state_norm.scale[j];
            }
        }
        // The ODE solver queries whole batches at one time; embed each distinct
        // run of times once.
        let mut emb = vec![0.0; self.embed_dim];
        let mut last = f64::NAN;
        for (mut row, &t) in input.axis_iter_mut(Axis(0)).zip(times) {
            if t.to_bits() != last.to_bits() {
                time_embedding(t, &mut emb);
                last = t;
            }
            row.slice_mut(s![ad + sd..])
                .assign(&ndarray::ArrayView1::from(&emb[..]));
        }
        Ok(input)
    }

    /// Mean denoising loss and its parameter gradient for fixed draws of
    /// diffusion time and noise.
    pub fn loss_and_gradients(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        times: &[f64],
        noise: ArrayView2<f64>,
    ) -> Result<(f64, MlpParams)> {
        let noisy = perturb_batch(&self.schedule, actions, noise, times)?;
        let input = self.network_input(noisy.view(), states, times)?;
        let n = actions.nrows() as f64;
        self.net.gradients(input.view(), |out| {
            let mut grad = Array2::zeros(out.raw_dim());
            let mut total = 0.0;
            ndarray::Zip::from(&mut grad).and(out).and(noise).for_each(|g, &o, &e| {
                let r = o - e;
                total += r * r;
                *g = 2.0 * r / n;
            });
            Ok((total / n, grad))
        })
    }

    /// Probability-flow samples starting from the given `a_1` noise, one row
    /// per state row.
    pub fn sample_from_noise(
        &self,
        states: ArrayView2<f64>,
        initial: ArrayView2<f64>,
        steps: usize,
    ) -> Result<Array2<f64>> {
        let mut a = probability_flow(self, &self.schedule, states, initial, steps, self.solver.t_min)?;
        a.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        Ok(a)
    }

    /// `n` behavior samples for a single state.
    pub fn sample(&self, state: &[f64], n: usize, steps: usize, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        let states = ArrayView2::from_shape((1, state.len()), state).map_err(|e| Error::invalid(e.to_string()))?;
        self.sample_candidates(states, n, steps, rng)
    }

    pub fn meta(&self) -> ScoreModelMeta {
        ScoreModelMeta {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            embed_dim: self.embed_dim,
            schedule: self.schedule,
            solver: self.solver,
            state_norm: self.state_norm.clone(),
            mlp: self.net.spec.clone(),
        }
    }

    /// Writes `{stem}.bin` (parameters) and `{stem}.json` (sidecar).
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        checkpoint::write_arrays(dir.join(format!("{stem}.bin")), &self.net.params.to_named("score"))?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.meta())?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: ScoreModelMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let arrays = checkpoint::read_arrays(dir.join(format!("{stem}.bin")))?;
        let params = MlpParams::from_named(&meta.mlp, "score", &arrays)?;
        Ok(Self {
            net: Mlp::new(meta.mlp, params)?,
            schedule: meta.schedule,
            solver: meta.solver,
            state_dim: meta.state_dim,
            action_dim: meta.action_dim,
            embed_dim: meta.embed_dim,
            state_norm: meta.state_norm,
        })
    }
}

impl NoisePredictor for ScoreModel {
    fn predict_noise(&self, noisy: ArrayView2<f64>, states: ArrayView2<f64>, times: &[f64]) -> Result<Array2<f64>> {
        let input = self.network_input(noisy, states, times)?;
        self.net.forward_batch(input.view())
    }
}

impl BehaviorSampler for ScoreModel {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn sample_candidates(
        &self,
        states: ArrayView2<f64>,
        per_state: usize,
        steps: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>> {
        if per_state == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let repeated = repeat_rows(states, per_state);
        let initial = Array2::from_shape_simple_fn((repeated.nrows(), self.action_dim), || StandardNormal.sample(rng));
        self.sample_from_noise(repeated.view(), initial.view(), steps)
    }
}

/// Each row of `rows` repeated `times` times, consecutively.
pub(crate) fn repeat_rows(rows: ArrayView2<f64>, times: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.nrows() * times, rows.ncols()));
    for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
        for j in 0..times {
            out.row_mut(i * times + j).assign(&row);
        }
    }
    out
}

pub(crate) fn perturb_batch(
    schedule: &NoiseSchedule,
    actions: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    times: &[f64],
) -> Result<Array2<f64>> {
    if actions.dim() != noise.dim() || times.len() != actions.nrows() {
        return Err(Error::shape(
            "perturbation batch",
            format!("{:?}", actions.dim()),
            format!("{:?} noise / {} times", noise.dim(), times.len()),
        ));
    }
    let mut out = actions.to_owned();
    for ((mut row, noise_row), &t) in out.axis_iter_mut(Axis(0)).zip(noise.axis_iter(Axis(0))).zip(times) {
        let c = schedule.coeffs(t)?;
        row.zip_mut_with(&noise_row, |a, &e| *a = c.alpha * *a + c.sigma * e);
    }
    Ok(out)
}

/// Denoising objective `mean |sigma_t s(a_t, s, t) + eps|^2` for explicit draws,
/// written in noise-prediction form `mean |eps - eps_hat|^2`.
pub fn denoising_objective<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    times: &[f64],
    noise: ArrayView2<f64>,
) -> Result<f64> {
    if actions.nrows() == 0 {
        return Err(Error::invalid("denoising loss of an empty batch"));
    }
    let noisy = perturb_batch(schedule, actions, noise, times)?;
    let pred = predictor.predict_noise(noisy.view(), states, times)?;
    if pred.dim() != noise.dim() {
        return Err(Error::shape(
            "predicted noise",
            format!("{:?}", noise.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let total: f64 = pred.iter().zip(noise.iter()).map(|(p, e)| (p - e).powi(2)).sum();
    Ok(total / actions.nrows() as f64)
}

/// Denoising loss with `t ~ U(t_min, 1)` and `eps ~ N(0, I)` drawn per example.
pub fn denoising_loss<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    t_min: f64,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let n = actions.nrows();
    if n == 0 {
        return Err(Error::invalid("denoising loss of an empty batch"));
    }
    let (times, noise) = draw_times_and_noise(n, actions.ncols(), t_min, rng)?;
    denoising_objective(predictor, schedule, states, actions, &times, noise.view())
}

fn draw_times_and_noise(
    n: usize,
    action_dim: usize,
    t_min: f64,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, Array2<f64>)> {
    let time_dist = Uniform::new_inclusive(t_min, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let times: Vec<f64> = (0..n).map(|_| time_dist.sample(rng)).collect();
    let noise = Array2::from_shape_simple_fn((n, action_dim), || StandardNormal.sample(rng));
    Ok((times, noise))
}

/// Heun integration of the probability-flow ODE from `t = 1` to `t_end` on a
/// uniform time grid. No clipping is applied.
pub fn probability_flow<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    states: ArrayView2<f64>,
    initial: ArrayView2<f64>,
    steps: usize,
    t_end: f64,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::invalid("the ODE solver needs at least one step"));
    }
    if !(t_end > 0.0 && t_end < 1.0) {
        return Err(Error::invalid(format!(
            "integration end time {t_end} must lie in (0, 1)"
        )));
    }
    if states.nrows() != initial.nrows() {
        return Err(Error::shape("ODE batch", initial.nrows(), states.nrows()));
    }
    let n = initial.nrows();
    let drift = |x: &Array2<f64>, t: f64| -> Result<Array2<f64>> {
        let c = schedule.coeffs_unchecked(t);
        let times = vec![t; n];
        let eps = predictor.predict_noise(x.view(), states, &times)?;
        let mut d = x.clone();
        d.zip_mut_with(&eps, |xv, &e| *xv = -0.5 * c.beta * (*xv - e / c.sigma));
        Ok(d)
    };

    let mut x = initial.to_owned();
    let h = (t_end - 1.0) / steps as f64;
    for i in 0..steps {
        let t0 = 1.0 + h * i as f64;
        let t1 = if i + 1 == steps {
            t_end
        } else {
            1.0 + h * (i + 1) as f64
        };
        let d0 = drift(&x, t0)?;
        let mut predicted = x.clone();
        predicted.scaled_add(t1 - t0, &d0);
        let d1 = drift(&predicted, t1)?;
        x.scaled_add(0.5 * (t1 - t0), &d0);
        x.scaled_add(0.5 * (t1 - t0), &d1);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("ODE state at t = {t1}")));
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BehaviorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 512,
            lr: 1e-3,
        }
    }
}

/// Minibatch Adam on the denoising loss. Returns the mean training loss of
/// every epoch.
pub fn train_score_model(
    model: &mut ScoreModel,
    data: &Transitions,
    config: &BehaviorTrainConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train a behavior model on an empty dataset"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut adam = AdamState::new(&model.net.params, AdamConfig::default());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let states = data.states.select(Axis(0), chunk);
            let actions = data.actions.select(Axis(0), chunk);
            let (times, noise) = draw_times_and_noise(chunk.len(), model.action_dim, model.solver.t_min, rng)?;
            let (loss, grads) = model.loss_and_gradients(states.view(), actions.view(), &times, noise.view())?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("behavior loss at epoch {epoch}")));
            }
            adam.update(&mut model.net.params, &grads, config.lr)?;
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        history.push(mean);
        if epoch % 20 == 0 || epoch + 1 == config.epochs {
            info!("behavior epoch {epoch}: denoising loss {mean:.5}");
        }
    }
    Ok(history)
}

/// Fresh score model trained on `data`; initialization and minibatches are
/// all drawn from `seed`.
pub fn train_behavior(
    data: &Transitions,
    model_config: &ScoreModelConfig,
    config: &BehaviorTrainConfig,
    seed: u64,
) -> Result<(ScoreModel, Vec<f64>)> {
    let mut rng = crate::rng::stream(seed, 0);
    let mut model = ScoreModel::new(data.state_dim(), data.action_dim(), model_config, &mut rng)?;
    model.state_norm = Standardizer::fit(data.states.view())?;
    let history = train_score_model(&mut model, data, config, &mut rng)?;
    Ok((model, history))
}
