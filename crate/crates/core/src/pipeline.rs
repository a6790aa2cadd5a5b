//! End-to-end runs: behavior model, planning critic, evaluation.
//!
//! A run directory holds
//!
//! ```text
//! config.json              the effective RunConfig
//! behavior.bin/.json       behavior checkpoint (diffusion or gaussian)
//! critic.bin/.json         critic checkpoint (absent for behavior-only runs)
//! targets.csv              planning targets, iteration,record,target
//! metrics.csv              phase,iteration,name,value,seed
//! INCOMPLETE               present while training runs or after it failed
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array2, ArrayView2};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{read_dataset, Dataset};
use crate::diffusion::{
    train_behavior, train_gaussian, BehaviorTrainConfig, GaussianBehavior, GaussianConfig, ScoreModel, ScoreModelConfig,
};
use crate::env::{evaluate_policy, generate_dataset, DatasetMode, EvalReport};
use crate::error::{Error, Result};
use crate::planning::{train_evaluation_loop, write_target_history, Critic, PlanningConfig};
use crate::policy::{select_action_eval, BehaviorSampler, PolicyConfig};
use crate::rng::derive_seed;

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
const BEHAVIOR_STEM: &str = "behavior";
const CRITIC_STEM: &str = "critic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorKind {
    Diffusion,
    Gaussian,
}

/// Everything a run depends on besides the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: DatasetMode,
    pub n_trajectories: usize,
    /// Read this dataset instead of generating one.
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    pub eval_seed: u64,
    pub eval_episodes: usize,
    pub behavior: BehaviorKind,
    pub behavior_only: bool,
    pub behavior_train: BehaviorTrainConfig,
    pub score_model: ScoreModelConfig,
    pub gaussian: GaussianConfig,
    pub planning: PlanningConfig,
    pub policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: DatasetMode::Both,
            n_trajectories: 1000,
            dataset: None,
            seed: 0,
            eval_seed: 1_000_003,
            eval_episodes: 100,
            behavior: BehaviorKind::Diffusion,
            behavior_only: false,
            behavior_train: BehaviorTrainConfig::default(),
            score_model: ScoreModelConfig::default(),
            gaussian: GaussianConfig::default(),
            planning: PlanningConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sets the ODE step count for both action selection and value estimates.
    pub fn set_diffusion_steps(&mut self, steps: usize) {
        self.policy.diffusion_steps = steps;
        self.planning.diffusion_steps = steps;
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.behavior_train.lr > 0.0) {
            return Err(Error::invalid("behavior learning rate must be positive"));
        }
        if self.behavior_train.batch_size == 0 {
            return Err(Error::invalid("behavior batch size must be positive"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::invalid("need at least one evaluation episode"));
        }
        if self.n_trajectories < 2 && self.dataset.is_none() {
            return Err(Error::invalid("need at least 2 trajectories"));
        }
        self.planning.validate()?;
        self.policy.validate()
    }

    pub fn behavior_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    pub fn planning_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    /// The configured dataset file, or a freshly generated dataset.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            Some(path) => read_dataset(path),
            None => generate_dataset(self.mode, self.n_trajectories, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Behavior {
    Diffusion(ScoreModel),
    Gaussian(GaussianBehavior),
}

impl Behavior {
    pub fn kind(&self) -> BehaviorKind {
        match self {
            Behavior::Diffusion(_) => BehaviorKind::Diffusion,
            Behavior::Gaussian(_) => BehaviorKind::Gaussian,
        }
    }

    fn sampler(&self) -> &dyn BehaviorSampler {
        match self {
            Behavior::Diffusion(m) => m,
            Behavior::Gaussian(m) => m,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Behavior::Diffusion(m) => m.save(dir, BEHAVIOR_STEM),
            Behavior::Gaussian(m) => m.save(dir, BEHAVIOR_STEM),
        }
    }

    pub fn load(dir: &Path, kind: BehaviorKind) -> Result<Self> {
        Ok(match kind {
            BehaviorKind::Diffusion => Behavior::Diffusion(ScoreModel::load(dir, BEHAVIOR_STEM)?),
            BehaviorKind::Gaussian => Behavior::Gaussian(GaussianBehavior::load(dir, BEHAVIOR_STEM)?),
        })
    }
}

impl BehaviorSampler for Behavior {
    fn action_dim(&self) -> usize {
        self.sampler().action_dim()
    }

    fn sample_candidates(
        &self,
        states: ArrayView2<f64>,
        per_state: usize,
        steps: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>> {
        self.sampler().sample_candidates(states, per_state, steps, rng)
    }
}

/// A behavior model plus, unless the run was behavior-only, its critic.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub behavior: Behavior,
    pub critic: Option<Critic>,
}

impl Agent {
    /// Evaluation-time action: best-of-M by the critic, or a plain behavior
    /// sample when there is no critic.
    pub fn act(&self, state: &[f64], policy: &PolicyConfig, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        match &self.critic {
            Some(critic) => select_action_eval(state, &self.behavior, critic, policy, rng),
            None => {
                let row = ArrayView2::from_shape((1, state.len()), state).map_err(|e| Error::invalid(e.to_string()))?;
                let a = self.behavior.sample_candidates(row, 1, policy.diffusion_steps, rng)?;
                Ok(a.row(0).to_vec())
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.behavior.save(dir)?;
        if let Some(critic) = &self.critic {
            critic.save(dir, CRITIC_STEM)?;
        }
        Ok(())
    }

    /// Loads the checkpoints of a finished run. The critic is optional only
    /// when the run was behavior-only.
    pub fn load(dir: &Path, config: &RunConfig) -> Result<Self> {
        if dir.join(INCOMPLETE_MARKER).exists() {
            return Err(Error::Checkpoint(format!("{} holds an incomplete run", dir.display())));
        }
        let behavior = Behavior::load(dir, config.behavior)?;
        let critic = if config.behavior_only {
            None
        } else {
            Some(Critic::load(dir, CRITIC_STEM)?)
        };
        Ok(Self { behavior, critic })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: String,
    pub iteration: usize,
    pub name: String,
    pub value: f64,
    pub seed: u64,
}

/// Append-only metric log with CSV header `phase,iteration,name,value,seed`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str = "phase,iteration,name,value,seed";

impl Metrics {
    pub fn push(&mut self, phase: &str, iteration: usize, name: &str, value: f64, seed: u64) {
        self.rows.push(MetricsRow {
            phase: phase.to_owned(),
            iteration,
            name: name.to_owned(),
            value,
            seed,
        });
    }

    pub fn find(&self, phase: &str, name: &str) -> impl Iterator<Item = &MetricsRow> {
        let (phase, name) = (phase.to_owned(), name.to_owned());
        self.rows.iter().filter(move |r| r.phase == phase && r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            // `{}` on f64 prints the shortest string that round-trips.
            writeln!(out, "{},{},{},{},{}", r.phase, r.iteration, r.name, r.value, r.seed).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {METRICS_HEADER}"),
            });
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let err = |message: String| Error::Parse { line: i + 2, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", f.len())));
            }
            rows.push(MetricsRow {
                phase: f[0].to_owned(),
                iteration: f[1].parse().map_err(|e| err(format!("iteration: {e}")))?,
                name: f[2].to_owned(),
                value: f[3].parse().map_err(|e| err(format!("value: {e}")))?,
                seed: f[4].parse().map_err(|e| err(format!("seed: {e}")))?,
            });
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub agent: Agent,
    /// Planning targets `R^(0) ..= R^(K)`; empty for behavior-only runs.
    pub targets: Vec<Vec<f64>>,
    pub metrics: Metrics,
}

/// Trains the behavior model, then (unless behavior-only) the critic.
pub fn train_agent(config: &RunConfig, dataset: &Dataset) -> Result<TrainOutput> {
    train_agent_with(config, dataset, |_| Ok(()))
}

/// Like [`train_agent`], calling `checkpoint` once the behavior model exists.
fn train_agent_with(
    config: &RunConfig,
    dataset: &Dataset,
    mut checkpoint: impl FnMut(&Behavior) -> Result<()>,
) -> Result<TrainOutput> {
    config.validate()?;
    let data = dataset.transitions();
    let mut metrics = Metrics::default();
    let seed = config.seed;

    let (behavior, losses) = match config.behavior {
        BehaviorKind::Diffusion => {
            let (m, l) = train_behavior(
                &data,
                &config.score_model,
                &config.behavior_train,
                config.behavior_seed(),
            )?;
            (Behavior::Diffusion(m), l)
        }
        BehaviorKind::Gaussian => {
            let (m, l) = train_gaussian(&data, &config.gaussian, &config.behavior_train, config.behavior_seed())?;
            (Behavior::Gaussian(m), l)
        }
    };
    for (epoch, loss) in losses.iter().enumerate() {
        metrics.push("behavior", epoch, "loss", *loss, seed);
    }
    checkpoint(&behavior)?;
    info!("behavior model trained ({} epochs)", losses.len());

    if config.behavior_only {
        return Ok(TrainOutput {
            agent: Agent { behavior, critic: None },
            targets: Vec::new(),
            metrics,
        });
    }

    let outcome = train_evaluation_loop(&data, &behavior, &config.planning, config.planning_seed())?;
    for (k, history) in outcome.losses.iter().enumerate() {
        metrics.push(
            "critic",
            k + 1,
            "loss",
            history.last().copied().unwrap_or(f64::NAN),
            seed,
        );
    }
    for (k, targets) in outcome.targets.iter().enumerate() {
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        metrics.push("planning", k, "target_mean", mean, seed);
    }
    Ok(TrainOutput {
        agent: Agent {
            behavior,
            critic: Some(outcome.critic),
        },
        targets: outcome.targets,
        metrics,
    })
}

/// Training with artifacts on disk. The directory carries an `INCOMPLETE`
/// marker until every artifact has been written.
pub fn run_training(config: &RunConfig, dataset: &Dataset, out: &Path) -> Result<TrainOutput> {
    std::fs::create_dir_all(out)?;
    let marker = out.join(INCOMPLETE_MARKER);
    std::fs::write(&marker, "training started\n")?;
    std::fs::write(out.join("config.json"), config.to_json()?)?;
    let result = train_agent_with(config, dataset, |behavior| behavior.save(out)).and_then(|output| {
        output.agent.save(out)?;
        if !output.targets.is_empty() {
            write_target_history(out.join("targets.csv"), &output.targets)?;
        }
        output.metrics.write(out.join("metrics.csv"))?;
        Ok(output)
    });
    match result {
        Ok(output) => {
            std::fs::remove_file(&marker)?;
            Ok(output)
        }
        Err(e) => {
            std::fs::write(&marker, format!("training failed: {e}\n"))?;
            Err(e)
        }
    }
}

pub fn evaluate_agent(agent: &Agent, policy: &PolicyConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    policy.validate()?;
    evaluate_policy(|s, rng| agent.act(s, policy, rng), episodes, seed)
}

/// Evaluates a finished run directory and appends the result to its metrics.
pub fn run_eval(run_dir: &Path, config: &RunConfig) -> Result<EvalReport> {
    let agent = Agent::load(run_dir, config)?;
    let report = evaluate_agent(&agent, &config.policy, config.eval_episodes, config.eval_seed)?;
    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = if metrics_path.exists() {
        Metrics::read(&metrics_path)?
    } else {
        Metrics::default()
    };
    push_eval_metrics(&mut metrics, &report, config.eval_seed);
    metrics.write(&metrics_path)?;
    Ok(report)
}

pub fn push_eval_metrics(metrics: &mut Metrics, report: &EvalReport, seed: u64) {
    metrics.push("eval", 0, "score", report.score, seed);
    metrics.push("eval", 0, "successes", report.successes as f64, seed);
    metrics.push("eval", 0, "left", report.left as f64, seed);
    metrics.push("eval", 0, "right", report.right as f64, seed);
}

/// Dataset, training and evaluation in memory.
pub fn run_pipeline(config: &RunConfig) -> Result<(TrainOutput, EvalReport)> {
    let dataset = config.dataset()?;
    let mut output = train_agent(config, &dataset)?;
    let report = evaluate_agent(&output.agent, &config.policy, config.eval_episodes, config.eval_seed)?;
    push_eval_metrics(&mut output.metrics, &report, config.eval_seed);
    Ok((output, report))
}
