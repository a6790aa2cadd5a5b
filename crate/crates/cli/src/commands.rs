use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use sfbc::data::write_dataset;
use sfbc::env::{arrival_counts, generate_dataset, DatasetMode, EvalReport};
use sfbc::pipeline::{run_eval, run_training, Agent, BehaviorKind, RunConfig};
use sfbc::planning::read_target_history;
use sfbc::plot::{action_map, target_evolution_svg, target_summary_csv, ActionMap, GridSpec};
use sfbc::tabular::{check_propositions, contraction_race, PropositionConfig};

/// Share of random MDPs on which the planning operator must converge no
/// slower than the Bellman expectation operator.
const CONTRACTION_PASS_FRACTION: f64 = 0.9;

#[derive(Debug, Parser)]
#[command(
    name = "sfbc",
    version,
    about = "Selecting-from-behavior-candidates offline RL laboratory"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a Bidirectional-Car dataset as JSON lines.
    GenData(GenDataArgs),
    /// Train the behavior model and the planning critic.
    Train(TrainArgs),
    /// Evaluate a trained run directory.
    Eval(EvalArgs),
    /// Check the planning operator's properties on random tabular MDPs.
    OperatorLab(LabArgs),
    /// Render action maps and target histories.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "both")]
    pub mode: DatasetMode,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(2..))]
    pub n_traj: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Ablation {
    /// Unimodal Gaussian behavior model instead of diffusion.
    Gaussian,
    /// A single critic fit on plain returns.
    NoPlanning,
}

/// Overrides shared by `train` and `eval`.
#[derive(Debug, Args)]
pub struct PolicyFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
}

impl PolicyFlags {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(alpha) = self.alpha {
            config.planning.alpha = alpha;
            config.policy.alpha = alpha;
        }
        if let Some(m) = self.candidates {
            config.policy.candidates = m;
        }
        if let Some(d) = self.diffusion_steps {
            config.set_diffusion_steps(d);
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for checkpoints and metrics.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<DatasetMode>,
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub n_traj: Option<usize>,
    #[arg(long)]
    pub k_iters: Option<usize>,
    #[arg(long, value_enum)]
    pub ablation: Option<Ablation>,
    /// Skip the critic phase.
    #[arg(long)]
    pub behavior_only: bool,
    #[command(flatten)]
    pub policy: PolicyFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Configuration to use instead of the run's own `config.json`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Also write the full report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyFlags,
}

#[derive(Debug, Args)]
pub struct LabArgs {
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Planning horizon as a multiple of the state count.
    #[arg(long, default_value_t = 4)]
    pub horizon_factor: usize,
    #[arg(long, hide = true)]
    pub inject_violation: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Run directory: draws its action map and, if present, its targets.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Redraw an action map from its CSV table.
    #[arg(long)]
    pub action_csv: Option<PathBuf>,
    /// Draw a target history CSV (iteration,record,target).
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 39)]
    pub nx: usize,
    #[arg(long, default_value_t = 21)]
    pub nv: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(sfbc::Error),
    Violation(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Violation(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Runtime(e) => write!(f, "{e}"),
            Failure::Violation(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<sfbc::Error> for Failure {
    fn from(e: sfbc::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::OperatorLab(a) => operator_lab(a),
        Command::Plot(a) => plot(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
        None => Ok(RunConfig::default()),
    }
}

fn checked(config: RunConfig) -> Result<RunConfig, Failure> {
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let dataset = generate_dataset(a.mode, a.n_traj as usize, a.seed)?;
    write_dataset(&dataset, &a.out)?;
    let (left, right) = arrival_counts(&dataset);
    println!(
        "wrote {} trajectories ({} records, {left} left / {right} right arrivals) to {}",
        dataset.trajectories.len(),
        dataset.num_records(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(mode) = a.mode {
        config.mode = mode;
    }
    if let Some(path) = a.dataset {
        config.dataset = Some(path);
    }
    if let Some(n) = a.n_traj {
        config.n_trajectories = n;
    }
    if let Some(k) = a.k_iters {
        config.planning.iterations = k;
    }
    match a.ablation {
        Some(Ablation::Gaussian) => config.behavior = BehaviorKind::Gaussian,
        Some(Ablation::NoPlanning) => config.planning.iterations = 1,
        None => {}
    }
    config.behavior_only |= a.behavior_only;
    a.policy.apply(&mut config);
    let config = checked(config)?;
    let dataset = config.dataset()?;
    let output = run_training(&config, &dataset, &a.out)?;
    println!(
        "trained {:?} behavior{} on {} records; run directory {}",
        config.behavior,
        if output.agent.critic.is_some() {
            format!(" and critic ({} planning iterations)", config.planning.iterations)
        } else {
            String::new()
        },
        dataset.num_records(),
        a.out.display()
    );
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "score {:.1}  ({} of {} episodes arrived: {} left, {} right)",
        report.score, report.successes, report.episodes, report.left, report.right
    );
}

fn eval(a: EvalArgs) -> Outcome {
    let path = a.config.clone().unwrap_or_else(|| a.run.join("config.json"));
    if !path.exists() {
        return Err(Failure::Runtime(sfbc::Error::Checkpoint(format!(
            "missing {}",
            path.display()
        ))));
    }
    let mut config = load_config(Some(&path))?;
    if let Some(seed) = a.seed {
        config.eval_seed = seed;
    }
    if let Some(n) = a.episodes {
        config.eval_episodes = n;
    }
    a.policy.apply(&mut config);
    let config = checked(config)?;
    let report = run_eval(&a.run, &config)?;
    print_report(&report);
    if let Some(out) = a.out {
        fs::write(out, serde_json::to_string_pretty(&report).map_err(sfbc::Error::from)?)?;
    }
    Ok(())
}

fn operator_lab(a: LabArgs) -> Outcome {
    let cfg = PropositionConfig {
        trials: a.trials as usize,
        seed: a.seed,
        horizon_factor: a.horizon_factor,
        inject_violation: a.inject_violation,
        ..PropositionConfig::default()
    };
    fs::create_dir_all(&a.out)?;
    let report = check_propositions(&cfg)?;
    report.write_csv(fs::File::create(a.out.join("propositions.csv"))?)?;

    let race = contraction_race(&PropositionConfig {
        inject_violation: false,
        ..cfg.clone()
    })?;
    let mut race_csv = String::from("trial,planning_iterations,expectation_iterations\n");
    for (t, (p, e)) in race
        .planning_iterations
        .iter()
        .zip(&race.expectation_iterations)
        .enumerate()
    {
        race_csv += &format!("{t},{p},{e}\n");
    }
    fs::write(a.out.join("contraction.csv"), race_csv)?;

    let fraction = race.fraction_not_slower();
    let summary = format!(
        "{}planning fixed point no slower than T^pi on {:.1}% of trials (need {:.0}%)\n",
        report.summary(),
        100.0 * fraction,
        100.0 * CONTRACTION_PASS_FRACTION
    );
    fs::write(a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    let violations = report.violations().count();
    if violations > 0 {
        return Err(Failure::Violation(format!(
            "{violations} proposition violations, see propositions.csv"
        )));
    }
    if fraction < CONTRACTION_PASS_FRACTION {
        return Err(Failure::Violation(format!(
            "fast contraction held on only {:.1}% of trials",
            100.0 * fraction
        )));
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Outcome {
    if a.run.is_none() && a.action_csv.is_none() && a.targets.is_none() {
        return Err(Failure::Usage("plot needs --run, --action-csv or --targets".into()));
    }
    let grid = GridSpec {
        nx: a.nx,
        nv: a.nv,
        ..GridSpec::default()
    };
    grid.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    fs::create_dir_all(&a.out)?;
    let mut targets = a.targets.clone();
    if let Some(run) = &a.run {
        let config = load_config(Some(&run.join("config.json")))?;
        let agent = Agent::load(run, &config)?;
        let map = action_map(&grid, |s, rng| agent.act(s, &config.policy, rng), a.seed)?;
        fs::write(a.out.join("action_map.csv"), map.to_csv())?;
        fs::write(
            a.out.join("action_map.svg"),
            map.to_svg(&format!("{:?} agent", config.behavior)),
        )?;
        println!(
            "action map: |a| > 0.8 on {:.1}% of cells",
            100.0 * map.fraction_abs_above(0.8)
        );
        if targets.is_none() && run.join("targets.csv").exists() {
            targets = Some(run.join("targets.csv"));
        }
    }
    if let Some(csv) = &a.action_csv {
        let map = ActionMap::from_csv(&fs::read_to_string(csv)?)?;
        fs::write(a.out.join("action_map.svg"), map.to_svg("action map"))?;
    }
    if let Some(path) = targets {
        let history = read_target_history(&path)?;
        fs::write(a.out.join("targets.svg"), target_evolution_svg(&history, 400)?)?;
        fs::write(a.out.join("target_summary.csv"), target_summary_csv(&history)?)?;
    }
    println!("figures written to {}", a.out.display());
    Ok(())
}
