use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ofhrl::env::{EnvName, PolicyGrade};
use ofhrl::pipeline::{self, RunConfig};
use ofhrl::util::KeyValues;
use ofhrl::Result;

#[derive(Parser)]
#[command(name = "ofhrl", version, about = "Offline hierarchical RL in a pessimistic learned MDP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration: an optional `key=value` file, then flag overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Config file in `key=value` form.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<EnvName>,
    /// Dataset written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory written by `train-world`.
    #[arg(long)]
    world: Option<PathBuf>,
    /// moc, flat, uof or bc.
    #[arg(long)]
    agent: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    cvae: Option<bool>,
    #[arg(long)]
    pessimistic_termination: Option<bool>,
    #[arg(long)]
    goal_conditioned_cvae: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, e.g. `--set moc.total_steps=100000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut kv = match &self.config {
            Some(path) => KeyValues::read(path)?,
            None => KeyValues::default(),
        };
        if let Some(e) = self.env {
            kv.set("env", e);
        }
        let flags = [
            ("dataset", self.data.as_ref().map(|p| p.display().to_string())),
            ("world_dir", self.world.as_ref().map(|p| p.display().to_string())),
            ("agent", self.agent.clone()),
            ("seeds", self.seeds.clone()),
            ("cvae", self.cvae.map(|b| b.to_string())),
            ("pessimistic_termination", self.pessimistic_termination.map(|b| b.to_string())),
            ("goal_conditioned_cvae", self.goal_conditioned_cvae.map(|b| b.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                kv.set(key, v);
            }
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| ofhrl::Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            kv.set(k.trim(), v.trim());
        }
        RunConfig::from_key_values(&kv, EnvName::CorridorForward)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Roll a scripted behavior policy into a dataset file.
    GenData {
        #[arg(long)]
        env: EnvName,
        /// medium, expert or medium_expert.
        #[arg(long)]
        grade: PolicyGrade,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the dynamics ensemble and the latent action codec.
    TrainWorld(ConfigArgs),
    /// Train agents inside the pessimistic MDP.
    TrainAgent(ConfigArgs),
    /// Drop the decoder of a trained agent and fine-tune it online on another task.
    Transfer {
        /// An `agent` directory written by `train-agent`.
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        env: EnvName,
        #[arg(long, default_value_t = 100_000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained agents in the true environment.
    Eval {
        /// A `train-agent` output directory or one of its `seed_*` directories.
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        env: EnvName,
        #[arg(long, default_value_t = 30)]
        episodes: usize,
        /// High-level goal to pursue (goal environment).
        #[arg(long)]
        task: Option<usize>,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Per-timestep share of each option over evaluation episodes.
    OptionsTrace {
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        env: EnvName,
        #[arg(long, default_value_t = 2)]
        goal: usize,
        #[arg(long, default_value_t = 30)]
        episodes: usize,
        #[arg(long)]
        csv: PathBuf,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { env, grade, n, seed, out } => {
            let s = pipeline::gen_data(env, grade, n, seed, &out)?;
            println!("wrote {} transitions to {}", s.transitions, out.display());
            println!("mean episode return {:.4}", s.mean_return);
            println!("sha256 {}", s.sha256);
        }
        Command::TrainWorld(args) => {
            let cfg = args.resolve()?;
            let s = pipeline::train_world_cmd(&cfg)?;
            for (k, v) in s.best_validation.iter().enumerate() {
                println!("member {k} best validation l1 {v:.6}");
            }
            println!("threshold {} = {:e}", cfg.world.threshold_mode, s.threshold);
            if let Some(v) = s.codec_validation {
                println!("codec validation l1 {v:.6}");
            }
        }
        Command::TrainAgent(args) => {
            let cfg = args.resolve()?;
            for s in pipeline::train_agent_cmd(&cfg)? {
                print!("seed {} true-env return {:.3}", s.seed, s.true_return);
                for (k, r) in s.success.iter().enumerate() {
                    print!(" goal{k} {r:.2}");
                }
                println!();
            }
        }
        Command::Transfer { agent, env, steps, out } => {
            let s = pipeline::transfer_cmd(&agent, env, steps, &out)?;
            println!("pre-transfer return {:.3}", s.pre_transfer_return);
            match s.steps_to_target {
                Some(n) => println!("reached 80% of it after {n} online steps"),
                None => println!("did not reach 80% of it within {steps} online steps"),
            }
        }
        Command::Eval {
            agent,
            env,
            episodes,
            task,
            csv,
        } => {
            let s = pipeline::eval_cmd(&agent, env, episodes, task, &csv)?;
            println!(
                "return {:.3} +- {:.3} over {} run(s), normalized {:.1}",
                s.mean,
                s.std,
                s.run_returns.len(),
                s.mean_normalized
            );
        }
        Command::OptionsTrace {
            agent,
            env,
            goal,
            episodes,
            csv,
        } => {
            let t = pipeline::options_trace_cmd(&agent, env, goal, episodes, &csv)?;
            for (k, first) in t.first_dominance.iter().enumerate() {
                match first {
                    Some(v) => println!("option {k} first in control at step {v:.2} on average"),
                    None => println!("option {k} never in control"),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
