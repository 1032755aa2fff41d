use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedmvmf::cli::{self, Mode, RunConfig, Scenario, SimulateOutcome};
use fedmvmf::data::SyntheticSpec;
use fedmvmf::eval::PayloadDims;

#[derive(Parser)]
#[command(version, about = "Federated multi-view matrix factorization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    participation: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run client updates one at a time in sampled order.
    #[arg(long)]
    deterministic: bool,
}

impl RunArgs {
    fn load(&self) -> fedmvmf::Result<RunConfig> {
        let mut cfg = RunConfig::from_file(&self.config)?;
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        if let Some(p) = self.participation {
            cfg.participation_fraction = p;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.deterministic |= self.deterministic;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and write trace.csv, metrics.json, payload.json, manifest.json.
    Simulate(RunArgs),
    /// Hold out users and/or items and recommend for them from features alone.
    Coldstart {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "users")]
        scenario: Scenario,
        #[arg(long, default_value_t = 0.1)]
        holdout_fraction: f64,
    },
    /// Write a seeded synthetic dataset in the loadable file formats.
    GenSynthetic {
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 20)]
        user_features: usize,
        #[arg(long, default_value_t = 20)]
        item_features: usize,
        #[arg(long, default_value_t = 4)]
        k_true: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0.05)]
        density: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Payload sizes and timings for FED-MVMF against FCF.
    PayloadReport {
        #[arg(long, default_value_t = 3064)]
        items: usize,
        #[arg(long, default_value_t = 3434)]
        user_features: usize,
        #[arg(long, default_value_t = 25)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(command: Command) -> fedmvmf::Result<()> {
    match command {
        Command::Simulate(args) => match cli::cmd_simulate(&args.load()?)? {
            SimulateOutcome::Single(s) => println!("{}", serde_json::to_string_pretty(&s.summary)?),
            SimulateOutcome::Compare(c) => println!("{}", serde_json::to_string_pretty(&c.impr_pct)?),
        },
        Command::Coldstart {
            run,
            scenario,
            holdout_fraction,
        } => {
            let s = cli::cmd_coldstart(&run.load()?, scenario, holdout_fraction)?;
            println!("{}", serde_json::to_string_pretty(&(&s.summary, &s.random_baseline))?);
        }
        Command::GenSynthetic {
            users,
            items,
            user_features,
            item_features,
            k_true,
            noise,
            density,
            seed,
            out,
        } => {
            let spec = SyntheticSpec {
                n_users: users,
                n_items: items,
                d_u: user_features,
                d_v: item_features,
                k_true,
                noise,
                density,
                seed,
            };
            let r = cli::cmd_gen_synthetic(&spec, &out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::PayloadReport {
            items,
            user_features,
            k,
            out,
        } => {
            let dims = PayloadDims {
                n_items: items,
                n_user_features: user_features,
                k,
            };
            let r = cli::cmd_payload_report(dims, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
