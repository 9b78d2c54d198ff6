use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fsclb::harness::{
    aggregate_curves, group_by_trial, invariant_suite, read_rounds_csv, run_experiment, write_csv,
    Algo, ExperimentConfig, ExperimentOutput, TransportKind,
};
use fsclb::protocol::TcpServer;

#[derive(Parser)]
#[command(name = "fsclb", version, about = "Federated sketched linear bandit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write rounds.csv, curves.csv and summary.json.
    Run(RunArgs),
    /// Run a grid over d, l and alpha.
    Sweep(SweepArgs),
    /// Run the theory-mode invariant suite at desk scale.
    Check(CommonArgs),
    /// Serve the aggregation protocol over TCP.
    Serve {
        #[arg(long, env = "FSCLB_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "FSCLB_PORT", default_value_t = 7878)]
        port: u16,
    },
    /// Run the agents of an experiment against a remote server.
    Agent {
        #[command(flatten)]
        run: RunArgs,
        /// Server address, host:port.
        #[arg(long, env = "FSCLB_SERVER")]
        server: String,
    },
    /// Average a rounds.csv into per-round curves for plotting.
    Plotdata {
        #[arg(long)]
        rounds: PathBuf,
        #[arg(long, default_value = "curves.csv")]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    algo: Option<Algo>,
    #[arg(long)]
    transport: Option<TransportKind>,
    #[arg(long)]
    trials: Option<usize>,
    /// Horizon T.
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long)]
    theory: bool,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    d: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    l: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(algo) = self.algo {
            config.algo = algo;
        }
        if let Some(transport) = self.transport {
            config.transport = transport;
        }
        if let Some(trials) = self.trials {
            config.trials = trials;
        }
        if let Some(horizon) = self.horizon {
            config.horizon = horizon;
        }
        config.theory |= self.theory;
        Ok(config)
    }
}

fn print_summary(out: &ExperimentOutput) {
    let c = &out.config;
    println!(
        "{:?}: d={} l={} M={} K={} T={} alpha={} trials={}",
        c.algo, c.d, c.l, c.m, c.k, c.horizon, c.alpha, out.aggregate.trials
    );
    for (name, stat) in &out.aggregate.metrics {
        println!("  {name:<24} {:>16.4} ± {:.4}", stat.mean, stat.std);
    }
}

/// Runs, writes outputs, and reports invariant failures through the exit code.
fn run_and_write(config: &ExperimentConfig, out_dir: &Path) -> Result<bool> {
    let out = run_experiment(config)?;
    out.write_to(out_dir)
        .with_context(|| format!("writing to {}", out_dir.display()))?;
    print_summary(&out);
    println!("wrote {}", out_dir.display());
    Ok(match &out.invariants {
        Some(report) => {
            print!("{report}");
            report.passed()
        }
        None => true,
    })
}

fn sweep(args: &SweepArgs) -> Result<bool> {
    let base = args.run.common.load()?;
    let ds = if args.d.is_empty() { vec![base.d] } else { args.d.clone() };
    let ls = if args.l.is_empty() { vec![base.l] } else { args.l.clone() };
    let alphas = if args.alpha.is_empty() { vec![base.alpha] } else { args.alpha.clone() };
    std::fs::create_dir_all(&args.run.out)?;

    let mut rows = Vec::new();
    let mut all_passed = true;
    for &d in &ds {
        for &l in &ls {
            for &alpha in &alphas {
                let config = ExperimentConfig { d, l, alpha, ..base.clone() };
                if let Err(e) = config.validate() {
                    eprintln!("skipping d={d} l={l} alpha={alpha}: {e}");
                    continue;
                }
                let dir = args.run.out.join(format!("d{d}_l{l}_alpha{alpha}"));
                let out = run_experiment(&config)?;
                out.write_to(&dir)?;
                all_passed &= out.invariants.as_ref().is_none_or(|r| r.passed());
                let mut row = serde_json::Map::new();
                row.insert("d".into(), d.into());
                row.insert("l".into(), l.into());
                row.insert("alpha".into(), alpha.into());
                for (name, stat) in &out.aggregate.metrics {
                    row.insert(format!("{name}_mean"), stat.mean.into());
                    row.insert(format!("{name}_std"), stat.std.into());
                }
                println!(
                    "d={d} l={l} alpha={alpha}: regret {:.2}, communications {:.1}, scalars {:.0}",
                    out.aggregate.mean("cum_regret"),
                    out.aggregate.mean("switching_count"),
                    out.aggregate.mean("total_scalars"),
                );
                rows.push(serde_json::Value::Object(row));
            }
        }
    }
    let path = args.run.out.join("sweep.json");
    std::fs::write(&path, serde_json::to_string_pretty(&rows)?)?;
    println!("wrote {}", path.display());
    Ok(all_passed)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => run_and_write(&args.common.load()?, &args.out),
        Command::Sweep(args) => sweep(&args),
        Command::Check(args) => {
            let config = args.load()?;
            let report = invariant_suite(&config)?;
            print!("{report}");
            Ok(report.passed())
        }
        Command::Serve { host, port } => {
            let server = TcpServer::bind((host.as_str(), port))?;
            println!("listening on {}", server.local_addr()?);
            server.serve()?;
            Ok(true)
        }
        Command::Agent { run, server } => {
            let mut config = run.common.load()?;
            if config.algo == Algo::Random {
                bail!("the random baseline never talks to a server");
            }
            config.transport = TransportKind::Tcp;
            config.tcp_addr = Some(server);
            run_and_write(&config, &run.out)
        }
        Command::Plotdata { rounds, out } => {
            let records = read_rounds_csv(&rounds)?;
            let curves = aggregate_curves(&group_by_trial(records))?;
            write_csv(&out, curves.iter())?;
            println!("wrote {} rows to {}", curves.len(), out.display());
            Ok(true)
        }
    }
}
