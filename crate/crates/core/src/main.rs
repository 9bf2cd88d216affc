use std::fs::{self, File};
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use memwrite_bench::episodegen::{
    freeze_episodes, generate_set, load_episodes, GeneratorConfig, Regime,
};
use memwrite_bench::policies::{PolicyKind, Track};
use memwrite_bench::runner::{
    aggregate, generate_episodes, group_by_regime, read_records, run_sweep, write_aggregate_csv,
    SweepConfig, DEFAULT_BUDGETS,
};
use memwrite_bench::selftest;

#[derive(Parser)]
#[command(
    name = "memwrite-bench",
    version,
    about = "Benchmark memory write policies under a byte budget"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate episodes and write them to a frozen episode file.
    Freeze {
        /// Regime name(s), comma separated, or `all`.
        #[arg(long, default_value = "default")]
        regime: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every (regime, track, budget, policy) condition.
    Evaluate {
        /// Frozen episode file, or `auto` to generate from seeds.
        #[arg(long, default_value = "auto")]
        episodes: String,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "default,burst_drift,redundancy,burst_redundancy"
        )]
        regimes: Vec<Regime>,
        #[arg(long, value_delimiter = ',', default_value = "unprivileged,privileged")]
        tracks: Vec<Track>,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<PolicyKind>>,
        /// Episodes per condition; defaults to 10, or every episode in a frozen file.
        #[arg(long)]
        count: Option<usize>,
        /// Seed of episode 0 when generating.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Aggregate a per-episode results file into the condition CSV.
    Aggregate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn parse_regimes(list: &str) -> Result<Vec<Regime>> {
    if list == "all" {
        return Ok(Regime::ALL.to_vec());
    }
    list.split(',')
        .map(|s| s.trim().parse::<Regime>().map_err(Into::into))
        .collect()
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Freeze {
            regime,
            episodes,
            seed,
            out,
        } => {
            let mut all = Vec::new();
            for r in parse_regimes(&regime)? {
                all.extend(generate_set(
                    &GeneratorConfig::default(),
                    r,
                    episodes,
                    seed,
                )?);
            }
            freeze_episodes(&all, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("froze {} episodes to {}", all.len(), out.display());
        }
        Command::Evaluate {
            episodes,
            regimes,
            tracks,
            budgets,
            policies,
            count,
            seed,
            out_dir,
        } => {
            let mut cfg = SweepConfig {
                regimes,
                tracks,
                budgets: budgets.unwrap_or_else(|| DEFAULT_BUDGETS.to_vec()),
                policies: policies.unwrap_or_else(|| PolicyKind::ALL.to_vec()),
                base_seed: seed,
                ..SweepConfig::default()
            };
            let set = if episodes == "auto" {
                cfg.episodes_per_condition = count.unwrap_or(10);
                cfg.validate()?;
                generate_episodes(&cfg)?
            } else {
                let path = PathBuf::from(&episodes);
                let set = group_by_regime(load_episodes(&path)?);
                let available = cfg
                    .regimes
                    .iter()
                    .map(|r| set.get(r).map_or(0, Vec::len))
                    .min()
                    .unwrap_or(0);
                if available == 0 {
                    bail!(
                        "{} holds no episodes for some requested regime",
                        path.display()
                    );
                }
                cfg.episodes_per_condition = count.unwrap_or(available);
                set
            };
            let out = run_sweep(&cfg, &set, &out_dir)?;
            println!(
                "{} runs ({} failed) -> {}, {}",
                out.runs,
                out.failures,
                out.results_path.display(),
                out.aggregate_path.display()
            );
        }
        Command::Aggregate { input, out } => {
            let file =
                File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let records = read_records(BufReader::new(file))?;
            let rows = aggregate(&records);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut buf = Vec::new();
            write_aggregate_csv(&rows, &mut buf)?;
            fs::write(&out, buf).with_context(|| format!("writing {}", out.display()))?;
            println!("{} condition rows -> {}", rows.len(), out.display());
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                if c.passed {
                    println!("PASS {}", c.name);
                } else {
                    println!("FAIL {}: {}", c.name, c.detail);
                }
            }
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
