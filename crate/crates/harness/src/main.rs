use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use geobft_harness::{
    check_ledger, compare, compare_modes, export_ledger, read, run_experiment, sweep, trace, write_trace, Axis,
    Experiment, HarnessError, LedgerCheck, Overrides, Summary,
};
use geobft_sim::{Protocol, Scenario};

/// Deterministic GeoBFT experiments.
#[derive(Parser)]
#[command(name = "geobft", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the protocol: geobft or flat-pbft.
    #[arg(long)]
    mode: Option<Protocol>,
    /// Overrides the latency jitter, in percent.
    #[arg(long)]
    jitter: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<Scenario, HarnessError> {
        let scenario = Scenario::parse(&read(&self.scenario)?)?;
        Overrides {
            seed: self.seed,
            mode: self.mode,
            jitter_pct: self.jitter,
        }
        .apply(&scenario)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario, printing one record per run and their average.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        repetitions: u32,
        /// Also write the records here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the ledger of the first non-faulty replica here.
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Where traces of breaching runs go.
        #[arg(long, default_value = ".")]
        trace_dir: PathBuf,
    },
    /// Compare two record files, or run a scenario under both protocols.
    Compare {
        /// Subject and baseline record files.
        records: Vec<PathBuf>,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long, default_value_t = 1)]
        repetitions: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Vary one parameter and tabulate the results.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// clusters, replicas or batch_size.
        #[arg(long)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        repetitions: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check an exported ledger against the keys of its scenario.
    VerifyLedger {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ledger: PathBuf,
    },
    /// Print the full event trace of one run.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn emit(lines: &[String], out: Option<&Path>) -> Result<(), HarnessError> {
    let text = lines.join("\n") + "\n";
    print!("{text}");
    if let Some(path) = out {
        write(path, &text)?;
    }
    Ok(())
}

/// Prints the breaches of `experiment` and dumps a trace of each breaching seed.
fn report_breaches(scenario: &Scenario, experiment: &Experiment, dir: &Path) -> Result<bool, HarnessError> {
    let mut clean = true;
    for run in &experiment.runs {
        if run.breaches.is_empty() {
            continue;
        }
        clean = false;
        for b in &run.breaches {
            eprintln!("seed {}: {b}", run.metrics.seed);
        }
        let path = write_trace(&scenario.with_seed(run.metrics.seed), dir)?;
        eprintln!("seed {}: trace written to {}", run.metrics.seed, path.display());
    }
    Ok(clean)
}

fn execute(command: Command) -> Result<bool, HarnessError> {
    match command {
        Command::Run {
            common,
            repetitions,
            out,
            ledger,
            trace_dir,
        } => {
            let scenario = common.load()?;
            let experiment = run_experiment(&scenario, repetitions)?;
            emit(&experiment.records(), out.as_deref())?;
            if let Some(path) = ledger {
                write(&path, &export_ledger(&scenario)?)?;
            }
            report_breaches(&scenario, &experiment, &trace_dir)
        }
        Command::Compare {
            records,
            scenario,
            seed,
            jitter,
            repetitions,
            out,
        } => {
            let (comparison, mut lines) = match (records.as_slice(), scenario) {
                ([a, b], None) => {
                    let sa = Summary::from_records(&read(a)?, a)?;
                    let sb = Summary::from_records(&read(b)?, b)?;
                    (compare(&sa, &sb)?, Vec::new())
                }
                ([], Some(path)) => {
                    let common = Common {
                        scenario: path,
                        seed,
                        mode: None,
                        jitter,
                    };
                    let (g, f, c) = compare_modes(&common.load()?, repetitions)?;
                    if !g.is_clean() || !f.is_clean() {
                        emit(&[c.to_record()], out.as_deref())?;
                        eprintln!("a compared run was not safe and live");
                        return Ok(false);
                    }
                    let mut lines = g.records();
                    lines.extend(f.records());
                    (c, lines)
                }
                _ => {
                    eprintln!("compare takes two record files or --scenario");
                    std::process::exit(2);
                }
            };
            lines.push(comparison.to_record());
            emit(&lines, out.as_deref())?;
            Ok(true)
        }
        Command::Sweep {
            common,
            axis,
            values,
            repetitions,
            out,
        } => {
            let result = sweep(&common.load()?, axis, &values, repetitions)?;
            print!("{}", result.table());
            let lines: Vec<String> = result
                .rows
                .iter()
                .flat_map(|r| {
                    let prefix = format!("{axis}={} ", r.value);
                    r.experiment.records().into_iter().map(move |l| prefix.clone() + &l)
                })
                .collect();
            if let Some(path) = out {
                write(&path, &(lines.join("\n") + "\n"))?;
            }
            Ok(result.is_clean())
        }
        Command::VerifyLedger { common, ledger } => match check_ledger(&common.load()?, &read(&ledger)?)? {
            LedgerCheck::Valid { blocks, head } => {
                println!("valid blocks={blocks} head={head}");
                Ok(true)
            }
            LedgerCheck::Rejected(rejection) => {
                println!("invalid {rejection}");
                Ok(false)
            }
        },
        Command::Trace { common, out } => {
            let lines = trace(&common.load()?)?;
            emit(&lines, out.as_deref())?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
