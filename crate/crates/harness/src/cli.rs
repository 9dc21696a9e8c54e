//! `rballoc` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use rballoc_core::dataset::Dataset;
use rballoc_core::oracle::DEFAULT_MAX_STATES;
use rballoc_core::sysmodel::bps_to_nats;
use rballoc_core::SystemConfig;
use rballoc_learn::trainer::{evaluate, train, write_log};
use rballoc_learn::{Checkpoint, Mode, TrainConfig};

use crate::bench::{run_bench, write_csv, BenchSpec};
use crate::config::ConfigFile;
use crate::experiments::{solve_all, summarize, Method};
use crate::{HarnessError, Result};

#[derive(Debug, Parser)]
#[command(name = "rballoc", version, about = "Minimum-RB uplink allocation with LBT and SBT QoS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a channel dataset (JSON lines).
    GenData(GenData),
    /// Exact single-user solver on every sample (users = 1).
    SolveSu(Solve),
    /// Sequential-claim multiuser heuristic on every sample.
    SolveMu(Solve),
    /// Exhaustive search on every sample.
    Oracle(OracleArgs),
    /// Train a policy.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Runtime comparison of oracle, su_opt and inference.
    Bench(BenchArgs),
    /// Print the reference configuration.
    DefaultConfig(DefaultConfig),
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Solve {
    #[arg(long)]
    dataset: PathBuf,
    /// Override the system stored in the dataset header.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-sample results (JSON lines).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    solve: Solve,
    #[arg(long, default_value_t = DEFAULT_MAX_STATES)]
    max_states: u128,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// System and training configuration; the dataset's system and
    /// default training settings are used without it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// proposed, fixed-parameter, annealing, default-constr, incr-require or fixed-multiplier:<lambda>.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out dataset for the periodic log rows and final metrics.
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Output directory: checkpoint.json, train_log.csv, metrics.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Base system (users must be 1); a scaled-down reference system without it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "4,5,6,7")]
    rbs: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "3600000,4800000,6000000")]
    rate_l_bps: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_STATES)]
    max_states: u128,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DefaultConfig {
    /// Use the training violation budget (eps = 5e-6).
    #[arg(long)]
    learning: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let kind = if e.exit_code() == 2 { "usage" } else { "runtime" };
            let msg = serde_json::json!({ "error": kind, "message": e.to_string() });
            eprintln!("{msg}");
            e.exit_code()
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).map_err(|e| match e {
        rballoc_core::Error::Io(io) => HarnessError::Usage(format!("cannot read dataset {}: {io}", path.display())),
        other => other.into(),
    })
}

fn system_for(dataset: &Dataset, config: Option<&Path>) -> Result<SystemConfig> {
    let system = match config {
        Some(p) => ConfigFile::load(p)?.resolve()?.0,
        None => return Ok(dataset.header.config.clone()),
    };
    for ch in &dataset.channels {
        ch.check_shape(&system)
            .map_err(|e| HarnessError::Usage(format!("dataset does not match config: {e}")))?;
    }
    Ok(system)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn solve(method: Method, args: &Solve) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let system = system_for(&dataset, args.config.as_deref())?;
    let results = solve_all(method, &dataset.channels, &system)?;
    if let Some(out) = &args.out {
        let mut w = create(out)?;
        for r in &results {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    print_json(&summarize(method, &results))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => {
            let system = ConfigFile::load(&a.config)?.resolve()?.0;
            let data = Dataset::generate(&system, a.seed, a.samples)?;
            data.write_to(create(&a.out)?)?;
            Ok(())
        }
        Command::SolveSu(a) => solve(Method::SingleUser, &a),
        Command::SolveMu(a) => solve(Method::MultiUser, &a),
        Command::Oracle(a) => solve(
            Method::Oracle {
                max_states: a.max_states,
            },
            &a.solve,
        ),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => {
            let text = std::fs::read_to_string(&a.checkpoint)
                .map_err(|e| HarnessError::Usage(format!("cannot read checkpoint {}: {e}", a.checkpoint.display())))?;
            let ckpt = Checkpoint::from_json(&text)?;
            let dataset = load_dataset(&a.dataset)?;
            for ch in &dataset.channels {
                ch.check_shape(&ckpt.system)
                    .map_err(|e| HarnessError::Usage(format!("dataset does not match checkpoint: {e}")))?;
            }
            let metrics = evaluate(&ckpt.policy, &dataset.channels, &ckpt.system, ckpt.train.sort_inputs)?;
            if let Some(out) = &a.out {
                let mut w = create(out)?;
                serde_json::to_writer_pretty(&mut w, &metrics)?;
                w.flush()?;
            }
            print_json(&metrics)
        }
        Command::Bench(a) => {
            let base = match &a.config {
                Some(p) => ConfigFile::load(p)?.resolve()?.0,
                None => SystemConfig {
                    users: 1,
                    ..SystemConfig::default()
                }
                .with_requirements(bps_to_nats(a.rate_l_bps[0]), bps_to_nats(102.4e3), 1e-2),
            };
            let rows = run_bench(&BenchSpec {
                base,
                rbs: a.rbs,
                rate_l_bps: a.rate_l_bps,
                samples: a.samples,
                seed: a.seed,
                hidden: a.hidden,
                max_states: a.max_states,
            })?;
            match &a.out {
                Some(out) => write_csv(&rows, create(out)?),
                None => write_csv(&rows, std::io::stdout().lock()),
            }
        }
        Command::DefaultConfig(a) => {
            let text = ConfigFile::reference(a.learning).to_json()?;
            match &a.out {
                Some(out) => {
                    let mut w = create(out)?;
                    writeln!(w, "{text}")?;
                    w.flush()?;
                }
                None => println!("{text}"),
            }
            Ok(())
        }
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let (system, mut train_cfg) = match &a.config {
        Some(p) => {
            let system = system_for(&dataset, Some(p))?;
            (system, ConfigFile::load(p)?.train)
        }
        None => (dataset.header.config.clone(), TrainConfig::default()),
    };
    if let Some(mode) = a.mode {
        train_cfg.mode = mode;
    }
    if let Some(n) = a.iterations {
        train_cfg.iterations = n;
    }
    if let Some(seed) = a.seed {
        train_cfg.seed = seed;
    }
    train_cfg
        .validate()
        .map_err(|e| HarnessError::Usage(format!("invalid config: {e}")))?;
    let holdout = match &a.holdout {
        Some(p) => load_dataset(p)?.channels,
        None => Vec::new(),
    };
    let outcome = train(&dataset.channels, &holdout, &system, &train_cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let mut w = create(&a.out.join("checkpoint.json"))?;
    w.write_all(outcome.checkpoint.to_json()?.as_bytes())?;
    w.flush()?;
    write_log(&outcome.log, create(&a.out.join("train_log.csv"))?)?;
    if !holdout.is_empty() {
        let metrics = evaluate(&outcome.checkpoint.policy, &holdout, &system, train_cfg.sort_inputs)?;
        let mut w = create(&a.out.join("metrics.json"))?;
        serde_json::to_writer_pretty(&mut w, &metrics)?;
        w.flush()?;
        print_json(&metrics)?;
    }
    Ok(())
}
