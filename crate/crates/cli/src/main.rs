use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use himp_core::chem::parse_smiles;
use himp_core::config::{ConfigError, RunConfig};
use himp_core::gradcheck::{self, TOLERANCE};
use himp_core::junction::{decompose_with, DecomposeOptions};
use himp_core::train::{self, TrainError};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "himp", version, args_override_self = true, about = "Hierarchical inter-message passing for molecular property prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the junction-tree decomposition of SMILES strings or a CSV file as JSON lines
    Decompose {
        /// SMILES strings, or a single path to a CSV file with a SMILES column
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, default_value = "smiles")]
        smiles_column: String,
        #[arg(long, default_value_t = 3)]
        singleton_threshold: usize,
        /// Write to a file instead of stdout
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Train a model; prints per-epoch stats and a final JSON summary
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on a CSV file
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Print the full JSON summary instead of `metric value`
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of every op and of end-to-end model gradients
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

/// Configuration file plus per-key overrides.
#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    architecture: Option<String>,
    #[arg(long)]
    readout: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long, alias = "batch_size")]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long, alias = "lr_decay")]
    lr_decay: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long, alias = "singleton_threshold")]
    singleton_threshold: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long, alias = "val_data")]
    val_data: Option<String>,
    #[arg(long, alias = "test_data")]
    test_data: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long, alias = "smiles_column")]
    smiles_column: Option<String>,
    #[arg(long, alias = "target_columns")]
    target_columns: Option<String>,
    #[arg(long, alias = "cache_dir")]
    cache_dir: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    metrics: Option<String>,
}

enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => Failure::Usage(c.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        let overrides = [
            ("seed", &self.seed),
            ("task", &self.task),
            ("architecture", &self.architecture),
            ("readout", &self.readout),
            ("layers", &self.layers),
            ("hidden", &self.hidden),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("lr_decay", &self.lr_decay),
            ("dropout", &self.dropout),
            ("singleton_threshold", &self.singleton_threshold),
            ("data", &self.data),
            ("val_data", &self.val_data),
            ("test_data", &self.test_data),
            ("split", &self.split),
            ("smiles_column", &self.smiles_column),
            ("target_columns", &self.target_columns),
            ("cache_dir", &self.cache_dir),
            ("checkpoint", &self.checkpoint),
            ("metrics", &self.metrics),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                config.set(key, v)?;
            }
        }
        Ok(config)
    }
}

fn decompose_cmd(
    inputs: &[String],
    smiles_column: &str,
    threshold: usize,
    output: Option<&Path>,
) -> Result<(), Failure> {
    let options = DecomposeOptions { singleton_threshold: threshold };
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    if inputs.len() == 1 && Path::new(&inputs[0]).is_file() {
        // read the SMILES column directly; labels are not needed here
        let text = fs::read_to_string(&inputs[0]).map_err(|e| Failure::Data(format!("{}: {e}", inputs[0])))?;
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Failure::Data(e.to_string()))?.clone();
        let col = headers
            .iter()
            .position(|h| h.trim() == smiles_column)
            .ok_or_else(|| Failure::Data(format!("{}: missing column `{}`", inputs[0], smiles_column)))?;
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Failure::Data(e.to_string()))?;
            let smiles = row.get(col).unwrap_or("").trim();
            match parse_smiles(smiles) {
                Ok(mol) => lines.push(decompose_with(&mol, &options).to_json()),
                Err(e) => failed.push(format!("line {}: `{smiles}`: {e}", i + 2)),
            }
        }
    } else {
        for smiles in inputs {
            match parse_smiles(smiles) {
                Ok(mol) => lines.push(decompose_with(&mol, &options).to_json()),
                Err(e) => failed.push(format!("`{smiles}`: {e}")),
            }
        }
    }
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    match output {
        Some(path) => fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Data(failed.join("\n")))
    }
}

fn train_cmd(run: &RunArgs) -> Result<(), Failure> {
    let config = run.resolve()?;
    let summary = train::train(&config, |stats| {
        println!("{}", serde_json::to_string(stats).expect("stats serialize"));
    })?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn eval_cmd(run: &RunArgs, json: bool) -> Result<(), Failure> {
    let config = run.resolve()?;
    let data = config.data.as_ref().ok_or_else(|| Failure::Usage("eval needs --data".into()))?;
    let summary = train::evaluate_file(&config.checkpoint, data, config.cache_dir.clone(), config.batch_size)?;
    if json {
        println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    } else {
        println!("{} {:.4}", summary.metric, summary.value);
    }
    Ok(())
}

fn gradcheck_cmd(seed: u64, corrupt: Option<&str>) -> Result<(), Failure> {
    let fault = match corrupt {
        Some(name) => Some(gradcheck::parse_op_kind(name).ok_or_else(|| Failure::Usage(format!("unknown op `{name}`")))?),
        None => None,
    };
    let report = gradcheck::run(seed, fault).map_err(|e| Failure::Check(e.to_string()))?;
    for c in &report.checks {
        println!(
            "{:<18} entries={:<4} max_rel_err={:.3e} worst={}[{}] {}",
            c.name,
            c.entries,
            c.max_rel_err,
            c.worst.0,
            c.worst.1,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let max = report.max_rel_err();
    if report.passed() {
        println!("PASS, max rel err {max:.3e} < {TOLERANCE:e}");
        Ok(())
    } else {
        println!("FAIL, max rel err {max:.3e} >= {TOLERANCE:e}");
        Err(Failure::Check("gradient check failed".into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Decompose { inputs, smiles_column, singleton_threshold, output } => {
            decompose_cmd(inputs, smiles_column, *singleton_threshold, output.as_deref())
        }
        Command::Train { run } => train_cmd(run),
        Command::Eval { run, json } => eval_cmd(run, *json),
        Command::Gradcheck { seed, corrupt } => gradcheck_cmd(*seed, corrupt.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(USAGE)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(DATA)
        }
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(CHECK)
        }
    }
}
