//! The `nfs` command line: generate data, train, select, compare against the
//! exhaustive oracle, evaluate checkpoints and render stored reports.

pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nfs_core::checkpoint;
use nfs_core::data::{meta_path, write_dataset};
use nfs_core::pipeline::{exhaustive_oracle, prepare, run_selection, PipelineConfig};
use nfs_core::training::{evaluate, train};
use nfs_core::{stream_scores, ComposedModel, MetricKind, MtsDataset, SelectionReport, TrainConfig};
use serde::Serialize;

use crate::config::{load_synthetic_spec, parse_metric, resolve_output_dir, ExperimentConfig, Overrides};
use crate::error::{CliError, EXIT_OK};
use crate::manifest::RunOutput;

pub use crate::config::{DatasetSource, OUTPUT_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "nfs", version, about = "Neural feature selection for multivariate time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (CSV plus `.meta` sidecar)
    Generate {
        /// Synthetic spec, or an experiment config with a synthetic dataset
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the generator seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Train one model on the full feature set and save a checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Full selection run: train, rank, select, retrain compact, compare
    Select {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Also search every k-subset exhaustively
        #[arg(long)]
        oracle: bool,
        /// Also run the correlation-filter baseline
        #[arg(long)]
        baseline: bool,
    },
    /// Exhaustive best-subset search (small stream counts only)
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a saved checkpoint on the test split of a config's dataset
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_metric)]
        metric: Option<MetricKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a stored selection report
    Report {
        /// `report.json`, or a directory containing one
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Table,
    Json,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate { spec, out, seed, seq_len } => generate(&spec, out, seed, seq_len),
        Command::Train { config, overrides } => train_cmd(&config, &overrides),
        Command::Select { config, overrides, oracle, baseline } => select(&config, &overrides, oracle, baseline),
        Command::Oracle { config, overrides } => oracle_cmd(&config, &overrides),
        Command::Eval { config, checkpoint, metric, out } => eval_cmd(&config, &checkpoint, metric, out),
        Command::Report { input, format } => report(&input, format),
    }
}

/// Loaded config, dataset and resolved pipeline settings for one run.
struct Experiment {
    config: ExperimentConfig,
    dataset: MtsDataset,
    pipeline: PipelineConfig,
}

impl Experiment {
    fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = ExperimentConfig::load(path)?;
        config.apply(overrides)?;
        config.validate()?;
        let dataset = config.load_dataset()?;
        let pipeline = config.pipeline().resolve(&dataset)?;
        Ok(Experiment { config, dataset, pipeline })
    }

    fn first_seed(&self) -> u64 {
        *self.pipeline.seeds.iter().min().expect("validated non-empty")
    }

    fn resolved(&self) -> ExperimentConfig {
        self.config.resolved(&self.pipeline)
    }

    fn output(&self) -> Result<RunOutput, CliError> {
        RunOutput::create(&self.config.output_dir())
    }

    fn write_config(&self, out: &mut RunOutput) -> Result<(), CliError> {
        out.write("config.toml", self.resolved().to_toml()?.as_bytes())?;
        Ok(())
    }
}

fn to_json(value: &impl Serialize) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::config(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn generate(spec_path: &Path, out: Option<PathBuf>, seed: Option<u64>, seq_len: Option<usize>) -> Result<(), CliError> {
    let mut spec = load_synthetic_spec(spec_path)?;
    seed.inspect(|&s| spec.seed = s);
    seq_len.inspect(|&l| spec.seq_len = l);
    spec.validate()?;
    let dataset = nfs_core::data::generate_synthetic(&spec)?;

    let mut run = RunOutput::create(&resolve_output_dir(out.as_deref()))?;
    let csv_path = run.dir().join("dataset.csv");
    write_dataset(&dataset, &csv_path)?;
    run.record("dataset.csv")?;
    run.record(&meta_path(Path::new("dataset.csv")).to_string_lossy())?;
    let spec_text = toml::to_string(&spec).map_err(|e| CliError::config(e.to_string()))?;
    run.write("spec.toml", spec_text.as_bytes())?;
    let manifest = run.finish("generate", vec![spec.seed], &spec)?;
    println!(
        "wrote {} samples x {} steps x {} streams (planted {:?}) to {}",
        dataset.len(),
        dataset.seq_len(),
        dataset.streams(),
        spec.planted(),
        csv_path.display()
    );
    println!("manifest {}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    metric: MetricKind,
    train: f64,
    test: f64,
    scores: Vec<f64>,
    ranking: Vec<usize>,
}

fn train_cmd(path: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let exp = Experiment::load(path, overrides)?;
    let seed = exp.first_seed();
    let (tr, te) = prepare(&exp.dataset, &exp.pipeline)?;
    let mut model = ComposedModel::build(exp.pipeline.nfs.clone(), exp.pipeline.head.clone(), tr.seq_len(), seed)?;
    let train_config = TrainConfig { seed, ..exp.pipeline.train.clone() };
    let history = train(&mut model, &tr, Some(&te), &train_config)?;
    let metric = train_config.metric;
    let train_metric = evaluate(&mut model, &tr, metric)?;
    let test_metric = evaluate(&mut model, &te, metric)?;
    let scores = stream_scores(&model.nfs);

    let mut run = exp.output()?;
    run.write("model.ckpt", &checkpoint::to_bytes(&model, seed)?)?;
    run.write("history.csv", history.to_csv().as_bytes())?;
    let summary = TrainSummary {
        seed,
        metric,
        train: train_metric.value,
        test: test_metric.value,
        ranking: scores.ranking(),
        scores: scores.scores.clone(),
    };
    run.write("metrics.json", &to_json(&summary)?)?;
    exp.write_config(&mut run)?;
    let manifest = run.finish("train", vec![seed], &exp.resolved())?;

    println!("seed {seed}: train {metric} {:.6}, test {metric} {:.6}", train_metric.value, test_metric.value);
    let names = exp.dataset.feature_names();
    for &j in summary.ranking.iter().take(exp.pipeline.k_selected) {
        println!("  {:<16} {:.6}", names[j], summary.scores[j]);
    }
    println!("manifest {}", manifest.display());
    Ok(())
}

fn select(path: &Path, overrides: &Overrides, with_oracle: bool, with_baseline: bool) -> Result<(), CliError> {
    let exp = Experiment::load(path, overrides)?;
    let report = run_selection(&exp.dataset, &exp.pipeline, with_oracle, with_baseline)?;
    let mut run = exp.output()?;
    run.write("report.json", report.to_json()?.as_bytes())?;
    run.write("report.csv", report.table().as_bytes())?;
    run.write("report.txt", report.render().as_bytes())?;
    exp.write_config(&mut run)?;
    let mut seeds = exp.pipeline.seeds.clone();
    seeds.sort_unstable();
    let manifest = run.finish("select", seeds, &exp.resolved())?;
    print!("{}", report.render());
    for (stage, t) in &report.timings {
        eprintln!("{stage}: {:.1}s", t.as_secs_f64());
    }
    println!("manifest {}", manifest.display());
    Ok(())
}

fn oracle_cmd(path: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let exp = Experiment::load(path, overrides)?;
    let seed = exp.first_seed();
    let (tr, te) = prepare(&exp.dataset, &exp.pipeline)?;
    let result = exhaustive_oracle(&tr, &te, &exp.pipeline, exp.pipeline.k_selected, seed)?;
    let mut table = String::from("subset,metric,value,seed\n");
    for (s, v) in &result.subsets {
        let subset: Vec<String> = s.iter().map(|j| j.to_string()).collect();
        table.push_str(&format!("{},{},{},{}\n", subset.join(";"), result.best.kind, v, seed));
    }
    let mut run = exp.output()?;
    run.write("oracle.json", &to_json(&result)?)?;
    run.write("oracle.csv", table.as_bytes())?;
    exp.write_config(&mut run)?;
    let manifest = run.finish("oracle", vec![seed], &exp.resolved())?;
    println!(
        "best of {} subsets: {:?} with {} {:.6}",
        result.subsets.len(),
        result.best_mask,
        result.best.kind,
        result.best.value
    );
    println!("manifest {}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    checkpoint_seed: u64,
    samples: usize,
    metric: MetricKind,
    value: f64,
}

fn eval_cmd(path: &Path, ckpt: &Path, metric: Option<MetricKind>, out: Option<PathBuf>) -> Result<(), CliError> {
    let overrides = Overrides { out, metric, ..Overrides::default() };
    let exp = Experiment::load(path, &overrides)?;
    let mut loaded = checkpoint::load(ckpt)?;
    let (_, te) = prepare(&exp.dataset, &exp.pipeline)?;
    if loaded.model.streams() != te.streams() || loaded.model.seq_len != te.seq_len() {
        return Err(CliError::data(format!(
            "checkpoint expects {} streams x {} steps, dataset has {} x {}",
            loaded.model.streams(),
            loaded.model.seq_len,
            te.streams(),
            te.seq_len()
        )));
    }
    let kind = exp.pipeline.train.metric;
    let value = evaluate(&mut loaded.model, &te, kind)?.value;
    let summary = EvalSummary { checkpoint_seed: loaded.seed, samples: te.len(), metric: kind, value };
    let mut run = exp.output()?;
    run.write("eval.json", &to_json(&summary)?)?;
    let manifest = run.finish("eval", vec![loaded.seed], &exp.resolved())?;
    println!("{kind} {value:.6} on {} test samples", te.len());
    println!("manifest {}", manifest.display());
    Ok(())
}

fn report(input: &Path, format: ReportFormat) -> Result<(), CliError> {
    let path = if input.is_dir() { input.join("report.json") } else { input.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let report = SelectionReport::from_json(&text)?;
    match format {
        ReportFormat::Text => print!("{}", report.render()),
        ReportFormat::Table => print!("{}", report.table()),
        ReportFormat::Json => print!("{}", report.to_json()?),
    }
    Ok(())
}
