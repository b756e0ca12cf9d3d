//! Experiment configuration files and command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use nfs_core::data::{generate_synthetic, read_dataset};
use nfs_core::pipeline::PipelineConfig;
use nfs_core::{HeadConfig, HeadKind, MetricKind, MtsDataset, NfsConfig, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "NFS_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "nfs-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// CSV file with a `.meta` sidecar next to it.
    Csv(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_k")]
    pub k_selected: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub chronological: bool,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub nfs: NfsConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_k() -> usize {
    PipelineConfig::default().k_selected
}

fn default_seeds() -> Vec<u64> {
    PipelineConfig::default().seeds
}

fn default_test_fraction() -> f64 {
    PipelineConfig::default().test_fraction
}

fn default_true() -> bool {
    true
}

/// Flags shared by the experiment subcommands. Anything set here wins over
/// the config file.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// Output directory [default: config `output_dir`, then $NFS_OUTPUT_DIR, then ./nfs-out]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Single training seed; replaces the config's seed list
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated training seeds
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub k_selected: Option<usize>,
    /// Window length of generated data (synthetic sources only)
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Architecture-penalty coefficient
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<MetricKind>,
    #[arg(long, value_parser = parse_head)]
    pub head: Option<HeadKind>,
}

pub fn parse_metric(s: &str) -> Result<MetricKind, String> {
    match s {
        "rmse" => Ok(MetricKind::Rmse),
        "mae" => Ok(MetricKind::Mae),
        "auc" => Ok(MetricKind::Auc),
        "accuracy" => Ok(MetricKind::Accuracy),
        other => Err(format!("unknown metric `{other}` (expected rmse, mae, auc or accuracy)")),
    }
}

fn parse_head(s: &str) -> Result<HeadKind, String> {
    match s {
        "conv" => Ok(HeadKind::Conv),
        "recurrent" => Ok(HeadKind::Recurrent),
        other => Err(format!("unknown head `{other}` (expected conv or recurrent)")),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))
}

impl ExperimentConfig {
    /// Parses `path`; a relative CSV path is taken relative to the config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read_text(path)?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if let DatasetSource::Csv(csv) = &mut config.dataset {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(k) = o.k_selected {
            self.k_selected = k;
        }
        if let Some(len) = o.seq_len {
            match &mut self.dataset {
                DatasetSource::Synthetic(spec) => spec.seq_len = len,
                DatasetSource::Csv(_) => {
                    return Err(CliError::config("--seq-len only applies to synthetic datasets".to_string()))
                }
            }
        }
        let t = &mut self.train;
        o.epochs.inspect(|&v| t.epochs = v);
        o.batch_size.inspect(|&v| t.batch_size = v);
        o.lr.inspect(|&v| t.lr = v);
        o.gamma.inspect(|&v| t.gamma = v);
        o.metric.inspect(|&v| t.metric = v);
        o.head.inspect(|&v| self.head.kind = v);
        if let Some(out) = &o.out {
            self.output_dir = Some(out.clone());
        }
        Ok(())
    }

    /// Checks the parts that do not depend on the data.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::config("at least one seed is required".to_string()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(CliError::config("seeds must be unique".to_string()));
        }
        match &self.dataset {
            DatasetSource::Csv(path) if !path.is_file() => {
                Err(CliError::config(format!("dataset {} does not exist", path.display())))
            }
            DatasetSource::Synthetic(spec) => spec.validate().map_err(CliError::from),
            DatasetSource::Csv(_) => Ok(()),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        resolve_output_dir(self.output_dir.as_deref())
    }

    pub fn load_dataset(&self) -> Result<MtsDataset, CliError> {
        let ds = match &self.dataset {
            DatasetSource::Synthetic(spec) => generate_synthetic(spec)?,
            DatasetSource::Csv(path) => read_dataset(path)?,
        };
        Ok(ds)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            nfs: self.nfs.clone(),
            head: self.head.clone(),
            train: self.train.clone(),
            k_selected: self.k_selected,
            test_fraction: self.test_fraction,
            split_seed: self.split_seed,
            chronological: self.chronological,
            standardize: self.standardize,
            seeds: self.seeds.clone(),
        }
    }

    /// Copy with the dataset-dependent fields filled in, as written next to
    /// the run's artifacts. The output directory is left out so the file is
    /// the same wherever the run was written.
    pub fn resolved(&self, pipeline: &PipelineConfig) -> ExperimentConfig {
        ExperimentConfig {
            nfs: pipeline.nfs.clone(),
            head: pipeline.head.clone(),
            train: pipeline.train.clone(),
            output_dir: None,
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::config(format!("cannot serialize config: {e}")))
    }
}

/// Flag, then config value, then environment, then the built-in default.
pub fn resolve_output_dir(configured: Option<&Path>) -> PathBuf {
    if let Some(p) = configured {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUTPUT_DIR),
    }
}

/// Reads a generator spec: either a bare [`SyntheticSpec`] or an experiment
/// config whose dataset is synthetic.
pub fn load_synthetic_spec(path: &Path) -> Result<SyntheticSpec, CliError> {
    let text = read_text(path)?;
    let bare = toml::from_str::<SyntheticSpec>(&text);
    if let Ok(spec) = bare {
        return Ok(spec);
    }
    match toml::from_str::<ExperimentConfig>(&text) {
        Ok(ExperimentConfig { dataset: DatasetSource::Synthetic(spec), .. }) => Ok(spec),
        Ok(_) => Err(CliError::config(format!("{}: dataset is not synthetic", path.display()))),
        Err(e) => Err(CliError::config(format!("{}: not a synthetic spec or experiment config: {e}", path.display()))),
    }
}
