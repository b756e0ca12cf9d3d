//! Train full, rank streams, keep the top paths, retrain compact, compare.

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, split_chronological, standardize, MtsDataset, TaskKind};
use crate::error::{Error, Result};
use crate::heads::{compose, ComposedModel, HeadConfig};
use crate::nfs::{select_top_k, stream_scores, CompactMode, FeatureMask, ImportanceScores, NfsConfig, NfsModule};
use crate::training::{evaluate, train, Metric, MetricKind, TrainConfig};

/// Largest subset count the exhaustive oracle will train.
pub const ORACLE_LIMIT: u128 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub nfs: NfsConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub k_selected: usize,
    pub test_fraction: f64,
    /// Split seed; independent of the training seeds.
    pub split_seed: u64,
    /// Keep sample order when splitting (for windowed series).
    pub chronological: bool,
    pub standardize: bool,
    pub seeds: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            nfs: NfsConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            k_selected: 3,
            test_fraction: 0.2,
            split_seed: 0,
            chronological: false,
            standardize: true,
            seeds: vec![0],
        }
    }
}

impl PipelineConfig {
    /// Fills in the dataset-dependent fields (stream count, task, class count)
    /// and checks the rest.
    pub fn resolve(&self, dataset: &MtsDataset) -> Result<PipelineConfig> {
        let mut c = self.clone();
        c.nfs.streams = dataset.streams();
        c.head.task = dataset.task();
        if let Some(k) = dataset.class_count() {
            c.head.classes = k;
        }
        let metric_ok = match dataset.task() {
            TaskKind::Regression => matches!(c.train.metric, MetricKind::Rmse | MetricKind::Mae),
            TaskKind::Classification => matches!(c.train.metric, MetricKind::Auc | MetricKind::Accuracy),
        };
        if !metric_ok {
            return Err(Error::Config(format!("metric {} does not fit a {:?} task", c.train.metric, dataset.task())));
        }
        if c.k_selected == 0 || c.k_selected > dataset.streams() {
            return Err(Error::Config(format!("k_selected = {} must lie in [1, {}]", c.k_selected, dataset.streams())));
        }
        if c.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seeds = c.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != c.seeds.len() {
            return Err(Error::Config("seeds must be unique".into()));
        }
        c.nfs.validate()?;
        c.head.in_channels = c.nfs.n_aggregate;
        c.head.validate(dataset.seq_len())?;
        c.train.validate()?;
        Ok(c)
    }
}

/// Train/test sides after splitting and optional standardization.
pub fn prepare(dataset: &MtsDataset, config: &PipelineConfig) -> Result<(MtsDataset, MtsDataset)> {
    let (tr, te) = if config.chronological {
        split_chronological(dataset, config.test_fraction)?
    } else {
        split(dataset, config.test_fraction, config.split_seed)?
    };
    if config.standardize {
        let (tr, te, _) = standardize(&tr, &te)?;
        Ok((tr, te))
    } else {
        Ok((tr, te))
    }
}

/// Builds and trains a model for `train_set` with the given seed.
pub fn fit(train_set: &MtsDataset, config: &PipelineConfig, seed: u64) -> Result<ComposedModel> {
    let nfs_config = NfsConfig { streams: train_set.streams(), ..config.nfs.clone() };
    let mut model = ComposedModel::build(nfs_config, config.head.clone(), train_set.seq_len(), seed)?;
    train(&mut model, train_set, None, &TrainConfig { seed, ..config.train.clone() })?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub full: Metric,
    pub scores: ImportanceScores,
    /// Streams by descending score.
    pub ranking: Vec<usize>,
    pub mask: Vec<usize>,
    pub compact: Metric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Spread {
        Spread {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub seed: u64,
    pub best_mask: Vec<usize>,
    pub best: Metric,
    /// Every evaluated subset in lexicographic order.
    pub subsets: Vec<(Vec<usize>, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub mask: Vec<usize>,
    pub metric: Metric,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionReport {
    pub samples: usize,
    pub seq_len: usize,
    pub streams: usize,
    pub feature_names: Vec<String>,
    pub planted: Option<Vec<usize>>,
    pub k_selected: usize,
    pub metric: MetricKind,
    pub runs: Vec<SeedRun>,
    pub full: Spread,
    pub compact: Spread,
    /// Per-stream score averaged over seeds.
    pub mean_scores: Vec<f64>,
    /// Top streams by mean score.
    pub consensus: Vec<usize>,
    pub oracle: Option<OracleResult>,
    pub baseline: Option<BaselineResult>,
    /// Wall-clock durations; kept out of the serialized report so repeated
    /// runs produce identical files.
    #[serde(skip)]
    pub timings: Vec<(String, Duration)>,
}

/// One seed of the selection schema on prepared train/test sides.
pub fn run_seed(train_set: &MtsDataset, test_set: &MtsDataset, config: &PipelineConfig, seed: u64) -> Result<SeedRun> {
    let metric = config.train.metric;
    let mut full = fit(train_set, config, seed).map_err(|e| e.in_stage("train full model"))?;
    let full_metric = evaluate(&mut full, test_set, metric).map_err(|e| e.in_stage("evaluate full model"))?;
    let scores = stream_scores(&full.nfs);
    let mask = select_top_k(&scores, config.k_selected).map_err(|e| e.in_stage("select features"))?;
    let compact_metric = retrain_subset(train_set, test_set, &full.nfs, &mask, config, seed)
        .map_err(|e| e.in_stage("retrain compact model"))?;
    Ok(SeedRun {
        seed,
        full: full_metric,
        ranking: scores.ranking(),
        scores,
        mask: mask.indices().to_vec(),
        compact: compact_metric,
    })
}

/// Fresh compact model on the column-restricted data, trained and scored.
fn retrain_subset(
    train_set: &MtsDataset,
    test_set: &MtsDataset,
    full: &NfsModule,
    mask: &FeatureMask,
    config: &PipelineConfig,
    seed: u64,
) -> Result<Metric> {
    let tr = train_set.select_streams(mask.indices())?;
    let te = test_set.select_streams(mask.indices())?;
    let nfs = full.compact(mask, CompactMode::Fresh, seed)?;
    let mut model = compose(nfs, config.head.clone(), tr.seq_len(), seed.wrapping_add(0x9E37_79B9_7F4A_7C15))?;
    train(&mut model, &tr, None, &TrainConfig { seed, ..config.train.clone() })?;
    evaluate(&mut model, &te, config.train.metric)
}

/// Runs every seed (concurrently) and assembles the report in seed order.
pub fn run_pipeline(dataset: &MtsDataset, config: &PipelineConfig) -> Result<SelectionReport> {
    let config = config.resolve(dataset)?;
    let started = Instant::now();
    let (tr, te) = prepare(dataset, &config).map_err(|e| e.in_stage("prepare data"))?;
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    let runs: Vec<SeedRun> =
        seeds.par_iter().map(|&s| run_seed(&tr, &te, &config, s)).collect::<Result<_>>()?;
    let mut report = assemble(dataset, &config, runs)?;
    report.timings.push(("pipeline".into(), started.elapsed()));
    Ok(report)
}

fn assemble(dataset: &MtsDataset, config: &PipelineConfig, runs: Vec<SeedRun>) -> Result<SelectionReport> {
    let d = dataset.streams();
    let mut mean_scores = vec![0.0; d];
    for r in &runs {
        mean_scores.iter_mut().zip(&r.scores.scores).for_each(|(m, s)| *m += s);
    }
    mean_scores.iter_mut().for_each(|m| *m /= runs.len() as f64);
    let consensus = select_top_k(&ImportanceScores::from_scores(mean_scores.clone()), config.k_selected)?;
    let full: Vec<f64> = runs.iter().map(|r| r.full.value).collect();
    let compact: Vec<f64> = runs.iter().map(|r| r.compact.value).collect();
    Ok(SelectionReport {
        samples: dataset.len(),
        seq_len: dataset.seq_len(),
        streams: d,
        feature_names: dataset.feature_names().to_vec(),
        planted: dataset.planted.clone(),
        k_selected: config.k_selected,
        metric: config.train.metric,
        full: Spread::of(&full),
        compact: Spread::of(&compact),
        runs,
        mean_scores,
        consensus: consensus.indices().to_vec(),
        oracle: None,
        baseline: None,
        timings: Vec::new(),
    })
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    if k == 0 || k > n {
        return out;
    }
    loop {
        out.push(current.clone());
        let Some(i) = (0..k).rev().find(|&i| current[i] < n - k + i) else { break };
        current[i] += 1;
        for j in i + 1..k {
            current[j] = current[j - 1] + 1;
        }
    }
    out
}

/// Trains a fresh model on every `k`-subset with one seed and returns the
/// best. Ties go to the lexicographically smallest subset.
pub fn exhaustive_oracle(
    train_set: &MtsDataset,
    test_set: &MtsDataset,
    config: &PipelineConfig,
    k_selected: usize,
    seed: u64,
) -> Result<OracleResult> {
    let d = train_set.streams();
    let count = binomial(d, k_selected);
    if k_selected == 0 || k_selected > d {
        return Err(Error::Config(format!("k_selected = {k_selected} must lie in [1, {d}]")));
    }
    if count > ORACLE_LIMIT {
        return Err(Error::Config(format!("C({d}, {k_selected}) = {count} subsets exceeds the oracle limit {ORACLE_LIMIT}")));
    }
    let metric = config.train.metric;
    let mut scored: Vec<(Vec<usize>, f64)> = subsets(d, k_selected)
        .into_par_iter()
        .map(|s| {
            let tr = train_set.select_streams(&s)?;
            let te = test_set.select_streams(&s)?;
            let mut model = fit(&tr, config, seed)?;
            Ok((s, evaluate(&mut model, &te, metric)?.value))
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| e.in_stage("oracle subset"))?;
    scored.sort_by(|a, b| a.0.cmp(&b.0));
    let (best_mask, best) = scored
        .iter()
        .fold(None::<&(Vec<usize>, f64)>, |best, cand| match best {
            Some(b) if !metric.better(cand.1, b.1) => Some(b),
            _ => Some(cand),
        })
        .cloned()
        .expect("at least one subset");
    Ok(OracleResult { seed, best_mask, best: Metric { kind: metric, value: best }, subsets: scored })
}

/// Ranks streams by |Pearson r| between each sample's stream mean and the
/// target, and keeps the top `k_selected`.
pub fn correlation_filter(dataset: &MtsDataset, k_selected: usize) -> Result<FeatureMask> {
    let y = dataset.targets().as_f64();
    let n = y.len() as f64;
    let y_mean = y.iter().sum::<f64>() / n;
    let y_var: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    if y_var == 0.0 {
        return Err(Error::Data("target has zero variance; correlation is undefined".into()));
    }
    let (len, d) = (dataset.seq_len(), dataset.streams());
    let scores = (0..d)
        .map(|j| {
            let means: Vec<f64> =
                (0..dataset.len()).map(|i| (0..len).map(|t| dataset.value(i, t, j)).sum::<f64>() / len as f64).collect();
            pearson(&means, &y, y_mean, y_var).abs()
        })
        .collect();
    select_top_k(&ImportanceScores::from_scores(scores), k_selected)
}

fn pearson(x: &[f64], y: &[f64], y_mean: f64, y_var: f64) -> f64 {
    let n = x.len() as f64;
    let x_mean = x.iter().sum::<f64>() / n;
    let x_var: f64 = x.iter().map(|v| (v - x_mean).powi(2)).sum();
    if x_var == 0.0 {
        return 0.0;
    }
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - x_mean) * (b - y_mean)).sum();
    cov / (x_var * y_var).sqrt()
}

/// Trains the filter baseline's subset with `seed` and scores it.
pub fn baseline_run(train_set: &MtsDataset, test_set: &MtsDataset, config: &PipelineConfig, seed: u64) -> Result<BaselineResult> {
    let mask = correlation_filter(train_set, config.k_selected)?;
    let tr = train_set.select_streams(mask.indices())?;
    let te = test_set.select_streams(mask.indices())?;
    let mut model = fit(&tr, config, seed)?;
    let metric = evaluate(&mut model, &te, config.train.metric)?;
    Ok(BaselineResult { mask: mask.indices().to_vec(), metric, seed })
}

/// Full report: pipeline seeds plus, optionally, oracle and baseline.
pub fn run_selection(dataset: &MtsDataset, config: &PipelineConfig, with_oracle: bool, with_baseline: bool) -> Result<SelectionReport> {
    let mut report = run_pipeline(dataset, config)?;
    let config = config.resolve(dataset)?;
    let (tr, te) = prepare(dataset, &config)?;
    let first_seed = *config.seeds.iter().min().expect("validated non-empty");
    if with_oracle {
        let started = Instant::now();
        report.oracle = Some(exhaustive_oracle(&tr, &te, &config, config.k_selected, first_seed).map_err(|e| e.in_stage("oracle"))?);
        report.timings.push(("oracle".into(), started.elapsed()));
    }
    if with_baseline {
        let started = Instant::now();
        report.baseline = Some(baseline_run(&tr, &te, &config, first_seed).map_err(|e| e.in_stage("correlation filter"))?);
        report.timings.push(("baseline".into(), started.elapsed()));
    }
    Ok(report)
}

impl SelectionReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<SelectionReport> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per model variant: `variant,metric,value,seed`.
    pub fn table(&self) -> String {
        let mut out = String::from("variant,metric,value,seed\n");
        for r in &self.runs {
            out.push_str(&format!("full,{},{},{}\n", r.full.kind, r.full.value, r.seed));
            out.push_str(&format!("nfs_selected,{},{},{}\n", r.compact.kind, r.compact.value, r.seed));
        }
        if let Some(o) = &self.oracle {
            out.push_str(&format!("oracle,{},{},{}\n", o.best.kind, o.best.value, o.seed));
        }
        if let Some(b) = &self.baseline {
            out.push_str(&format!("correlation_filter,{},{},{}\n", b.metric.kind, b.metric.value, b.seed));
        }
        out
    }

    /// Plain-text summary for terminals.
    pub fn render(&self) -> String {
        let name = |j: &usize| self.feature_names.get(*j).cloned().unwrap_or_else(|| j.to_string());
        let names = |m: &[usize]| m.iter().map(name).collect::<Vec<_>>().join(", ");
        let mut out = format!(
            "samples {}  length {}  streams {}  k_selected {}\n",
            self.samples, self.seq_len, self.streams, self.k_selected
        );
        if let Some(p) = &self.planted {
            out.push_str(&format!("planted     {}\n", names(p)));
        }
        out.push_str(&format!("consensus   {}\n", names(&self.consensus)));
        out.push_str(&format!("{:<20} {:>12} {:>12} {:>12}\n", "variant", "mean", "min", "max"));
        for (label, s) in [("full feature set", self.full), ("selected by NFS", self.compact)] {
            out.push_str(&format!("{:<20} {:>12.6} {:>12.6} {:>12.6}\n", label, s.mean, s.min, s.max));
        }
        if let Some(o) = &self.oracle {
            out.push_str(&format!("{:<20} {:>12.6}  [{}]\n", "exhaustive oracle", o.best.value, names(&o.best_mask)));
        }
        if let Some(b) = &self.baseline {
            out.push_str(&format!("{:<20} {:>12.6}  [{}]\n", "correlation filter", b.metric.value, names(&b.mask)));
        }
        out.push_str(&format!("metric: {}\n", self.metric));
        for r in &self.runs {
            out.push_str(&format!("seed {:>4}: mask [{}]\n", r.seed, names(&r.mask)));
        }
        out
    }

    pub fn write(&self, json_path: &Path, table_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))?;
        std::fs::write(table_path, self.table()).map_err(|e| Error::io(table_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec, Targets};
    use crate::heads::HeadKind;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn subset_enumeration() {
        let s = subsets(6, 2);
        assert_eq!(s.len(), 15);
        assert_eq!(binomial(6, 2), 15);
        assert_eq!(s[0], vec![0, 1]);
        assert_eq!(s[14], vec![4, 5]);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsets(4, 4), vec![vec![0, 1, 2, 3]]);
        assert_eq!(binomial(19, 5), 11628);
    }

    #[test]
    fn oracle_guard() {
        let ds = generate_synthetic(&SyntheticSpec { samples: 20, seq_len: 6, streams: 10, ..Default::default() }).unwrap();
        let config = PipelineConfig::default().resolve(&ds).unwrap();
        let err = exhaustive_oracle(&ds, &ds, &config, 3, 0).unwrap_err();
        assert!(err.to_string().contains("120"), "{err}");
    }

    #[test]
    fn correlation_filter_finds_exact_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[50, 4, 5], 1.0, &mut rng);
        let y: Vec<f64> = (0..50).map(|i| (0..4).map(|t| x.at(&[i, t, 3])).sum::<f64>() / 4.0).collect();
        let ds = MtsDataset::new(x, Targets::Regression(y), MtsDataset::default_names(5)).unwrap();
        assert_eq!(correlation_filter(&ds, 1).unwrap().indices(), &[3]);
    }

    #[test]
    fn correlation_filter_null_distribution() {
        let n = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[n, 3, 6], 1.0, &mut rng);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ds = MtsDataset::new(x, Targets::Regression(y.clone()), MtsDataset::default_names(6)).unwrap();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let y_var: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
        let bound = 3.0 / (n as f64).sqrt();
        for j in 0..6 {
            let means: Vec<f64> = (0..n).map(|i| (0..3).map(|t| ds.value(i, t, j)).sum::<f64>() / 3.0).collect();
            assert!(pearson(&means, &y, y_mean, y_var).abs() < bound);
        }
    }

    #[test]
    fn correlation_filter_rejects_constant_target() {
        let ds = MtsDataset::new(Tensor::zeros(&[3, 2, 2]), Targets::Regression(vec![1.0; 3]), MtsDataset::default_names(2)).unwrap();
        assert!(correlation_filter(&ds, 1).is_err());
    }

    #[test]
    fn config_resolution() {
        let ds = generate_synthetic(&SyntheticSpec { samples: 20, seq_len: 6, streams: 5, informative: vec![1], ..Default::default() }).unwrap();
        let c = PipelineConfig::default().resolve(&ds).unwrap();
        assert_eq!(c.nfs.streams, 5);
        assert!(PipelineConfig { k_selected: 6, ..Default::default() }.resolve(&ds).is_err());
        assert!(PipelineConfig { seeds: vec![1, 1], ..Default::default() }.resolve(&ds).is_err());
        assert!(PipelineConfig { seeds: vec![], ..Default::default() }.resolve(&ds).is_err());
        let mut auc = PipelineConfig::default();
        auc.train.metric = MetricKind::Auc;
        assert!(auc.resolve(&ds).is_err());
    }

    fn quick_config(seeds: Vec<u64>, k: usize) -> PipelineConfig {
        PipelineConfig {
            nfs: NfsConfig { n_aggregate: 8, ..Default::default() },
            head: HeadConfig { kind: HeadKind::Recurrent, hidden: 4, ..Default::default() },
            train: TrainConfig { epochs: 2, batch_size: 16, ..Default::default() },
            k_selected: k,
            seeds,
            ..Default::default()
        }
    }

    #[test]
    fn pipeline_is_deterministic_and_well_formed() {
        let spec = SyntheticSpec { samples: 60, seq_len: 6, streams: 5, informative: vec![0, 3], ..Default::default() };
        let ds = generate_synthetic(&spec).unwrap();
        let config = quick_config(vec![3, 1], 2);
        let a = run_selection(&ds, &config, false, true).unwrap();
        let b = run_selection(&ds, &config, false, true).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.table(), b.table());
        assert_eq!(a.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 3]);
        for r in &a.runs {
            assert_eq!(r.mask.len(), 2);
            assert!(r.mask.iter().all(|&j| j < 5));
            assert_eq!(r.full.kind, MetricKind::Rmse);
        }
        let json = a.to_json().unwrap();
        assert_eq!(SelectionReport::from_json(&json).unwrap().to_json().unwrap(), json);
        assert_eq!(a.table().lines().count(), 1 + 2 * 2 + 1);
    }

    #[test]
    fn selecting_every_stream_keeps_identity_mask() {
        let spec = SyntheticSpec { samples: 40, seq_len: 6, streams: 3, informative: vec![1], ..Default::default() };
        let ds = generate_synthetic(&spec).unwrap();
        let report = run_pipeline(&ds, &quick_config(vec![0], 3)).unwrap();
        assert_eq!(report.runs[0].mask, vec![0, 1, 2]);
        assert_eq!(report.consensus, vec![0, 1, 2]);
    }

    #[test]
    fn stage_errors_are_annotated() {
        let spec = SyntheticSpec { samples: 40, seq_len: 6, streams: 3, informative: vec![1], ..Default::default() };
        let ds = generate_synthetic(&spec).unwrap();
        let mut config = quick_config(vec![0], 2);
        config.train.lr = 1e12;
        match run_pipeline(&ds, &config) {
            Err(Error::Stage { stage, .. }) => assert!(stage.contains("model")),
            Ok(_) => {}
            Err(e) => panic!("unexpected {e}"),
        }
    }
}
