//! Multivariate time-series datasets and their preparation.

mod csv_io;
mod synthetic;

pub use csv_io::{load_csv, meta_path, read_dataset, read_meta, write_csv, write_dataset, DatasetMeta};
pub use synthetic::{generate_synthetic, planted_readout, RedundantStream, SignalFamily, SyntheticSpec, TargetRule};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression(Vec<f64>),
    Classes { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(v) => v.len(),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Targets::Regression(_) => TaskKind::Regression,
            Targets::Classes { .. } => TaskKind::Classification,
        }
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Regression(v) => Targets::Regression(rows.iter().map(|&r| v[r]).collect()),
            Targets::Classes { labels, classes } => {
                Targets::Classes { labels: rows.iter().map(|&r| labels[r]).collect(), classes: *classes }
            }
        }
    }

    /// Targets as reals; class labels are converted to their index.
    pub fn as_f64(&self) -> Vec<f64> {
        match self {
            Targets::Regression(v) => v.clone(),
            Targets::Classes { labels, .. } => labels.iter().map(|&l| l as f64).collect(),
        }
    }
}

/// `N` samples of `T × d` sequences with one target each.
#[derive(Clone, Debug, PartialEq)]
pub struct MtsDataset {
    x: Tensor,
    targets: Targets,
    feature_names: Vec<String>,
    /// Ground-truth informative streams, when known.
    pub planted: Option<Vec<usize>>,
}

impl MtsDataset {
    pub fn new(x: Tensor, targets: Targets, feature_names: Vec<String>) -> Result<Self> {
        let &[n, _, d] = x.shape() else {
            return Err(Error::Data(format!("inputs must be [N, T, d], got {:?}", x.shape())));
        };
        if targets.len() != n {
            return Err(Error::Data(format!("{} targets for {n} samples", targets.len())));
        }
        if feature_names.len() != d {
            return Err(Error::Data(format!("{} feature names for {d} streams", feature_names.len())));
        }
        if !x.is_finite() {
            return Err(Error::Data("inputs contain NaN or infinite values".into()));
        }
        match &targets {
            Targets::Regression(v) if v.iter().any(|t| !t.is_finite()) => {
                return Err(Error::Data("targets contain NaN or infinite values".into()));
            }
            Targets::Classes { labels, classes } => {
                if *classes < 2 {
                    return Err(Error::Data("classification needs at least two classes".into()));
                }
                if let Some(&label) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::LabelOutOfRange { label, classes: *classes });
                }
            }
            _ => {}
        }
        let mut x = x;
        x.set_requires_grad(false);
        Ok(MtsDataset { x, targets, feature_names, planted: None })
    }

    pub fn default_names(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("f{j}")).collect()
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn task(&self) -> TaskKind {
        self.targets.task()
    }

    pub fn class_count(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { classes, .. } => Some(classes),
            Targets::Regression(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn streams(&self) -> usize {
        self.x.shape()[2]
    }

    /// Samples at `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> MtsDataset {
        MtsDataset {
            x: self.x.select_rows(rows),
            targets: self.targets.select(rows),
            feature_names: self.feature_names.clone(),
            planted: self.planted.clone(),
        }
    }

    /// A copy holding only the listed streams. Planted indices are remapped
    /// and dropped if they fall outside the selection.
    pub fn select_streams(&self, streams: &[usize]) -> Result<MtsDataset> {
        if streams.is_empty() {
            return Err(Error::Data("cannot select zero streams".into()));
        }
        if let Some(&bad) = streams.iter().find(|&&j| j >= self.streams()) {
            return Err(Error::Data(format!("stream {bad} out of range for {} streams", self.streams())));
        }
        let planted = self
            .planted
            .as_ref()
            .map(|s| s.iter().filter_map(|p| streams.iter().position(|q| q == p)).collect());
        Ok(MtsDataset {
            x: self.x.select_last_axis(streams),
            targets: self.targets.clone(),
            feature_names: streams.iter().map(|&j| self.feature_names[j].clone()).collect(),
            planted,
        })
    }

    pub fn class_counts(&self) -> Option<Vec<usize>> {
        let Targets::Classes { labels, classes } = &self.targets else { return None };
        let mut counts = vec![0; *classes];
        labels.iter().for_each(|&l| counts[l] += 1);
        Some(counts)
    }

    /// Value of stream `j` at `(sample, t)`.
    pub fn value(&self, sample: usize, t: usize, j: usize) -> f64 {
        self.x.at(&[sample, t, j])
    }
}

/// Supervised windows over one long series.
///
/// `series` is `[L, d]`; window `i` covers rows `i..i + len` and is labelled
/// with `target[i + len - 1 + horizon]`.
pub fn window(series: &Tensor, target: &[f64], len: usize, horizon: usize) -> Result<MtsDataset> {
    let &[total, d] = series.shape() else {
        return Err(Error::Data(format!("series must be [L, d], got {:?}", series.shape())));
    };
    if target.len() != total {
        return Err(Error::Data(format!("{} target values for a series of length {total}", target.len())));
    }
    if horizon == 0 {
        return Err(Error::Data("horizon must be at least 1 so the target lies after the window".into()));
    }
    if len == 0 || total < len + horizon {
        return Err(Error::Data(format!("series of length {total} too short for window {len} + horizon {horizon}")));
    }
    let count = total - len - horizon + 1;
    let mut data = Vec::with_capacity(count * len * d);
    let mut y = Vec::with_capacity(count);
    for i in 0..count {
        data.extend_from_slice(&series.data()[i * d..(i + len) * d]);
        y.push(target[i + len - 1 + horizon]);
    }
    let x = Tensor::new(vec![count, len, d], data)?;
    MtsDataset::new(x, Targets::Regression(y), MtsDataset::default_names(d))
}

fn test_count(n: usize, test_fraction: f64) -> Result<usize> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Data(format!("split of {n} samples at fraction {test_fraction} leaves an empty side")));
    }
    Ok(n_test)
}

/// Seeded random split into `(train, test)`; each side keeps original order.
pub fn split(dataset: &MtsDataset, test_fraction: f64, seed: u64) -> Result<(MtsDataset, MtsDataset)> {
    let n_test = test_count(dataset.len(), test_fraction)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, train) = order.split_at_mut(n_test);
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(train), dataset.subset(test)))
}

/// The last `test_fraction` of samples become the test side.
pub fn split_chronological(dataset: &MtsDataset, test_fraction: f64) -> Result<(MtsDataset, MtsDataset)> {
    let n = dataset.len();
    let n_test = test_count(n, test_fraction)?;
    let train: Vec<usize> = (0..n - n_test).collect();
    let test: Vec<usize> = (n - n_test..n).collect();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Per-feature affine normalization fitted on a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Divisors; a zero-variance feature gets 1.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(dataset: &MtsDataset) -> Standardizer {
        let d = dataset.streams();
        let rows = dataset.x().data().chunks_exact(d);
        let count = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for row in rows.clone() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for row in rows {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, dataset: &MtsDataset) -> Result<MtsDataset> {
        let d = dataset.streams();
        if d != self.mean.len() {
            return Err(Error::Data(format!("standardizer fitted on {} streams, dataset has {d}", self.mean.len())));
        }
        let mut out = dataset.clone();
        for row in out.x.data_mut().chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

/// Fits on `train` only and applies to both sides.
pub fn standardize(train: &MtsDataset, test: &MtsDataset) -> Result<(MtsDataset, MtsDataset, Standardizer)> {
    let stats = Standardizer::fit(train);
    Ok((stats.apply(train)?, stats.apply(test)?, stats))
}

/// Duplicates randomly chosen minority-class samples until every class
/// matches the majority count. Added samples are appended.
pub fn balance_classes(dataset: &MtsDataset, seed: u64) -> Result<MtsDataset> {
    let Targets::Classes { labels, classes } = dataset.targets() else {
        return Err(Error::TaskMismatch("class balancing needs a classification dataset".into()));
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); *classes];
    labels.iter().enumerate().for_each(|(i, &l)| members[l].push(i));
    if members.iter().filter(|m| !m.is_empty()).count() < 2 {
        return Err(Error::Data("class balancing needs at least two classes present".into()));
    }
    let majority = members.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<usize> = (0..dataset.len()).collect();
    for class in members.iter().filter(|m| !m.is_empty()) {
        for _ in class.len()..majority {
            rows.push(class[rng.random_range(0..class.len())]);
        }
    }
    Ok(dataset.subset(&rows))
}
