//! Penalized objective, mini-batch training loop, and evaluation.

mod metrics;

pub use metrics::{accuracy, argmax, auc, mae, rmse, Metric, MetricKind};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, cross_entropy_loss, mse_loss, reshape, Mode, Tape, Var};
use crate::data::{MtsDataset, TaskKind, Targets};
use crate::error::{Error, Result};
use crate::heads::ComposedModel;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Scales below this magnitude count as switched off in the sparsity summary.
pub const SPARSITY_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Architecture-penalty coefficient on every BN scale.
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Drives initialization and batch shuffling.
    pub seed: u64,
    pub metric: MetricKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { gamma: 0.001, epochs: 20, batch_size: 64, lr: 1e-3, seed: 0, metric: MetricKind::Rmse }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma = {} must be non-negative", self.gamma)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// Tape nodes of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub task: Var,
    /// `γ · Σ|α|`.
    pub architecture: Var,
    /// Layer regularizers on temporal and aggregating kernels.
    pub weights: Var,
}

pub fn check_task(model: &ComposedModel, targets: &Targets) -> Result<()> {
    match (model.task(), targets) {
        (TaskKind::Regression, Targets::Regression(_)) => Ok(()),
        (TaskKind::Classification, Targets::Classes { classes, .. }) if *classes == model.head_config.classes => Ok(()),
        (task, t) => Err(Error::TaskMismatch(format!("{task:?} model given {:?} targets", t.task()))),
    }
}

fn task_loss(tape: &mut Tape, output: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Regression(y) => {
            let pred = reshape(tape, output, vec![y.len()])?;
            let target = tape.constant(vec![y.len()], y.clone());
            mse_loss(tape, pred, target)
        }
        Targets::Classes { labels, .. } => cross_entropy_loss(tape, output, labels),
    }
}

/// Task loss plus `γ·Σ|α|` plus the layer regularizers, recorded on `tape`.
pub fn objective(
    model: &mut ComposedModel,
    tape: &mut Tape,
    vars: &[Var],
    x: &Tensor,
    targets: &Targets,
    gamma: f64,
) -> Result<Objective> {
    check_task(model, targets)?;
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let xv = tape.constant_tensor(x);
    let trace = model.forward_bound(tape, vars, xv, Mode::Train, None)?;
    let task = task_loss(tape, trace.output, targets)?;
    let split = model.nfs.param_count();
    let architecture = model.nfs.scale_penalty(tape, &vars[..split], gamma);
    let weights = model.nfs.weight_penalty(tape, &vars[..split])?;
    let total = autodiff::add(tape, task, architecture)?;
    let total = autodiff::add(tape, total, weights)?;
    Ok(Objective { total, task, architecture, weights })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean objective over the epoch's batches.
    pub loss: f64,
    /// `γ·Σ|α|` at the end of the epoch.
    pub penalty: f64,
    pub val_metric: Option<f64>,
    /// Fraction of BN scales with `|α| <` [`SPARSITY_THRESHOLD`].
    pub sparsity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,penalty,val_metric,sparsity_fraction\n");
        for r in &self.records {
            let val = r.val_metric.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.loss, r.penalty, val, r.sparsity));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn scale_summary(model: &ComposedModel, gamma: f64) -> (f64, f64) {
    let alpha = model.nfs.bn_scale().data();
    let l1: f64 = alpha.iter().map(|a| a.abs()).sum();
    let off = alpha.iter().filter(|a| a.abs() < SPARSITY_THRESHOLD).count();
    (gamma * l1, off as f64 / alpha.len() as f64)
}

/// Mini-batch Adam over seeded shuffles. The validation set, when given, is
/// scored after every epoch and never influences training.
pub fn train(
    model: &mut ComposedModel,
    train_set: &MtsDataset,
    val_set: Option<&MtsDataset>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    check_task(model, train_set.targets())?;
    if train_set.streams() != model.streams() || train_set.seq_len() != model.seq_len {
        return Err(Error::dim(
            "train",
            format!(
                "dataset is T={} d={}, model expects T={} d={}",
                train_set.seq_len(),
                train_set.streams(),
                model.seq_len,
                model.streams()
            ),
        ));
    }
    if train_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam());
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut weighted_loss = 0.0;
        for (batch, rows) in order.chunks(config.batch_size).enumerate() {
            let x = train_set.x().select_rows(rows);
            let targets = train_set.targets().select(rows);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let obj = objective(model, &mut tape, &vars, &x, &targets, config.gamma)?;
            let loss = tape.item(obj.total);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            weighted_loss += loss * rows.len() as f64;
            tape.backward(obj.total)?;
            model.zero_grads();
            for (v, (_, p)) in vars.iter().zip(model.params_mut()) {
                if let Some(g) = tape.grad(*v) {
                    p.accumulate_grad(g);
                }
            }
            adam.step(model.params_mut())?;
        }
        let val_metric = match val_set {
            Some(v) => Some(evaluate(model, v, config.metric)?.value),
            None => None,
        };
        let (penalty, sparsity) = scale_summary(model, config.gamma);
        history.records.push(EpochRecord {
            epoch,
            loss: weighted_loss / train_set.len() as f64,
            penalty,
            val_metric,
            sparsity,
        });
    }
    model.zero_grads();
    Ok(history)
}

const EVAL_CHUNK: usize = 512;

/// Eval-mode model outputs, `[N, outputs]` flattened row-major.
pub fn predict_all(model: &mut ComposedModel, dataset: &MtsDataset) -> Result<Vec<f64>> {
    if dataset.streams() != model.streams() {
        return Err(Error::dim("predict", format!("dataset has {} streams, model {}", dataset.streams(), model.streams())));
    }
    let mut out = Vec::with_capacity(dataset.len() * model.head_config.outputs());
    let rows: Vec<usize> = (0..dataset.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        out.extend(model.predict(&dataset.x().select_rows(chunk))?.into_data());
    }
    Ok(out)
}

/// Scores the model on `dataset` using BN running statistics.
pub fn evaluate(model: &mut ComposedModel, dataset: &MtsDataset, kind: MetricKind) -> Result<Metric> {
    check_task(model, dataset.targets())?;
    let out = predict_all(model, dataset)?;
    let value = match (dataset.targets(), kind) {
        (Targets::Regression(y), MetricKind::Rmse) => rmse(&out, y)?,
        (Targets::Regression(y), MetricKind::Mae) => mae(&out, y)?,
        (Targets::Classes { labels, classes }, MetricKind::Accuracy) => {
            let pred: Vec<usize> = out.chunks_exact(*classes).map(argmax).collect();
            accuracy(&pred, labels)?
        }
        (Targets::Classes { labels, classes: 2 }, MetricKind::Auc) => {
            // Logit difference is monotone in the positive-class probability.
            let scores: Vec<f64> = out.chunks_exact(2).map(|r| r[1] - r[0]).collect();
            let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            auc(&scores, &positive)?
        }
        (Targets::Classes { .. }, MetricKind::Auc) => {
            return Err(Error::UndefinedMetric("AUC is defined for two classes only".into()));
        }
        (t, k) => return Err(Error::TaskMismatch(format!("metric {k} does not apply to {:?} targets", t.task()))),
    };
    Ok(Metric { kind, value })
}
