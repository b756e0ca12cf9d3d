//! The neural feature selector.
//!
//! Each input stream runs through its own bank of temporal convolutions (one
//! branch per filter width). The per-stream outputs are concatenated into
//! `k · d` channels, batch-normalized, passed through relu, and mixed by a
//! width-1 aggregating convolution into `n` output channels. Stream `j` owns
//! BN channels `[j·k, (j+1)·k)`, and the magnitude of their scale factors is
//! the stream's importance score.

mod select;

pub use select::{select_top_k, stream_scores, FeatureMask, ImportanceScores};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, batchnorm, concat_last, conv1d, mask_last, relu, slice_last, BatchNormState, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NfsConfig {
    /// Number of input streams `d`.
    pub streams: usize,
    pub branch_widths: Vec<usize>,
    pub filters_per_branch: usize,
    /// Aggregating filter count `n`; also the output channel count.
    pub n_aggregate: usize,
    /// L2 coefficient on temporal convolution kernels.
    pub temporal_l2: f64,
    /// L1 coefficient on aggregating convolution kernels.
    pub aggregate_l1: f64,
}

impl Default for NfsConfig {
    fn default() -> Self {
        NfsConfig {
            streams: 1,
            branch_widths: vec![2, 3, 4, 5],
            filters_per_branch: 1,
            n_aggregate: 32,
            temporal_l2: 0.01,
            aggregate_l1: 0.01,
        }
    }
}

impl NfsConfig {
    pub fn with_streams(streams: usize) -> Self {
        NfsConfig { streams, ..Self::default() }
    }

    /// BN channels owned by each stream (`k`).
    pub fn channels_per_stream(&self) -> usize {
        self.branch_widths.len() * self.filters_per_branch
    }

    pub fn bn_channels(&self) -> usize {
        self.channels_per_stream() * self.streams
    }

    pub fn validate(&self) -> Result<()> {
        if self.streams == 0 {
            return Err(Error::Config("NFS needs at least one stream".into()));
        }
        if self.branch_widths.is_empty() || self.branch_widths.contains(&0) {
            return Err(Error::Config(format!("invalid branch widths {:?}", self.branch_widths)));
        }
        if self.filters_per_branch == 0 || self.n_aggregate == 0 {
            return Err(Error::Config("filter counts must be positive".into()));
        }
        if self.temporal_l2 < 0.0 || self.aggregate_l1 < 0.0 {
            return Err(Error::Config("regularizer coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

/// One stream's temporal convolution branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalBank {
    /// Per branch, `[filters_per_branch, width, 1]`.
    pub filters: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NfsModule {
    config: NfsConfig,
    pub(crate) banks: Vec<TemporalBank>,
    pub(crate) bn_scale: Tensor,
    pub(crate) bn_shift: Tensor,
    pub(crate) bn_state: BatchNormState,
    /// `[n, 1, k·d]`.
    pub(crate) agg_weight: Tensor,
    pub(crate) agg_bias: Tensor,
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NfsTrace {
    /// Concatenated temporal-bank outputs, `[B, T, k·d]`.
    pub concat: Var,
    /// BN output before relu (after optional path masking).
    pub normalized: Var,
    /// `[B, T, n]`.
    pub output: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompactMode {
    /// Re-initialize every parameter from the seed.
    Fresh,
    /// Copy the surviving paths verbatim.
    Copy,
}

pub(crate) fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, (1.0 / fan_in as f64).sqrt(), rng).with_grad()
}

impl NfsModule {
    pub fn build(config: NfsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fpb = config.filters_per_branch;
        let banks = (0..config.streams)
            .map(|_| TemporalBank {
                filters: config.branch_widths.iter().map(|&w| uniform_init(&[fpb, w, 1], w, &mut rng)).collect(),
                biases: config.branch_widths.iter().map(|_| Tensor::zeros(&[fpb]).with_grad()).collect(),
            })
            .collect();
        let c = config.bn_channels();
        let agg_weight = uniform_init(&[config.n_aggregate, 1, c], c, &mut rng);
        Ok(NfsModule {
            banks,
            bn_scale: Tensor::ones(&[c]).with_grad(),
            bn_shift: Tensor::zeros(&[c]).with_grad(),
            bn_state: BatchNormState::new(c),
            agg_weight,
            agg_bias: Tensor::zeros(&[config.n_aggregate]).with_grad(),
            config,
        })
    }

    pub fn config(&self) -> &NfsConfig {
        &self.config
    }

    pub fn streams(&self) -> usize {
        self.config.streams
    }

    pub fn bn_scale(&self) -> &Tensor {
        &self.bn_scale
    }

    pub fn bn_scale_mut(&mut self) -> &mut Tensor {
        &mut self.bn_scale
    }

    pub fn bn_state(&self) -> &BatchNormState {
        &self.bn_state
    }

    pub fn agg_weight(&self) -> &Tensor {
        &self.agg_weight
    }

    pub fn banks(&self) -> &[TemporalBank] {
        &self.banks
    }

    /// BN channel range owned by `stream`.
    pub fn stream_channels(&self, stream: usize) -> std::ops::Range<usize> {
        let k = self.config.channels_per_stream();
        stream * k..(stream + 1) * k
    }

    pub fn param_count(&self) -> usize {
        2 * self.banks.len() * self.config.branch_widths.len() + 4
    }

    /// Parameters in binding order: per stream and branch `(filter, bias)`,
    /// then BN scale, BN shift, aggregating weight, aggregating bias.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.param_count());
        for (j, bank) in self.banks.iter().enumerate() {
            for (b, (f, bias)) in bank.filters.iter().zip(&bank.biases).enumerate() {
                let w = self.config.branch_widths[b];
                out.push((format!("temporal.{j}.w{w}.weight"), f));
                out.push((format!("temporal.{j}.w{w}.bias"), bias));
            }
        }
        out.push(("bn.scale".into(), &self.bn_scale));
        out.push(("bn.shift".into(), &self.bn_shift));
        out.push(("aggregate.weight".into(), &self.agg_weight));
        out.push(("aggregate.bias".into(), &self.agg_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let widths = &self.config.branch_widths;
        let mut out = Vec::with_capacity(2 * self.banks.len() * widths.len() + 4);
        for (j, bank) in self.banks.iter_mut().enumerate() {
            for (b, (f, bias)) in bank.filters.iter_mut().zip(bank.biases.iter_mut()).enumerate() {
                let w = widths[b];
                out.push((format!("temporal.{j}.w{w}.weight"), f));
                out.push((format!("temporal.{j}.w{w}.bias"), bias));
            }
        }
        out.push(("bn.scale".into(), &mut self.bn_scale));
        out.push(("bn.shift".into(), &mut self.bn_shift));
        out.push(("aggregate.weight".into(), &mut self.agg_weight));
        out.push(("aggregate.bias".into(), &mut self.agg_bias));
        out
    }

    /// Records every parameter as a tape leaf, in [`NfsModule::params`] order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    fn tail_vars(&self, vars: &[Var]) -> [Var; 4] {
        let base = vars.len() - 4;
        [vars[base], vars[base + 1], vars[base + 2], vars[base + 3]]
    }

    /// Forward pass with an internal binding.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let vars = self.bind(tape);
        Ok(self.forward_bound(tape, &vars, x, mode, None)?.output)
    }

    /// Forward pass against leaves from [`NfsModule::bind`].
    ///
    /// `keep_streams`, when given, zeroes the post-BN channels of every stream
    /// marked false, which is how a pruned path behaves inside the full graph.
    pub fn forward_bound(
        &mut self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        mode: Mode,
        keep_streams: Option<&[bool]>,
    ) -> Result<NfsTrace> {
        if vars.len() != self.param_count() {
            return Err(Error::dim("nfs_forward", "binding does not match module"));
        }
        let &[_, len, d] = tape.shape(x) else {
            return Err(Error::dim("nfs_forward", format!("input must be [B, T, d], got {:?}", tape.shape(x))));
        };
        if d != self.config.streams {
            return Err(Error::dim("nfs_forward", format!("input has {d} streams, module expects {}", self.config.streams)));
        }
        if let Some(&w) = self.config.branch_widths.iter().find(|&&w| w > len) {
            return Err(Error::dim("nfs_forward", format!("branch width {w} exceeds sequence length {len}")));
        }

        let branches = self.config.branch_widths.len();
        let mut pieces = Vec::with_capacity(d * branches);
        for j in 0..d {
            let stream = slice_last(tape, x, j, 1)?;
            for b in 0..branches {
                let idx = 2 * (j * branches + b);
                pieces.push(conv1d(tape, stream, vars[idx], vars[idx + 1])?);
            }
        }
        let concat = concat_last(tape, &pieces)?;

        let [scale, shift, agg_w, agg_b] = self.tail_vars(vars);
        let mut normalized = batchnorm(tape, concat, scale, shift, &mut self.bn_state, mode)?;
        if let Some(keep) = keep_streams {
            if keep.len() != d {
                return Err(Error::dim("nfs_forward", format!("stream mask of {} for {d} streams", keep.len())));
            }
            let k = self.config.channels_per_stream();
            let channel_keep: Vec<bool> = keep.iter().flat_map(|&kp| std::iter::repeat_n(kp, k)).collect();
            normalized = mask_last(tape, normalized, &channel_keep)?;
        }
        let activated = relu(tape, normalized);
        let mixed = conv1d(tape, activated, agg_w, agg_b)?;
        let output = relu(tape, mixed);
        Ok(NfsTrace { concat, normalized, output })
    }

    /// Architecture penalty `γ · Σ|α|` over every BN scale.
    pub fn scale_penalty(&self, tape: &mut Tape, vars: &[Var], gamma: f64) -> Var {
        let [scale, ..] = self.tail_vars(vars);
        autodiff::l1_penalty(tape, scale, gamma)
    }

    /// Layer regularizers: L2 on temporal kernels plus L1 on aggregating kernels.
    pub fn weight_penalty(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        let branches = self.config.branch_widths.len();
        let mut total = {
            let [.., agg_w, _] = self.tail_vars(vars);
            autodiff::l1_penalty(tape, agg_w, self.config.aggregate_l1)
        };
        for j in 0..self.banks.len() {
            for b in 0..branches {
                let p = autodiff::l2_penalty(tape, vars[2 * (j * branches + b)], self.config.temporal_l2);
                total = autodiff::add(tape, total, p)?;
            }
        }
        Ok(total)
    }

    /// Builds a module over the streams in `mask`.
    pub fn compact(&self, mask: &FeatureMask, mode: CompactMode, seed: u64) -> Result<NfsModule> {
        if mask.streams() != self.config.streams {
            return Err(Error::Config(format!(
                "mask over {} streams applied to a {}-stream module",
                mask.streams(),
                self.config.streams
            )));
        }
        if mask.is_empty() {
            return Err(Error::Config("cannot compact to an empty feature set".into()));
        }
        let config = NfsConfig { streams: mask.len(), ..self.config.clone() };
        match mode {
            CompactMode::Fresh => NfsModule::build(config, seed),
            CompactMode::Copy => {
                let channels: Vec<usize> = mask.indices().iter().flat_map(|&j| self.stream_channels(j)).collect();
                let pick = |t: &Tensor| {
                    let mut picked = t.select_last_axis(&channels);
                    picked.set_requires_grad(true);
                    picked
                };
                Ok(NfsModule {
                    banks: mask.indices().iter().map(|&j| self.banks[j].clone()).collect(),
                    bn_scale: pick(&self.bn_scale),
                    bn_shift: pick(&self.bn_shift),
                    bn_state: self.bn_state.select(&channels),
                    agg_weight: pick(&self.agg_weight),
                    agg_bias: self.agg_bias.clone(),
                    config,
                })
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(|(_, t)| t.zero_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn batch(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 1.0, &mut rng)
    }

    #[test]
    fn default_shapes_for_nineteen_streams() {
        let m = NfsModule::build(NfsConfig::with_streams(19), 0).unwrap();
        assert_eq!(m.bn_scale().shape(), &[76]);
        assert_eq!(m.agg_weight().shape(), &[32, 1, 76]);
        assert_eq!(m.stream_channels(3), 12..16);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(NfsModule::build(NfsConfig::with_streams(0), 0).is_err());
        let bad = NfsConfig { branch_widths: vec![2, 0], ..NfsConfig::with_streams(2) };
        assert!(NfsModule::build(bad, 0).is_err());
        let bad = NfsConfig { n_aggregate: 0, ..NfsConfig::with_streams(2) };
        assert!(NfsModule::build(bad, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = NfsModule::build(NfsConfig::with_streams(4), 9).unwrap();
        let b = NfsModule::build(NfsConfig::with_streams(4), 9).unwrap();
        let c = NfsModule::build(NfsConfig::with_streams(4), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_shape_for_nineteen_streams() {
        let mut m = NfsModule::build(NfsConfig::with_streams(19), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant_tensor(&batch(&[2, 12, 19], 2));
        let y = m.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), &[2, 12, 32]);
    }

    #[test]
    fn single_stream_concat_is_identity_on_channels() {
        let mut m = NfsModule::build(NfsConfig::with_streams(1), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant_tensor(&batch(&[3, 6, 1], 4));
        let vars = m.bind(&mut tape);
        let trace = m.forward_bound(&mut tape, &vars, x, Mode::Train, None).unwrap();
        assert_eq!(tape.shape(trace.concat), &[3, 6, 4]);
        assert_eq!(tape.shape(trace.output), &[3, 6, 32]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut m = NfsModule::build(NfsConfig::with_streams(3), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant_tensor(&Tensor::zeros(&[2, 8, 3]));
        let y = m.forward(&mut tape, x, Mode::Train).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stream_count_mismatch() {
        let mut m = NfsModule::build(NfsConfig::with_streams(3), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant_tensor(&Tensor::zeros(&[2, 8, 4]));
        assert!(matches!(m.forward(&mut tape, x, Mode::Train), Err(Error::Dimension { .. })));
    }

    #[test]
    fn perturbing_one_stream_only_moves_its_channels() {
        let d = 5;
        let m = NfsModule::build(NfsConfig::with_streams(d), 3).unwrap();
        let base = batch(&[2, 10, d], 6);
        let concat_of = |x: &Tensor| {
            let mut m = m.clone();
            let mut tape = Tape::new();
            let xv = tape.constant_tensor(x);
            let vars = m.bind(&mut tape);
            let trace = m.forward_bound(&mut tape, &vars, xv, Mode::Train, None).unwrap();
            tape.value(trace.concat).to_vec()
        };
        let reference = concat_of(&base);
        for j in 0..d {
            let mut probe = base.clone();
            probe.set(&[1, 4, j], probe.at(&[1, 4, j]) + 0.25);
            let moved = concat_of(&probe);
            for (i, (a, b)) in reference.iter().zip(&moved).enumerate() {
                let channel = i % (4 * d);
                if !m.stream_channels(j).contains(&channel) {
                    assert_eq!(a, b, "stream {j} leaked into channel {channel}");
                }
            }
            assert_ne!(reference, moved);
        }
    }

    #[test]
    fn copy_compaction_of_all_streams_is_exact() {
        let mut m = NfsModule::build(NfsConfig::with_streams(4), 3).unwrap();
        let x = batch(&[3, 9, 4], 1);
        let mut tape = Tape::new();
        let xv = tape.constant_tensor(&x);
        m.forward(&mut tape, xv, Mode::Train).unwrap();

        let mask = FeatureMask::new(vec![0, 1, 2, 3], 4).unwrap();
        let mut c = m.compact(&mask, CompactMode::Copy, 0).unwrap();
        let mut t1 = Tape::new();
        let x1 = t1.constant_tensor(&x);
        let full = m.forward(&mut t1, x1, Mode::Eval).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.constant_tensor(&x);
        let compact = c.forward(&mut t2, x2, Mode::Eval).unwrap();
        assert_eq!(t1.value(full), t2.value(compact));
    }

    #[test]
    fn fresh_compaction_shapes() {
        let m = NfsModule::build(NfsConfig::with_streams(19), 3).unwrap();
        let mask = FeatureMask::new(vec![0, 4, 7, 11, 18], 19).unwrap();
        let c = m.compact(&mask, CompactMode::Fresh, 5).unwrap();
        assert_eq!(c.bn_scale().shape(), &[20]);
        assert_eq!(c.agg_weight().shape(), &[32, 1, 20]);
        assert!(m.compact(&FeatureMask::new(vec![0], 3).unwrap(), CompactMode::Fresh, 0).is_err());
    }

    #[test]
    fn params_cover_every_tensor_once() {
        let mut m = NfsModule::build(NfsConfig::with_streams(3), 0).unwrap();
        let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), m.param_count());
        assert!(m.params_mut().iter().all(|(_, t)| t.requires_grad()));
    }
}
