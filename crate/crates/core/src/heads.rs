//! Downstream networks over the selector output, and the composed model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    self, conv1d, dense, maxpool1d, relu, reshape, sigmoid, slice_last, tanh, time_step, Mode, Tape, Var,
};
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::nfs::{uniform_init, NfsModule, NfsTrace};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Conv,
    Recurrent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub task: TaskKind,
    /// Class count for classification; ignored for regression.
    pub classes: usize,
    /// Expected feature channels; must equal the selector's `n_aggregate`.
    pub in_channels: usize,
    pub conv_filters: [usize; 2],
    pub conv_widths: [usize; 2],
    pub pool_factors: [usize; 2],
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::Recurrent,
            task: TaskKind::Regression,
            classes: 2,
            in_channels: 32,
            conv_filters: [5, 20],
            conv_widths: [5, 5],
            pool_factors: [2, 4],
            hidden: 32,
        }
    }
}

impl HeadConfig {
    /// Values emitted per sample: one for regression, one logit per class.
    pub fn outputs(&self) -> usize {
        match self.task {
            TaskKind::Regression => 1,
            TaskKind::Classification => self.classes,
        }
    }

    /// Temporal length after both conv stages, or a configuration error.
    pub fn pooled_len(&self, seq_len: usize) -> Result<usize> {
        let [w1, w2] = self.conv_widths;
        let [p1, p2] = self.pool_factors;
        let too_short = |what: &str| {
            Err(Error::Config(format!(
                "sequence length {seq_len} too short for the conv head ({what}; widths {:?}, pools {:?})",
                self.conv_widths, self.pool_factors
            )))
        };
        if p1 == 0 || p2 == 0 {
            return too_short("zero pool factor");
        }
        if seq_len < w1 {
            return too_short("first convolution");
        }
        let after1 = seq_len / p1;
        if after1 == 0 || after1 < w2 {
            return too_short("second convolution");
        }
        let after2 = after1 / p2;
        if after2 == 0 {
            return too_short("second pooling");
        }
        Ok(after2)
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.task == TaskKind::Classification && self.classes < 2 {
            return Err(Error::Config("classification heads need at least two classes".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("head input channels must be positive".into()));
        }
        match self.kind {
            HeadKind::Conv => {
                if self.conv_filters.contains(&0) || self.conv_widths.contains(&0) {
                    return Err(Error::Config("conv head filter counts and widths must be positive".into()));
                }
                self.pooled_len(seq_len).map(|_| ())
            }
            HeadKind::Recurrent if self.hidden == 0 => Err(Error::Config("hidden size must be positive".into())),
            HeadKind::Recurrent => Ok(()),
        }
    }
}

/// Head parameters in binding order.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// conv1 weight/bias, conv2 weight/bias, output weight/bias.
    Conv([Tensor; 6]),
    /// Input weight `[n, 4H]`, recurrent weight `[H, 4H]`, gate bias `[4H]`
    /// (gate order input, forget, cell, output), output weight/bias.
    Recurrent([Tensor; 5]),
}

const CONV_NAMES: [&str; 6] =
    ["head.conv1.weight", "head.conv1.bias", "head.conv2.weight", "head.conv2.bias", "head.out.weight", "head.out.bias"];
const LSTM_NAMES: [&str; 5] = ["head.lstm.input", "head.lstm.recurrent", "head.lstm.bias", "head.out.weight", "head.out.bias"];

impl Head {
    pub fn build(config: &HeadConfig, seq_len: usize, seed: u64) -> Result<Head> {
        config.validate(seq_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.in_channels;
        let out = config.outputs();
        Ok(match config.kind {
            HeadKind::Conv => {
                let [f1, f2] = config.conv_filters;
                let [w1, w2] = config.conv_widths;
                let flat = f2 * config.pooled_len(seq_len)?;
                Head::Conv([
                    uniform_init(&[f1, w1, n], w1 * n, &mut rng),
                    Tensor::zeros(&[f1]).with_grad(),
                    uniform_init(&[f2, w2, f1], w2 * f1, &mut rng),
                    Tensor::zeros(&[f2]).with_grad(),
                    uniform_init(&[flat, out], flat, &mut rng),
                    Tensor::zeros(&[out]).with_grad(),
                ])
            }
            HeadKind::Recurrent => {
                let h = config.hidden;
                Head::Recurrent([
                    uniform_init(&[n, 4 * h], n, &mut rng),
                    uniform_init(&[h, 4 * h], h, &mut rng),
                    Tensor::zeros(&[4 * h]).with_grad(),
                    uniform_init(&[h, out], h, &mut rng),
                    Tensor::zeros(&[out]).with_grad(),
                ])
            }
        })
    }

    pub fn tensors(&self) -> &[Tensor] {
        match self {
            Head::Conv(t) => t,
            Head::Recurrent(t) => t,
        }
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        match self {
            Head::Conv(t) => t,
            Head::Recurrent(t) => t,
        }
    }

    pub fn names(&self) -> &'static [&'static str] {
        match self {
            Head::Conv(_) => &CONV_NAMES,
            Head::Recurrent(_) => &LSTM_NAMES,
        }
    }

    /// `[B, outputs]` predictions from `[B, T, n]` features.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], features: Var, config: &HeadConfig) -> Result<Var> {
        match self {
            Head::Conv(_) => conv_forward(tape, vars, features, config),
            Head::Recurrent(_) => recurrent_forward(tape, vars, features, config.hidden),
        }
    }
}

fn conv_forward(tape: &mut Tape, v: &[Var], features: Var, config: &HeadConfig) -> Result<Var> {
    let batch = tape.shape(features)[0];
    let c1 = conv1d(tape, features, v[0], v[1])?;
    let a1 = relu(tape, c1);
    let p1 = maxpool1d(tape, a1, config.pool_factors[0])?;
    let c2 = conv1d(tape, p1, v[2], v[3])?;
    let a2 = relu(tape, c2);
    let p2 = maxpool1d(tape, a2, config.pool_factors[1])?;
    let flat_len = tape.value(p2).len() / batch;
    let flat = reshape(tape, p2, vec![batch, flat_len])?;
    dense(tape, flat, v[4], v[5])
}

fn recurrent_forward(tape: &mut Tape, v: &[Var], features: Var, hidden: usize) -> Result<Var> {
    let &[batch, len, _] = tape.shape(features) else {
        return Err(Error::dim("recurrent_head", format!("features must be [B, T, n], got {:?}", tape.shape(features))));
    };
    let (wx, wh, b) = (v[0], v[1], v[2]);
    let no_bias = tape.constant(vec![4 * hidden], vec![0.0; 4 * hidden]);
    let mut state: Option<(Var, Var)> = None;
    for t in 0..len {
        let x_t = time_step(tape, features, t)?;
        let mut z = dense(tape, x_t, wx, b)?;
        if let Some((h, _)) = state {
            let r = dense(tape, h, wh, no_bias)?;
            z = autodiff::add(tape, z, r)?;
        }
        let gate = |tape: &mut Tape, k: usize| slice_last(tape, z, k * hidden, hidden);
        let (zi, zf, zg, zo) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
        let i = sigmoid(tape, zi);
        let g = tanh(tape, zg);
        let o = sigmoid(tape, zo);
        let mut c = autodiff::mul(tape, i, g)?;
        if let Some((_, c_prev)) = state {
            let f = sigmoid(tape, zf);
            let kept = autodiff::mul(tape, f, c_prev)?;
            c = autodiff::add(tape, c, kept)?;
        }
        let tc = tanh(tape, c);
        let h = autodiff::mul(tape, o, tc)?;
        state = Some((h, c));
    }
    let (h, _) = state.ok_or_else(|| Error::dim("recurrent_head", "empty sequence"))?;
    debug_assert_eq!(tape.shape(h), &[batch, hidden]);
    dense(tape, h, v[3], v[4])
}

/// Selector plus head, trained as one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedModel {
    pub nfs: NfsModule,
    pub head: Head,
    pub head_config: HeadConfig,
    pub seq_len: usize,
}

/// Joins a selector and a freshly initialized head.
pub fn compose(nfs: NfsModule, head_config: HeadConfig, seq_len: usize, seed: u64) -> Result<ComposedModel> {
    let n = nfs.config().n_aggregate;
    if head_config.in_channels != n {
        return Err(Error::Config(format!(
            "head expects {} input channels but the selector emits {n}",
            head_config.in_channels
        )));
    }
    if let Some(&w) = nfs.config().branch_widths.iter().find(|&&w| w > seq_len) {
        return Err(Error::Config(format!("branch width {w} exceeds sequence length {seq_len}")));
    }
    let head = Head::build(&head_config, seq_len, seed)?;
    Ok(ComposedModel { nfs, head, head_config, seq_len })
}

/// Output of one composed forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelTrace {
    pub nfs: NfsTrace,
    /// `[B, outputs]`.
    pub output: Var,
}

impl ComposedModel {
    /// Builds selector and head from one seed.
    pub fn build(nfs_config: crate::nfs::NfsConfig, head_config: HeadConfig, seq_len: usize, seed: u64) -> Result<Self> {
        let nfs = NfsModule::build(nfs_config, seed)?;
        compose(nfs, head_config, seq_len, seed.wrapping_add(0x9E37_79B9_7F4A_7C15))
    }

    pub fn task(&self) -> TaskKind {
        self.head_config.task
    }

    pub fn streams(&self) -> usize {
        self.nfs.streams()
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.nfs.params();
        out.extend(self.head.names().iter().map(|n| n.to_string()).zip(self.head.tensors()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names = self.head.names();
        let mut out = self.nfs.params_mut();
        out.extend(names.iter().map(|n| n.to_string()).zip(self.head.tensors_mut()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.nfs.param_count() + self.head.tensors().len()
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    pub fn forward_bound(
        &mut self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        mode: Mode,
        keep_streams: Option<&[bool]>,
    ) -> Result<ModelTrace> {
        let split = self.nfs.param_count();
        if vars.len() != self.param_count() {
            return Err(Error::dim("model_forward", "binding does not match model"));
        }
        let nfs = self.nfs.forward_bound(tape, &vars[..split], x, mode, keep_streams)?;
        let output = self.head.forward(tape, &vars[split..], nfs.output, &self.head_config)?;
        Ok(ModelTrace { nfs, output })
    }

    /// Predictions for `x: [B, T, d]` in eval mode without recording gradients.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape);
        let xv = tape.constant_tensor(x);
        let trace = self.forward_bound(&mut tape, &vars, xv, Mode::Eval, None)?;
        Ok(tape.to_tensor(trace.output))
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(|(_, t)| t.zero_grad());
    }
}
