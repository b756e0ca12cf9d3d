//! Per-channel batch normalization over every axis but the last.
//!
//! `z_norm = (z - μ) / sqrt(σ² + ε)`, `z_out = α · z_norm + β`. In train mode
//! μ and σ² are the (biased) batch statistics and the running estimates are
//! updated; in eval mode the running estimates are used.

use serde::{Deserialize, Serialize};

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the old running estimate in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub initialized: bool,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState { running_mean: vec![0.0; channels], running_var: vec![1.0; channels], initialized: false }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Keeps only the listed channels, in order.
    pub fn select(&self, channels: &[usize]) -> Self {
        BatchNormState {
            running_mean: channels.iter().map(|&c| self.running_mean[c]).collect(),
            running_var: channels.iter().map(|&c| self.running_var[c]).collect(),
            initialized: self.initialized,
        }
    }

    fn update(&mut self, mean: &[f64], var: &[f64]) {
        if !self.initialized {
            // The first batch seeds the estimates directly instead of being
            // blended into the (0, 1) placeholders.
            self.running_mean.copy_from_slice(mean);
            self.running_var.copy_from_slice(var);
            self.initialized = true;
            return;
        }
        for c in 0..mean.len() {
            self.running_mean[c] = BN_MOMENTUM * self.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
            self.running_var[c] = BN_MOMENTUM * self.running_var[c] + (1.0 - BN_MOMENTUM) * var[c];
        }
    }
}

pub(crate) struct BnSaved {
    input: Var,
    alpha: Var,
    beta: Var,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

pub fn batchnorm(
    tape: &mut Tape,
    x: Var,
    alpha: Var,
    beta: Var,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = *shape.last().expect("rank >= 1");
    if shape.len() < 2 {
        return Err(Error::dim("batchnorm", format!("need at least [N, C], got {shape:?}")));
    }
    if tape.shape(alpha) != [c] || tape.shape(beta) != [c] || state.channels() != c {
        return Err(Error::dim(
            "batchnorm",
            format!("{c} channels but scale {:?}, shift {:?}", tape.shape(alpha), tape.shape(beta)),
        ));
    }
    let xv = tape.value(x);
    let rows = xv.len() / c;

    let (mean, var) = match mode {
        Mode::Train => {
            if rows < 2 {
                return Err(Error::dim("batchnorm", "train mode needs at least two values per channel"));
            }
            let mut mean = vec![0.0; c];
            for row in xv.chunks_exact(c) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for row in xv.chunks_exact(c) {
                for ch in 0..c {
                    let d = row[ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            state.update(&mean, &var);
            (mean, var)
        }
        Mode::Eval => {
            if !state.initialized {
                return Err(Error::UninitializedStatistics);
            }
            (state.running_mean.clone(), state.running_var.clone())
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let (av, bv) = (tape.value(alpha), tape.value(beta));
    let mut x_hat = Vec::with_capacity(xv.len());
    let mut out = Vec::with_capacity(xv.len());
    for row in xv.chunks_exact(c) {
        for ch in 0..c {
            let h = (row[ch] - mean[ch]) * inv_std[ch];
            x_hat.push(h);
            out.push(av[ch] * h + bv[ch]);
        }
    }
    let saved = BnSaved { input: x, alpha, beta, x_hat, inv_std, train: mode == Mode::Train };
    Ok(tape.push(shape, out, Op::BatchNorm(saved), &[x, alpha, beta]))
}

pub(super) fn batchnorm_backward(saved: &BnSaved, g: &[f64], sink: &mut GradSink<'_>) {
    let BnSaved { input, alpha, beta, ref x_hat, ref inv_std, train } = *saved;
    let c = inv_std.len();
    let rows = g.len() / c;
    let av = sink.value(alpha);

    let mut sum_g = vec![0.0; c];
    let mut sum_g_xhat = vec![0.0; c];
    for (grow, hrow) in g.chunks_exact(c).zip(x_hat.chunks_exact(c)) {
        for ch in 0..c {
            sum_g[ch] += grow[ch];
            sum_g_xhat[ch] += grow[ch] * hrow[ch];
        }
    }
    if let Some(s) = sink.slot(alpha) {
        s.iter_mut().zip(&sum_g_xhat).for_each(|(s, v)| *s += v);
    }
    if let Some(s) = sink.slot(beta) {
        s.iter_mut().zip(&sum_g).for_each(|(s, v)| *s += v);
    }
    if let Some(dx) = sink.slot(input) {
        let m = rows as f64;
        for (r, (grow, hrow)) in g.chunks_exact(c).zip(x_hat.chunks_exact(c)).enumerate() {
            for ch in 0..c {
                let scale = av[ch] * inv_std[ch];
                dx[r * c + ch] += if train {
                    // Batch statistics depend on every input in the channel.
                    scale * (grow[ch] - sum_g[ch] / m - hrow[ch] * sum_g_xhat[ch] / m)
                } else {
                    scale * grow[ch]
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{max_rel_error, mul, numeric_grad, sum};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(x: &Tensor, alpha: &[f64], beta: &[f64], state: &mut BatchNormState, mode: Mode) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let a = tape.constant(vec![alpha.len()], alpha.to_vec());
        let b = tape.constant(vec![beta.len()], beta.to_vec());
        let y = batchnorm(&mut tape, xv, a, b, state, mode)?;
        Ok(tape.value(y).to_vec())
    }

    #[test]
    fn two_point_channel() {
        let x = Tensor::new(vec![2, 1], vec![2.0, 4.0]).unwrap();
        let y = run(&x, &[3.0], &[1.0], &mut BatchNormState::new(1), Mode::Train).unwrap();
        // normalized {-1, 1} up to the ε correction
        assert!((y[0] + 2.0).abs() < 1e-4 && (y[1] - 4.0).abs() < 1e-4, "{y:?}");
    }

    #[test]
    fn standardized_input_passes_through() {
        let x = Tensor::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let y = run(&x, &[1.0], &[0.0], &mut BatchNormState::new(1), Mode::Train).unwrap();
        let diff = x.data().iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5);
    }

    #[test]
    fn normalized_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // ε shrinks the variance by ε/(σ² + ε); a spread of ±100 keeps that
        // below 1e-8.
        let mut x = Tensor::uniform(&[4, 6, 5], 100.0, &mut rng);
        x.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += (i % 5) as f64 * 20.0);
        let y = run(&x, &[1.0; 5], &[0.0; 5], &mut BatchNormState::new(5), Mode::Train).unwrap();
        for ch in 0..5 {
            let vals: Vec<f64> = y.iter().skip(ch).step_by(5).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8, "{var}");
        }
    }

    #[test]
    fn eval_before_train_is_an_error() {
        let x = Tensor::ones(&[3, 2]);
        let err = run(&x, &[1.0; 2], &[0.0; 2], &mut BatchNormState::new(2), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::UninitializedStatistics));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut state = BatchNormState::new(1);
        let a = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![10.0, 10.0]).unwrap();
        run(&a, &[1.0], &[0.0], &mut state, Mode::Train).unwrap();
        assert_eq!(state.running_mean, vec![1.0]);
        assert_eq!(state.running_var, vec![1.0]);
        run(&b, &[1.0], &[0.0], &mut state, Mode::Train).unwrap();
        assert!((state.running_mean[0] - 1.9).abs() < 1e-12);
        assert!((state.running_var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn eval_after_single_train_batch_reproduces_train_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(&[3, 4, 2], 1.0, &mut rng);
        let mut state = BatchNormState::new(2);
        let train = run(&x, &[1.5, -0.5], &[0.1, 0.2], &mut state, Mode::Train).unwrap();
        let eval = run(&x, &[1.5, -0.5], &[0.1, 0.2], &mut state, Mode::Eval).unwrap();
        assert_eq!(train, eval);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::uniform(&[2, 5, 3], 1.0, &mut rng);
        let alpha = Tensor::uniform(&[3], 1.0, &mut rng);
        let beta = Tensor::uniform(&[3], 1.0, &mut rng);
        let proj = Tensor::uniform(&[2, 5, 3], 1.0, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let mut warm = BatchNormState::new(3);
            run(&Tensor::uniform(&[4, 3], 2.0, &mut rng), &[1.0; 3], &[0.0; 3], &mut warm, Mode::Train).unwrap();
            let loss = |ts: [&Tensor; 3], tape: &mut Tape| {
                let mut state = warm.clone();
                let vars = ts.map(|t| tape.leaf(t));
                let y = batchnorm(tape, vars[0], vars[1], vars[2], &mut state, mode).unwrap();
                let p = tape.constant_tensor(&proj);
                let m = mul(tape, y, p).unwrap();
                (sum(tape, m), vars)
            };
            let grads_on = [x.clone().with_grad(), alpha.clone().with_grad(), beta.clone().with_grad()];
            let mut tape = Tape::new();
            let (l, vars) = loss([&grads_on[0], &grads_on[1], &grads_on[2]], &mut tape);
            tape.backward(l).unwrap();
            let base = [x.clone(), alpha.clone(), beta.clone()];
            for which in 0..3 {
                let numeric = numeric_grad(base[which].data(), 1e-5, |probe| {
                    let mut ts = base.clone();
                    ts[which].data_mut().copy_from_slice(probe);
                    let mut tape = Tape::new();
                    let (l, _) = loss([&ts[0], &ts[1], &ts[2]], &mut tape);
                    tape.item(l)
                });
                let err = max_rel_error(tape.grad(vars[which]).unwrap(), &numeric);
                assert!(err < 1e-4, "{mode:?} input {which}: {err}");
            }
        }
    }
}
