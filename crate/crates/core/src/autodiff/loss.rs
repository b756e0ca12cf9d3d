//! Task losses and weight penalties. All of them reduce to a `[1]` scalar.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};

/// Mean of squared differences.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim("mse_loss", format!("{:?} vs {:?}", tape.shape(pred), tape.shape(target))));
    }
    let n = tape.value(pred).len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = tape.value(pred).iter().zip(tape.value(target)).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(tape.push(vec![1], vec![total / n as f64], Op::Mse { pred, target }, &[pred, target]))
}

/// Mean negative log-softmax of the true class; `logits: [B, K]`.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let &[rows, k] = tape.shape(logits) else {
        return Err(Error::dim("cross_entropy_loss", format!("logits must be [B, K], got {:?}", tape.shape(logits))));
    };
    if labels.len() != rows {
        return Err(Error::dim("cross_entropy_loss", format!("{} labels for {rows} rows", labels.len())));
    }
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let lv = tape.value(logits);
    let mut probs = Vec::with_capacity(rows * k);
    let mut total = 0.0;
    for (row, &label) in lv.chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += log_z - row[label];
        probs.extend(row.iter().map(|v| (v - log_z).exp()));
    }
    let op = Op::CrossEntropy { logits, probs, labels: labels.to_vec() };
    Ok(tape.push(vec![1], vec![total / rows as f64], op, &[logits]))
}

/// `coeff · Σ|v|`. Subgradient uses `sign(0) = 0`.
pub fn l1_penalty(tape: &mut Tape, v: Var, coeff: f64) -> Var {
    let total: f64 = tape.value(v).iter().map(|x| x.abs()).sum();
    tape.push(vec![1], vec![coeff * total], Op::L1 { input: v, coeff }, &[v])
}

/// `coeff · Σ v²`.
pub fn l2_penalty(tape: &mut Tape, v: Var, coeff: f64) -> Var {
    let total: f64 = tape.value(v).iter().map(|x| x * x).sum();
    tape.push(vec![1], vec![coeff * total], Op::L2 { input: v, coeff }, &[v])
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(super) fn backward(op: &Op, g: &[f64], sink: &mut GradSink<'_>) {
    let g = g[0];
    match op {
        &Op::Mse { pred, target } => {
            let (pv, tv) = (sink.value(pred), sink.value(target));
            let scale = 2.0 * g / pv.len() as f64;
            if let Some(s) = sink.slot(pred) {
                for i in 0..s.len() {
                    s[i] += scale * (pv[i] - tv[i]);
                }
            }
            if let Some(s) = sink.slot(target) {
                for i in 0..s.len() {
                    s[i] -= scale * (pv[i] - tv[i]);
                }
            }
        }
        Op::CrossEntropy { logits, probs, labels } => {
            if let Some(s) = sink.slot(*logits) {
                let k = probs.len() / labels.len();
                let scale = g / labels.len() as f64;
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        s[r * k + c] += scale * (probs[r * k + c] - onehot);
                    }
                }
            }
        }
        &Op::L1 { input, coeff } => {
            let v = sink.value(input);
            if let Some(s) = sink.slot(input) {
                s.iter_mut().zip(v).for_each(|(s, &x)| *s += g * coeff * sign(x));
            }
        }
        &Op::L2 { input, coeff } => {
            let v = sink.value(input);
            if let Some(s) = sink.slot(input) {
                s.iter_mut().zip(v).for_each(|(s, &x)| *s += g * 2.0 * coeff * x);
            }
        }
        _ => unreachable!("not a loss op"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{max_rel_error, numeric_grad};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_of(f: impl Fn(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.item(v)
    }

    #[test]
    fn mse_values() {
        let v = scalar_of(|t| {
            let p = t.constant(vec![2], vec![1.0, 3.0]);
            let y = t.constant(vec![2], vec![0.0, 1.0]);
            mse_loss(t, p, y).unwrap()
        });
        assert_eq!(v, 2.5);
        let v = scalar_of(|t| {
            let p = t.constant(vec![2], vec![1.0, 3.0]);
            mse_loss(t, p, p).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn mse_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred = Tensor::uniform(&[6], 2.0, &mut rng);
        let target = Tensor::uniform(&[6], 2.0, &mut rng);
        let mut tape = Tape::new();
        let p = tape.leaf(&pred.clone().with_grad());
        let y = tape.constant_tensor(&target);
        let l = mse_loss(&mut tape, p, y).unwrap();
        tape.backward(l).unwrap();
        let numeric = numeric_grad(pred.data(), 1e-5, |probe| {
            scalar_of(|t| {
                let p = t.constant(vec![6], probe.to_vec());
                let y = t.constant_tensor(&target);
                mse_loss(t, p, y).unwrap()
            })
        });
        assert!(max_rel_error(tape.grad(p).unwrap(), &numeric) < 1e-4);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let v = scalar_of(|t| {
            let l = t.constant(vec![3, 2], vec![0.7; 6]);
            cross_entropy_loss(t, l, &[0, 1, 1]).unwrap()
        });
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_dominant_logit_tends_to_zero() {
        let v = scalar_of(|t| {
            let l = t.constant(vec![1, 3], vec![500.0, 0.0, -3.0]);
            cross_entropy_loss(t, l, &[0]).unwrap()
        });
        assert!(v.abs() < 1e-200);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::uniform(&[4, 3], 3.0, &mut rng);
        let labels = [2, 0, 1, 1];
        let mut tape = Tape::new();
        let l = tape.leaf(&logits.clone().with_grad());
        let loss = cross_entropy_loss(&mut tape, l, &labels).unwrap();
        tape.backward(loss).unwrap();
        let numeric = numeric_grad(logits.data(), 1e-5, |probe| {
            scalar_of(|t| {
                let l = t.constant(vec![4, 3], probe.to_vec());
                cross_entropy_loss(t, l, &labels).unwrap()
            })
        });
        assert!(max_rel_error(tape.grad(l).unwrap(), &numeric) < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let l = tape.constant(vec![1, 2], vec![0.0, 0.0]);
        assert!(matches!(
            cross_entropy_loss(&mut tape, l, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn penalties() {
        let v = scalar_of(|t| {
            let x = t.constant(vec![3], vec![1.0, -2.0, 3.0]);
            l1_penalty(t, x, 0.001)
        });
        assert!((v - 0.006).abs() < 1e-15);
        let v = scalar_of(|t| {
            let x = t.constant(vec![2], vec![3.0, 4.0]);
            l2_penalty(t, x, 0.01)
        });
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn l1_at_zero_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[3]).with_grad());
        let p = l1_penalty(&mut tape, x, 0.5);
        assert_eq!(tape.item(p), 0.0);
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn l1_sign_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![2.0, -0.5, 0.0]).unwrap().with_grad());
        let p = l1_penalty(&mut tape, x, 0.1);
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.1, -0.1, 0.0]);
    }
}
