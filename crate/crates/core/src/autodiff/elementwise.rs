use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

fn zip_with(tape: &Tape, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    tape.value(a).iter().zip(tape.value(b)).map(|(&x, &y)| f(x, y)).collect()
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "add", a, b)?;
    let value = zip_with(tape, a, b, |x, y| x + y);
    Ok(tape.push(tape.shape(a).to_vec(), value, Op::Add(a, b), &[a, b]))
}

pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "sub", a, b)?;
    let value = zip_with(tape, a, b, |x, y| x - y);
    Ok(tape.push(tape.shape(a).to_vec(), value, Op::Sub(a, b), &[a, b]))
}

/// Elementwise (Hadamard) product.
pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "mul", a, b)?;
    let value = zip_with(tape, a, b, |x, y| x * y);
    Ok(tape.push(tape.shape(a).to_vec(), value, Op::Mul(a, b), &[a, b]))
}

pub fn scale(tape: &mut Tape, a: Var, c: f64) -> Var {
    let value = tape.value(a).iter().map(|x| x * c).collect();
    tape.push(tape.shape(a).to_vec(), value, Op::Scale(a, c), &[a])
}

pub fn sum(tape: &mut Tape, a: Var) -> Var {
    let total = tape.value(a).iter().sum();
    tape.push(vec![1], vec![total], Op::Sum(a), &[a])
}

pub fn relu(tape: &mut Tape, a: Var) -> Var {
    let value = tape.value(a).iter().map(|&x| x.max(0.0)).collect();
    tape.push(tape.shape(a).to_vec(), value, Op::Relu(a), &[a])
}

pub fn sigmoid(tape: &mut Tape, a: Var) -> Var {
    let value = tape.value(a).iter().map(|&x| stable_sigmoid(x)).collect();
    tape.push(tape.shape(a).to_vec(), value, Op::Sigmoid(a), &[a])
}

pub fn tanh(tape: &mut Tape, a: Var) -> Var {
    let value = tape.value(a).iter().map(|&x| x.tanh()).collect();
    tape.push(tape.shape(a).to_vec(), value, Op::Tanh(a), &[a])
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(super) fn backward_arith(op: &Op, g: &[f64], sink: &mut GradSink<'_>) {
    match *op {
        Op::Add(a, b) => {
            for (v, sign) in [(a, 1.0), (b, 1.0)] {
                if let Some(s) = sink.slot(v) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(a, 1.0), (b, -1.0)] {
                if let Some(s) = sink.slot(v) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g);
                }
            }
        }
        Op::Mul(a, b) => {
            let av = sink.value(a);
            let bv = sink.value(b);
            if let Some(s) = sink.slot(a) {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            }
            if let Some(s) = sink.slot(b) {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = sink.slot(a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
            }
        }
        Op::Sum(a) => {
            if let Some(s) = sink.slot(a) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        _ => unreachable!("not an arithmetic op"),
    }
}

pub(super) fn backward_activation(op: &Op, out: &[f64], g: &[f64], sink: &mut GradSink<'_>) {
    let (input, local): (Var, fn(f64) -> f64) = match *op {
        // Subgradient 0 at the kink.
        Op::Relu(a) => (a, |y| if y > 0.0 { 1.0 } else { 0.0 }),
        Op::Sigmoid(a) => (a, |y| y * (1.0 - y)),
        Op::Tanh(a) => (a, |y| 1.0 - y * y),
        _ => unreachable!("not an activation"),
    };
    if let Some(s) = sink.slot(input) {
        for i in 0..s.len() {
            s[i] += g[i] * local(out[i]);
        }
    }
}
