//! Layout operations: reshape, last-axis slicing/concatenation, time-step
//! extraction. All of them are pure index maps, so their backward passes are
//! scatters of the upstream gradient.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};

pub fn reshape(tape: &mut Tape, x: Var, shape: Vec<usize>) -> Result<Var> {
    let numel: usize = shape.iter().product();
    if numel != tape.value(x).len() {
        return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", tape.shape(x))));
    }
    let value = tape.value(x).to_vec();
    Ok(tape.push(shape, value, Op::Reshape(x), &[x]))
}

fn last_dim(tape: &Tape, x: Var) -> usize {
    *tape.shape(x).last().expect("rank >= 1")
}

/// `x[..., start..start + width]`.
pub fn slice_last(tape: &mut Tape, x: Var, start: usize, width: usize) -> Result<Var> {
    let last = last_dim(tape, x);
    if width == 0 || start + width > last {
        return Err(Error::dim("slice_last", format!("{start}+{width} exceeds {last}")));
    }
    let value = tape
        .value(x)
        .chunks_exact(last)
        .flat_map(|row| row[start..start + width].iter().copied())
        .collect();
    let mut shape = tape.shape(x).to_vec();
    *shape.last_mut().unwrap() = width;
    Ok(tape.push(shape, value, Op::SliceLast { input: x, start, width }, &[x]))
}

/// Concatenates along the last axis; all leading axes must agree.
pub fn concat_last(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let first = *xs.first().ok_or_else(|| Error::dim("concat_last", "no inputs"))?;
    let lead = &tape.shape(first)[..tape.shape(first).len() - 1];
    for &x in xs {
        let s = tape.shape(x);
        if &s[..s.len() - 1] != lead {
            return Err(Error::dim("concat_last", format!("{:?} vs {:?}", tape.shape(first), s)));
        }
    }
    let widths: Vec<usize> = xs.iter().map(|&x| last_dim(tape, x)).collect();
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut value = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (&x, &w) in xs.iter().zip(&widths) {
            value.extend_from_slice(&tape.value(x)[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(tape.push(shape, value, Op::ConcatLast { inputs: xs.to_vec(), widths }, xs))
}

/// Zeroes last-axis channels where `keep` is false.
pub fn mask_last(tape: &mut Tape, x: Var, keep: &[bool]) -> Result<Var> {
    let last = last_dim(tape, x);
    if keep.len() != last {
        return Err(Error::dim("mask_last", format!("mask of {} for {last} channels", keep.len())));
    }
    let value = tape
        .value(x)
        .iter()
        .enumerate()
        .map(|(i, &v)| if keep[i % last] { v } else { 0.0 })
        .collect();
    let shape = tape.shape(x).to_vec();
    Ok(tape.push(shape, value, Op::MaskLast { input: x, keep: keep.to_vec() }, &[x]))
}

/// `x[:, step, :]` of a `[B, T, C]` tensor, giving `[B, C]`.
pub fn time_step(tape: &mut Tape, x: Var, step: usize) -> Result<Var> {
    let &[b, len, c] = tape.shape(x) else {
        return Err(Error::dim("time_step", format!("expected [B, T, C], got {:?}", tape.shape(x))));
    };
    if step >= len {
        return Err(Error::dim("time_step", format!("step {step} >= length {len}")));
    }
    let src = tape.value(x);
    let mut value = Vec::with_capacity(b * c);
    for bi in 0..b {
        let off = (bi * len + step) * c;
        value.extend_from_slice(&src[off..off + c]);
    }
    Ok(tape.push(vec![b, c], value, Op::TimeStep { input: x, step, len, channels: c }, &[x]))
}

pub(super) fn backward(op: &Op, g: &[f64], sink: &mut GradSink<'_>) {
    match op {
        Op::Reshape(x) => {
            if let Some(s) = sink.slot(*x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        }
        &Op::SliceLast { input, start, width } => {
            if let Some(s) = sink.slot(input) {
                let last = s.len() / (g.len() / width);
                for (row, grow) in s.chunks_exact_mut(last).zip(g.chunks_exact(width)) {
                    row[start..start + width].iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::ConcatLast { inputs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            for (&x, &w) in inputs.iter().zip(widths) {
                if let Some(s) = sink.slot(x) {
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        s[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(s, g)| *s += g);
                    }
                }
                offset += w;
            }
        }
        Op::MaskLast { input, keep } => {
            if let Some(s) = sink.slot(*input) {
                let last = keep.len();
                for (i, (s, g)) in s.iter_mut().zip(g).enumerate() {
                    if keep[i % last] {
                        *s += g;
                    }
                }
            }
        }
        &Op::TimeStep { input, step, len, channels } => {
            if let Some(s) = sink.slot(input) {
                for (bi, grow) in g.chunks_exact(channels).enumerate() {
                    let off = (bi * len + step) * channels;
                    s[off..off + channels].iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                }
            }
        }
        _ => unreachable!("not a layout op"),
    }
}
