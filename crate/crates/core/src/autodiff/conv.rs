//! Stride-1 "same" 1-D convolution over the time axis and non-overlapping
//! max pooling.
//!
//! Inputs are channels-last, `[B, T, C_in]` (or unbatched `[T, C_in]`),
//! filters are `[F, W, C_in]`. Same padding puts `(W - 1) / 2` zeros on the
//! left and the remainder on the right, so even widths get the extra zero on
//! the right.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    len: usize,
    c_in: usize,
    filters: usize,
    width: usize,
    left: usize,
}

/// Left padding used for a filter of width `w`.
pub fn same_padding_left(width: usize) -> usize {
    (width - 1) / 2
}

pub fn conv1d(tape: &mut Tape, x: Var, filters: Var, bias: Var) -> Result<Var> {
    let (batch, len, c_in, unbatched) = match *tape.shape(x) {
        [b, t, c] => (b, t, c, false),
        [t, c] => (1, t, c, true),
        ref s => return Err(Error::dim("conv1d", format!("input must be [B,T,C] or [T,C], got {s:?}"))),
    };
    let &[f, width, wc] = tape.shape(filters) else {
        return Err(Error::dim("conv1d", format!("filters must be [F,W,C], got {:?}", tape.shape(filters))));
    };
    if wc != c_in {
        return Err(Error::dim("conv1d", format!("filters expect {wc} input channels, input has {c_in}")));
    }
    if tape.shape(bias) != [f] {
        return Err(Error::dim("conv1d", format!("bias {:?} for {f} filters", tape.shape(bias))));
    }
    if width > len {
        return Err(Error::dim("conv1d", format!("filter width {width} exceeds length {len}")));
    }
    let geom = ConvGeom { batch, len, c_in, filters: f, width, left: same_padding_left(width) };

    let xv = tape.value(x);
    let wv = tape.value(filters);
    let bv = tape.value(bias);
    let mut out = vec![0.0; batch * len * f];
    for b in 0..batch {
        let xb = &xv[b * len * c_in..(b + 1) * len * c_in];
        for t in 0..len {
            let o = &mut out[(b * len + t) * f..(b * len + t + 1) * f];
            o.copy_from_slice(bv);
            for k in 0..width {
                let Some(src) = (t + k).checked_sub(geom.left).filter(|&s| s < len) else { continue };
                let xrow = &xb[src * c_in..(src + 1) * c_in];
                for (fi, o) in o.iter_mut().enumerate() {
                    let wrow = &wv[(fi * width + k) * c_in..(fi * width + k + 1) * c_in];
                    *o += dot(xrow, wrow);
                }
            }
        }
    }
    let shape = if unbatched { vec![len, f] } else { vec![batch, len, f] };
    Ok(tape.push(shape, out, Op::Conv1d(geom, x, filters, bias), &[x, filters, bias]))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(super) fn conv1d_backward(geom: &ConvGeom, x: Var, w: Var, b: Var, g: &[f64], sink: &mut GradSink<'_>) {
    let ConvGeom { batch, len, c_in, filters, width, left } = *geom;
    let xv = sink.value(x);
    let wv = sink.value(w);

    if let Some(db) = sink.slot(b) {
        for grow in g.chunks_exact(filters) {
            db.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
        }
    }
    if let Some(dw) = sink.slot(w) {
        for bi in 0..batch {
            for t in 0..len {
                let grow = &g[(bi * len + t) * filters..(bi * len + t + 1) * filters];
                for k in 0..width {
                    let Some(src) = (t + k).checked_sub(left).filter(|&s| s < len) else { continue };
                    let xrow = &xv[(bi * len + src) * c_in..(bi * len + src + 1) * c_in];
                    for (fi, &gf) in grow.iter().enumerate() {
                        let dwrow = &mut dw[(fi * width + k) * c_in..(fi * width + k + 1) * c_in];
                        dwrow.iter_mut().zip(xrow).for_each(|(d, x)| *d += gf * x);
                    }
                }
            }
        }
    }
    if let Some(dx) = sink.slot(x) {
        for bi in 0..batch {
            for t in 0..len {
                let grow = &g[(bi * len + t) * filters..(bi * len + t + 1) * filters];
                for k in 0..width {
                    let Some(src) = (t + k).checked_sub(left).filter(|&s| s < len) else { continue };
                    let dxrow = &mut dx[(bi * len + src) * c_in..(bi * len + src + 1) * c_in];
                    for (fi, &gf) in grow.iter().enumerate() {
                        let wrow = &wv[(fi * width + k) * c_in..(fi * width + k + 1) * c_in];
                        dxrow.iter_mut().zip(wrow).for_each(|(d, w)| *d += gf * w);
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling over time: `[B, T, C] -> [B, T / p, C]`,
/// trailing steps that do not fill a window are dropped.
pub fn maxpool1d(tape: &mut Tape, x: Var, pool: usize) -> Result<Var> {
    let &[batch, len, c] = tape.shape(x) else {
        return Err(Error::dim("maxpool1d", format!("expected [B,T,C], got {:?}", tape.shape(x))));
    };
    let out_len = len / pool.max(1);
    if pool == 0 || out_len == 0 {
        return Err(Error::dim("maxpool1d", format!("pool {pool} does not fit length {len}")));
    }
    let xv = tape.value(x);
    let mut out = Vec::with_capacity(batch * out_len * c);
    let mut argmax = Vec::with_capacity(batch * out_len * c);
    for b in 0..batch {
        for o in 0..out_len {
            for ch in 0..c {
                let mut best = (b * len + o * pool) * c + ch;
                for step in 1..pool {
                    let idx = (b * len + o * pool + step) * c + ch;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
    }
    Ok(tape.push(vec![batch, out_len, c], out, Op::MaxPool { input: x, argmax }, &[x]))
}

pub(super) fn maxpool_backward(x: Var, argmax: &[usize], g: &[f64], sink: &mut GradSink<'_>) {
    if let Some(dx) = sink.slot(x) {
        for (&src, &gv) in argmax.iter().zip(g) {
            dx[src] += gv;
        }
    }
}
