use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};

/// Affine map `x · W + b` for `x: [B, m]`, `W: [m, n]`, `b: [n]`.
pub fn dense(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let &[rows, m] = tape.shape(x) else {
        return Err(Error::dim("dense", format!("input must be [B, m], got {:?}", tape.shape(x))));
    };
    let &[wm, n] = tape.shape(weight) else {
        return Err(Error::dim("dense", format!("weight must be [m, n], got {:?}", tape.shape(weight))));
    };
    if wm != m {
        return Err(Error::dim("dense", format!("input width {m} vs weight rows {wm}")));
    }
    if tape.shape(bias) != [n] {
        return Err(Error::dim("dense", format!("bias {:?} for {n} outputs", tape.shape(bias))));
    }
    let (xv, wv, bv) = (tape.value(x), tape.value(weight), tape.value(bias));
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        let xrow = &xv[r * m..(r + 1) * m];
        let start = out.len();
        out.extend_from_slice(bv);
        let orow = &mut out[start..];
        for (i, &xi) in xrow.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &wv[i * n..(i + 1) * n];
            orow.iter_mut().zip(wrow).for_each(|(o, w)| *o += xi * w);
        }
    }
    Ok(tape.push(vec![rows, n], out, Op::Dense { input: x, weight, bias, rows, m, n }, &[x, weight, bias]))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn dense_backward(
    x: Var,
    w: Var,
    b: Var,
    rows: usize,
    m: usize,
    n: usize,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let xv = sink.value(x);
    let wv = sink.value(w);
    if let Some(db) = sink.slot(b) {
        for grow in g.chunks_exact(n) {
            db.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
        }
    }
    if let Some(dw) = sink.slot(w) {
        for r in 0..rows {
            let grow = &g[r * n..(r + 1) * n];
            for i in 0..m {
                let xi = xv[r * m + i];
                if xi == 0.0 {
                    continue;
                }
                dw[i * n..(i + 1) * n].iter_mut().zip(grow).for_each(|(d, g)| *d += xi * g);
            }
        }
    }
    if let Some(dx) = sink.slot(x) {
        for r in 0..rows {
            let grow = &g[r * n..(r + 1) * n];
            for i in 0..m {
                let wrow = &wv[i * n..(i + 1) * n];
                dx[r * m + i] += wrow.iter().zip(grow).map(|(w, g)| w * g).sum::<f64>();
            }
        }
    }
}
