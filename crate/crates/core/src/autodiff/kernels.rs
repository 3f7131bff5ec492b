//! Forward and vector-Jacobian kernels over raw slices.
//!
//! All loops run in a fixed order so that results are bit-reproducible.

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeom {
    /// Output positions `lo..hi` whose tap lands inside the input, with the
    /// input offset of `lo`.
    #[inline]
    fn span(&self, tap: usize, extent: usize, out: usize) -> (usize, usize, usize) {
        let s = self.stride;
        let lo = if self.pad > tap { (self.pad - tap).div_ceil(s) } else { 0 };
        let hi = if extent + self.pad > tap {
            ((extent + self.pad - tap - 1) / s + 1).min(out)
        } else {
            0
        };
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo, hi, lo * s + tap - self.pad)
    }
}

pub(crate) fn conv2d_forward(g: &Conv2dGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (hw_in, hw_out, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let s = g.stride;
    let mut y = vec![0.0; g.b * g.cout * hw_out];
    for b in 0..g.b {
        for co in 0..g.cout {
            let out = &mut y[(b * g.cout + co) * hw_out..][..hw_out];
            if let Some(bias) = bias {
                out.fill(bias[co]);
            }
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * hw_in..][..hw_in];
                let wk = &w[(co * g.cin + ci) * kk..][..kk];
                for kh in 0..g.k {
                    let (y0, y1, iy0) = g.span(kh, g.h, g.oh);
                    for kw in 0..g.k {
                        let (x0, x1, ix0) = g.span(kw, g.w, g.ow);
                        let wv = wk[kh * g.k + kw];
                        for (r, oy) in (y0..y1).enumerate() {
                            let iy = iy0 + r * s;
                            let orow = &mut out[oy * g.ow + x0..oy * g.ow + x1];
                            let row = &xin[iy * g.w + ix0..];
                            if s == 1 {
                                for (o, &xv) in orow.iter_mut().zip(row) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * row[j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`; a component is only computed when requested.
pub(crate) fn conv2d_backward(
    g: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (hw_in, hw_out, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let s = g.stride;
    let mut dx = want[0].then(|| vec![0.0; x.len()]);
    let mut dw = want[1].then(|| vec![0.0; w.len()]);
    let db = want[2].then(|| {
        let mut db = vec![0.0; g.cout];
        for b in 0..g.b {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dy[(b * g.cout + co) * hw_out..][..hw_out].iter().sum::<f64>();
            }
        }
        db
    });
    for b in 0..g.b {
        for co in 0..g.cout {
            let gout = &dy[(b * g.cout + co) * hw_out..][..hw_out];
            for ci in 0..g.cin {
                let base_x = (b * g.cin + ci) * hw_in;
                let base_w = (co * g.cin + ci) * kk;
                for kh in 0..g.k {
                    let (y0, y1, iy0) = g.span(kh, g.h, g.oh);
                    for kw in 0..g.k {
                        let (x0, x1, ix0) = g.span(kw, g.w, g.ow);
                        let wv = w[base_w + kh * g.k + kw];
                        let mut acc_w = 0.0;
                        for (r, oy) in (y0..y1).enumerate() {
                            let iy = iy0 + r * s;
                            let grow = &gout[oy * g.ow + x0..oy * g.ow + x1];
                            let xs = base_x + iy * g.w + ix0;
                            if s == 1 {
                                let xrow = &x[xs..xs + grow.len()];
                                for (&go, &xv) in grow.iter().zip(xrow) {
                                    acc_w += go * xv;
                                }
                                if let Some(dx) = dx.as_mut() {
                                    for (d, &go) in dx[xs..xs + grow.len()].iter_mut().zip(grow) {
                                        *d += go * wv;
                                    }
                                }
                            } else {
                                for (j, &go) in grow.iter().enumerate() {
                                    acc_w += go * x[xs + j * s];
                                }
                                if let Some(dx) = dx.as_mut() {
                                    for (j, &go) in grow.iter().enumerate() {
                                        dx[xs + j * s] += go * wv;
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[base_w + kh * g.k + kw] += acc_w;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution geometry: weight `Cin×Cout×k×k`, no padding,
/// output extent `(H−1)·stride + k`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvT2dGeom {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_t2d_forward(g: &ConvT2dGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (hw_in, hw_out, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let mut y = vec![0.0; g.b * g.cout * hw_out];
    for b in 0..g.b {
        for co in 0..g.cout {
            let out = &mut y[(b * g.cout + co) * hw_out..][..hw_out];
            if let Some(bias) = bias {
                out.fill(bias[co]);
            }
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * hw_in..][..hw_in];
                let wk = &w[(ci * g.cout + co) * kk..][..kk];
                for iy in 0..g.h {
                    for ix in 0..g.w {
                        let xv = xin[iy * g.w + ix];
                        for kh in 0..g.k {
                            for kw in 0..g.k {
                                out[(iy * g.stride + kh) * g.ow + ix * g.stride + kw] += xv * wk[kh * g.k + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv_t2d_backward(
    g: &ConvT2dGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (hw_in, hw_out, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let mut dx = want[0].then(|| vec![0.0; x.len()]);
    let mut dw = want[1].then(|| vec![0.0; w.len()]);
    let db = want[2].then(|| {
        let mut db = vec![0.0; g.cout];
        for b in 0..g.b {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dy[(b * g.cout + co) * hw_out..][..hw_out].iter().sum::<f64>();
            }
        }
        db
    });
    for b in 0..g.b {
        for co in 0..g.cout {
            let gout = &dy[(b * g.cout + co) * hw_out..][..hw_out];
            for ci in 0..g.cin {
                let base_x = (b * g.cin + ci) * hw_in;
                let base_w = (ci * g.cout + co) * kk;
                for iy in 0..g.h {
                    for ix in 0..g.w {
                        let xv = x[base_x + iy * g.w + ix];
                        let mut acc_x = 0.0;
                        for kh in 0..g.k {
                            for kw in 0..g.k {
                                let go = gout[(iy * g.stride + kh) * g.ow + ix * g.stride + kw];
                                acc_x += go * w[base_w + kh * g.k + kw];
                                if let Some(dw) = dw.as_mut() {
                                    dw[base_w + kh * g.k + kw] += go * xv;
                                }
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            dx[base_x + iy * g.w + ix] += acc_x;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// `(outer, axis, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Layer norm over the last axis of width `c`. Returns `(y, mean, rstd)`.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    c: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut y = vec![0.0; x.len()];
    let mut mean = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * c..][..c];
        let mu = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for (j, out) in y[r * c..][..c].iter_mut().enumerate() {
            *out = (xr[j] - mu) * rs * gamma[j] + beta[j];
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
    (y, mean, rstd)
}

pub(crate) fn layer_norm_backward(
    x: &[f64],
    gamma: &[f64],
    mean: &[f64],
    rstd: &[f64],
    dy: &[f64],
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for r in 0..rows {
        let (mu, rs) = (mean[r], rstd[r]);
        let xr = &x[r * c..][..c];
        let gr = &dy[r * c..][..c];
        for j in 0..c {
            xhat[j] = (xr[j] - mu) * rs;
            dxhat[j] = gr[j] * gamma[j];
            dgamma[j] += gr[j] * xhat[j];
            dbeta[j] += gr[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / c as f64;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for (j, d) in dx[r * c..][..c].iter_mut().enumerate() {
            *d = rs * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (dx, dgamma, dbeta)
}

/// `y[rows×cout] = x[rows×cin] · wᵀ + b`, with `w` stored `cout×cin`.
pub(crate) fn linear_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, cin: usize, cout: usize) -> Vec<f64> {
    let rows = x.len() / cin;
    let mut y = vec![0.0; rows * cout];
    for r in 0..rows {
        let xr = &x[r * cin..][..cin];
        for (o, out) in y[r * cout..][..cout].iter_mut().enumerate() {
            let wr = &w[o * cin..][..cin];
            let mut acc = bias.map_or(0.0, |b| b[o]);
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            *out = acc;
        }
    }
    y
}

pub(crate) fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    cin: usize,
    cout: usize,
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let rows = x.len() / cin;
    let mut dx = want[0].then(|| vec![0.0; x.len()]);
    let mut dw = want[1].then(|| vec![0.0; w.len()]);
    let mut db = want[2].then(|| vec![0.0; cout]);
    for r in 0..rows {
        let xr = &x[r * cin..][..cin];
        let gr = &dy[r * cout..][..cout];
        for (o, &go) in gr.iter().enumerate() {
            if let Some(db) = db.as_mut() {
                db[o] += go;
            }
            if let Some(dw) = dw.as_mut() {
                for (d, &xv) in dw[o * cin..][..cin].iter_mut().zip(xr) {
                    *d += go * xv;
                }
            }
            if let Some(dx) = dx.as_mut() {
                let wr = &w[o * cin..][..cin];
                for (d, &wv) in dx[r * cin..][..cin].iter_mut().zip(wr) {
                    *d += go * wv;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise 1-D convolution along `L` of a `B×L×C` tensor, kernel `C×k`
/// (odd `k`), symmetric zero padding.
pub(crate) fn dwconv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, bsz: usize, l: usize, c: usize, k: usize) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut y = vec![0.0; x.len()];
    for b in 0..bsz {
        for t in 0..l {
            let out = &mut y[(b * l + t) * c..][..c];
            if let Some(bias) = bias {
                out.copy_from_slice(bias);
            }
            for j in 0..k {
                let s = t as isize + j as isize - half;
                if s < 0 || s >= l as isize {
                    continue;
                }
                let xs = &x[(b * l + s as usize) * c..][..c];
                for ch in 0..c {
                    out[ch] += w[ch * k + j] * xs[ch];
                }
            }
        }
    }
    y
}

pub(crate) fn dwconv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dims: (usize, usize, usize, usize),
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (bsz, l, c, k) = dims;
    let half = (k / 2) as isize;
    let mut dx = want[0].then(|| vec![0.0; x.len()]);
    let mut dw = want[1].then(|| vec![0.0; w.len()]);
    let mut db = want[2].then(|| vec![0.0; c]);
    for b in 0..bsz {
        for t in 0..l {
            let gr = &dy[(b * l + t) * c..][..c];
            if let Some(db) = db.as_mut() {
                db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
            }
            for j in 0..k {
                let s = t as isize + j as isize - half;
                if s < 0 || s >= l as isize {
                    continue;
                }
                let base = (b * l + s as usize) * c;
                for ch in 0..c {
                    if let Some(dw) = dw.as_mut() {
                        dw[ch * k + j] += gr[ch] * x[base + ch];
                    }
                    if let Some(dx) = dx.as_mut() {
                        dx[base + ch] += gr[ch] * w[ch * k + j];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let inner = K * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
