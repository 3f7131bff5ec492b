//! Selective state-space scan and the single-direction Mamba block.
//!
//! Per channel `d` and state `n`, with `h_0 = 0`:
//!
//! ```text
//! h_t = exp(Δ_t·A[d,n])·h_{t−1} + Δ_t·B_t[n]·u_t
//! y_t = Σ_n C_t[n]·h_t + D[d]·u_t
//! ```
//!
//! The decay uses a zero-order hold and the input term an Euler step.
//! `A = −exp(a_log)` keeps every decay factor inside `(0, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, Var};
use crate::error::{config_err, Error, Result};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Forward algorithm for the scan. Both produce every hidden state, which
/// the backward pass consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScanMode {
    /// Plain left-to-right recurrence.
    #[default]
    Sequential,
    /// Independent zero-start scans over blocks of this many steps, stitched
    /// together with the running decay product of each block.
    Chunked(usize),
}

/// Borrowed scan operands, all row-major:
/// `u, delta: B×L×D`, `a: D×N`, `b, c: B×L×N`, `d: D`.
pub struct ScanInputs<'a> {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
}

impl ScanInputs<'_> {
    fn readout(&self, bi: usize, t: usize, h: &[f64], y: &mut [f64]) {
        let (dd, n) = (self.channels, self.state);
        let row = bi * self.len + t;
        let c = &self.c[row * n..][..n];
        for d in 0..dd {
            let hd = &h[d * n..][..n];
            let mut acc = self.d[d] * self.u[row * dd + d];
            for k in 0..n {
                acc += c[k] * hd[k];
            }
            y[row * dd + d] = acc;
        }
    }
}

/// Returns `(y: B×L×D, states: B×L×D×N)`.
pub fn scan_forward(inp: &ScanInputs<'_>, mode: ScanMode) -> Result<(Vec<f64>, Vec<f64>)> {
    match mode {
        ScanMode::Sequential => scan_sequential(inp),
        ScanMode::Chunked(k) => scan_chunked(inp, k),
    }
}

pub fn scan_sequential(inp: &ScanInputs<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (l, dd, n) = (inp.len, inp.channels, inp.state);
    let mut y = vec![0.0; inp.batch * l * dd];
    let mut states = vec![0.0; inp.batch * l * dd * n];
    let mut h = vec![0.0; dd * n];
    for bi in 0..inp.batch {
        h.fill(0.0);
        for t in 0..l {
            let row = bi * l + t;
            let bt = &inp.b[row * n..][..n];
            for d in 0..dd {
                let (dt, ut) = (inp.delta[row * dd + d], inp.u[row * dd + d]);
                let ad = &inp.a[d * n..][..n];
                for k in 0..n {
                    let i = d * n + k;
                    h[i] = (dt * ad[k]).exp() * h[i] + dt * bt[k] * ut;
                }
            }
            check_finite(&h, bi, t)?;
            states[row * dd * n..][..dd * n].copy_from_slice(&h);
            inp.readout(bi, t, &h, &mut y);
        }
    }
    Ok((y, states))
}

pub fn scan_chunked(inp: &ScanInputs<'_>, chunk: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if chunk == 0 {
        return Err(config_err!("scan chunk size must be ≥ 1"));
    }
    let (l, dd, n) = (inp.len, inp.channels, inp.state);
    let dn = dd * n;
    let mut y = vec![0.0; inp.batch * l * dd];
    let mut states = vec![0.0; inp.batch * l * dn];
    let mut local = vec![0.0; chunk * dn];
    let mut decay = vec![0.0; chunk * dn];
    let mut carry = vec![0.0; dn];
    for bi in 0..inp.batch {
        carry.fill(0.0);
        for start in (0..l).step_by(chunk) {
            let width = chunk.min(l - start);
            // Zero-start scan inside the block plus its cumulative decay.
            for s in 0..width {
                let row = bi * l + start + s;
                let bt = &inp.b[row * n..][..n];
                for d in 0..dd {
                    let (dt, ut) = (inp.delta[row * dd + d], inp.u[row * dd + d]);
                    for k in 0..n {
                        let i = d * n + k;
                        let da = (dt * inp.a[i]).exp();
                        let (prev_l, prev_c) = if s == 0 {
                            (0.0, 1.0)
                        } else {
                            (local[(s - 1) * dn + i], decay[(s - 1) * dn + i])
                        };
                        local[s * dn + i] = da * prev_l + dt * bt[k] * ut;
                        decay[s * dn + i] = da * prev_c;
                    }
                }
            }
            // Stitch: h_t = local_t + decay_t · h_{start−1}.
            for s in 0..width {
                let t = start + s;
                let row = bi * l + t;
                let h = &mut states[row * dn..][..dn];
                for i in 0..dn {
                    h[i] = local[s * dn + i] + decay[s * dn + i] * carry[i];
                }
                check_finite(h, bi, t)?;
            }
            let last = (bi * l + start + width - 1) * dn;
            carry.copy_from_slice(&states[last..][..dn]);
            for s in 0..width {
                let row = bi * l + start + s;
                let h = &states[row * dn..][..dn];
                inp.readout(bi, start + s, h, &mut y);
            }
        }
    }
    Ok((y, states))
}

fn check_finite(h: &[f64], batch: usize, step: usize) -> Result<()> {
    if h.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "selective scan produced a non-finite hidden state at batch {batch}, step {step}"
        )))
    }
}

pub struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

/// Vector-Jacobian product of the scan given the stored hidden states.
pub fn scan_backward(inp: &ScanInputs<'_>, states: &[f64], dy: &[f64]) -> ScanGrads {
    let (l, dd, n) = (inp.len, inp.channels, inp.state);
    let dn = dd * n;
    let mut gr = ScanGrads {
        u: vec![0.0; inp.u.len()],
        delta: vec![0.0; inp.delta.len()],
        a: vec![0.0; inp.a.len()],
        b: vec![0.0; inp.b.len()],
        c: vec![0.0; inp.c.len()],
        d: vec![0.0; dd],
    };
    // Gradient flowing into h_t from later steps.
    let mut gh = vec![0.0; dn];
    for bi in 0..inp.batch {
        gh.fill(0.0);
        for t in (0..l).rev() {
            let row = bi * l + t;
            let h = &states[row * dn..][..dn];
            let ct = &inp.c[row * n..][..n];
            let bt = &inp.b[row * n..][..n];
            for d in 0..dd {
                let gy = dy[row * dd + d];
                let (dt, ut) = (inp.delta[row * dd + d], inp.u[row * dd + d]);
                gr.d[d] += gy * ut;
                gr.u[row * dd + d] += gy * inp.d[d];
                let mut g_dt = 0.0;
                let mut g_u = 0.0;
                for k in 0..n {
                    let i = d * n + k;
                    gr.c[row * n + k] += gy * h[i];
                    let g = gh[i] + gy * ct[k];
                    let da = (dt * inp.a[i]).exp();
                    let h_prev = if t > 0 { states[(row - 1) * dn + i] } else { 0.0 };
                    g_dt += g * (inp.a[i] * da * h_prev + bt[k] * ut);
                    gr.a[i] += g * dt * da * h_prev;
                    gr.b[row * n + k] += g * dt * ut;
                    g_u += g * dt * bt[k];
                    gh[i] = g * da;
                }
                gr.delta[row * dd + d] += g_dt;
                gr.u[row * dd + d] += g_u;
            }
        }
    }
    gr
}

// ---------------------------------------------------------------------------

/// Hyper-parameters of one Mamba branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmConfig {
    pub d_state: usize,
    pub expand: usize,
    /// `None` selects `ceil(C/16)`.
    pub dt_rank: Option<usize>,
    pub conv_width: usize,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            d_state: 8,
            expand: 2,
            dt_rank: None,
            conv_width: 3,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_state == 0 || self.expand == 0 {
            return Err(config_err!("d_state and expand must be ≥ 1"));
        }
        if self.conv_width % 2 == 0 {
            return Err(config_err!(
                "conv_width must be odd for same padding, got {}",
                self.conv_width
            ));
        }
        if !(0.0 < self.dt_min && self.dt_min <= self.dt_max) {
            return Err(config_err!("need 0 < dt_min ≤ dt_max"));
        }
        Ok(())
    }

    pub fn rank_for(&self, channels: usize) -> usize {
        self.dt_rank.unwrap_or(channels.div_ceil(16)).max(1)
    }
}

/// Parameters of one selective state-space branch operating on `C`
/// channels with inner width `E·C`.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub channels: usize,
    pub inner: usize,
    pub state: usize,
    pub in_proj_w: ParamId,
    pub in_proj_b: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub dt_down: ParamId,
    pub dt_up: ParamId,
    pub dt_bias: ParamId,
    pub b_proj: ParamId,
    pub c_proj: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj_w: ParamId,
    pub out_proj_b: ParamId,
}

impl SsmParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        cfg: &SsmConfig,
        rng: &mut R,
    ) -> Self {
        let inner = cfg.expand * channels;
        let n = cfg.d_state;
        let rank = cfg.rank_for(channels);
        let k = cfg.conv_width;
        let p = |s: &str| format!("{prefix}.{s}");

        let in_proj_w = store.add(p("in_proj.weight"), fan_in_uniform(&[2 * inner, channels], channels, rng));
        let in_proj_b = store.add(p("in_proj.bias"), Tensor::zeros(&[2 * inner]));
        let conv_w = store.add(p("conv.weight"), fan_in_uniform(&[inner, k], k, rng));
        let conv_b = store.add(p("conv.bias"), Tensor::zeros(&[inner]));
        let dt_down = store.add(p("dt_down.weight"), fan_in_uniform(&[rank, inner], inner, rng));
        let dt_up = store.add(p("dt_up.weight"), fan_in_uniform(&[inner, rank], rank, rng));
        // softplus(bias) log-uniform in [dt_min, dt_max]
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let dt_bias: Vec<f64> = (0..inner)
            .map(|_| {
                let dt = rng.random_range(lo..=hi).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let dt_bias = store.add(p("dt_bias"), Tensor::from_parts(vec![inner], dt_bias));
        let b_proj = store.add(p("b_proj.weight"), fan_in_uniform(&[n, inner], inner, rng));
        let c_proj = store.add(p("c_proj.weight"), fan_in_uniform(&[n, inner], inner, rng));
        let a_log: Vec<f64> = (0..inner)
            .flat_map(|_| (1..=n).map(|s| (s as f64).ln()))
            .collect();
        let a_log = store.add(p("a_log"), Tensor::from_parts(vec![inner, n], a_log));
        let d_skip = store.add(p("d_skip"), Tensor::ones(&[inner]));
        let out_proj_w = store.add(p("out_proj.weight"), fan_in_uniform(&[channels, inner], inner, rng));
        let out_proj_b = store.add(p("out_proj.bias"), Tensor::zeros(&[channels]));
        Self {
            channels,
            inner,
            state: n,
            in_proj_w,
            in_proj_b,
            conv_w,
            conv_b,
            dt_down,
            dt_up,
            dt_bias,
            b_proj,
            c_proj,
            a_log,
            d_skip,
            out_proj_w,
            out_proj_b,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 13] {
        [
            self.in_proj_w,
            self.in_proj_b,
            self.conv_w,
            self.conv_b,
            self.dt_down,
            self.dt_up,
            self.dt_bias,
            self.b_proj,
            self.c_proj,
            self.a_log,
            self.d_skip,
            self.out_proj_w,
            self.out_proj_b,
        ]
    }

    /// Input-dependent scan over `u: B×L×(E·C)`: derives Δ, B and C from
    /// `u` and runs the recurrence.
    pub fn selective_scan(&self, g: &mut Graph, ps: &ParamStore, u: Var) -> Result<Var> {
        let low = {
            let w = g.param(ps, self.dt_down);
            g.linear(u, w, None)?
        };
        let dt = {
            let (w, b) = (g.param(ps, self.dt_up), g.param(ps, self.dt_bias));
            g.linear(low, w, Some(b))?
        };
        let delta = g.softplus(dt);
        let bm = {
            let w = g.param(ps, self.b_proj);
            g.linear(u, w, None)?
        };
        let cm = {
            let w = g.param(ps, self.c_proj);
            g.linear(u, w, None)?
        };
        let a = {
            let a_log = g.param(ps, self.a_log);
            let e = g.exp(a_log);
            g.scale(e, -1.0)
        };
        let d = g.param(ps, self.d_skip);
        g.selective_scan(u, delta, a, bm, cm, d)
    }

    /// Mamba block on `x: B×L×C`: in-projection to `(u, z)`, depthwise
    /// sequence conv and SiLU on `u`, selective scan, SiLU(z) gate,
    /// out-projection back to `C`.
    pub fn mamba_block(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let c = *g.shape(x).last().unwrap();
        if c != self.channels {
            return Err(crate::error::shape_err!(
                "mamba block built for {} channels, got input {:?}",
                self.channels,
                g.shape(x)
            ));
        }
        let xz = {
            let (w, b) = (g.param(ps, self.in_proj_w), g.param(ps, self.in_proj_b));
            g.linear(x, w, Some(b))?
        };
        let u = g.slice(xz, 2, 0, self.inner)?;
        let z = g.slice(xz, 2, self.inner, self.inner)?;
        let u = {
            let (w, b) = (g.param(ps, self.conv_w), g.param(ps, self.conv_b));
            g.dwconv1d(u, w, Some(b))?
        };
        let u = g.silu(u);
        let y = self.selective_scan(g, ps, u)?;
        let gate = g.silu(z);
        let y = g.mul(y, gate)?;
        let (w, b) = (g.param(ps, self.out_proj_w), g.param(ps, self.out_proj_b));
        g.linear(y, w, Some(b))
    }
}

/// Step sizes `softplus(bias)` implied by the current Δ bias.
pub fn dt_from_bias(bias: &Tensor) -> Vec<f64> {
    bias.data().iter().map(|&b| softplus(b)).collect()
}

/// ScanOperands scan operands, mainly for oracles and benchmarks.
#[derive(Clone, Debug)]
pub struct ScanOperands {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl ScanOperands {
    /// Seeded operands in a stable regime (negative `A`, small `Δ`).
    pub fn random(batch: usize, len: usize, channels: usize, state: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(lo..hi)).collect()
        };
        Self {
            batch,
            len,
            channels,
            state,
            u: v(batch * len * channels, -1.0, 1.0),
            delta: v(batch * len * channels, 0.01, 0.5),
            a: v(channels * state, -2.0, -0.05),
            b: v(batch * len * state, -1.0, 1.0),
            c: v(batch * len * state, -1.0, 1.0),
            d: v(channels, -1.0, 1.0),
        }
    }

    pub fn view(&self) -> ScanInputs<'_> {
        ScanInputs {
            batch: self.batch,
            len: self.len,
            channels: self.channels,
            state: self.state,
            u: &self.u,
            delta: &self.delta,
            a: &self.a,
            b: &self.b,
            c: &self.c,
            d: &self.d,
        }
    }
}
