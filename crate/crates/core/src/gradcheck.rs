//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, OpKind, Var};
use crate::backbone::Marmamba;
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// How the error of one component is normalised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RelError {
    /// `|a − n| / max(1, |a|)`.
    UnitFloor,
    /// `|a − n| / max(|a|, |n|, floor·max_j |n_j|)`: scale aware, used for
    /// whole-model checks where gradients span many orders of magnitude.
    ScaleAware { floor: f64 },
}

impl RelError {
    fn eval(self, analytic: f64, numeric: f64, scale: f64) -> f64 {
        let diff = (analytic - numeric).abs();
        match self {
            RelError::UnitFloor => diff / analytic.abs().max(1.0),
            RelError::ScaleAware { floor } => {
                let den = analytic.abs().max(numeric.abs()).max(floor * scale);
                if den == 0.0 {
                    0.0
                } else {
                    diff / den
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradReport {
    pub checked: usize,
    pub total: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Components whose relative error exceeded the tolerance.
    pub failures: Vec<GradMismatch>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_rel_err.is_finite()
    }

    fn record(&mut self, name: &str, index: usize, a: f64, n: f64, rel: f64) {
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max((a - n).abs());
        if rel.is_nan() || rel > self.max_rel_err {
            self.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
        }
        if !(rel <= self.tolerance) {
            self.failures.push(GradMismatch {
                name: name.to_string(),
                index,
                analytic: a,
                numeric: n,
                rel_err: rel,
            });
        }
    }
}

/// Checks the gradient of the scalar produced by `f` w.r.t. every element
/// of every tensor in `inputs`.
pub fn check_fn<F>(inputs: &[Tensor], f: F, step: f64, tol: f64, metric: RelError) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };
    let mut g = Graph::train();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[ti].len());
        for i in 0..inputs[ti].len() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + step;
            let fp = eval(&work)?;
            work[ti].data_mut()[i] = orig - step;
            let fm = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            col.push((fp - fm) / (2.0 * step));
        }
        numeric.push(col);
    }
    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut report = GradReport {
        tolerance: tol,
        ..Default::default()
    };
    for (ti, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&a, &n)) in a.iter().zip(n).enumerate() {
            report.total += 1;
            report.record(&format!("input{ti}"), i, a, n, metric.eval(a, n, scale));
        }
    }
    Ok(report)
}

/// Options for [`gradcheck_model`].
#[derive(Clone, Debug)]
pub struct ModelCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Above this many scalars only a seeded subsample is checked.
    pub full_check_limit: usize,
    pub subsample_fraction: f64,
    pub seed: u64,
    pub metric: RelError,
    /// Negative control: corrupt the backward rule of this op kind.
    pub fault: Option<OpKind>,
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            full_check_limit: 2000,
            subsample_fraction: 0.05,
            seed: 0,
            metric: RelError::ScaleAware { floor: 1e-3 },
            fault: None,
        }
    }
}

/// Compares analytic parameter gradients of the combined training loss
/// with central differences over every parameter scalar (or a seeded
/// subsample for larger models).
pub fn gradcheck_model(
    net: &Marmamba,
    params: &ParamStore,
    input: &Tensor,
    target: &Tensor,
    loss_cfg: &LossConfig,
    opts: &ModelCheckOptions,
) -> Result<GradReport> {
    let loss_at = |ps: &ParamStore, g: &mut Graph| -> Result<Var> {
        let x = g.constant(input.clone());
        let y = g.constant(target.clone());
        let out = net.forward(g, ps, x)?;
        Ok(combined_loss(g, y, out, loss_cfg)?.total)
    };

    let mut g = Graph::train();
    g.inject_fault(opts.fault);
    let loss = loss_at(params, &mut g)?;
    g.backward(loss)?;
    let mut work = params.clone();
    work.zero_grad();
    work.accumulate_grads(&g);

    // (param, element) pairs in canonical order.
    let all: Vec<(usize, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id.index(), i)))
        .collect();
    let chosen: Vec<(usize, usize)> = if all.len() <= opts.full_check_limit {
        all.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let k = ((all.len() as f64 * opts.subsample_fraction).ceil() as usize).max(1);
        let mut idx = sample(&mut rng, all.len(), k).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i]).collect()
    };

    let eval = |ps: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss_at(ps, &mut g)?;
        g.value(l).item()
    };
    let ids: Vec<_> = params.ids().collect();
    let mut numeric = Vec::with_capacity(chosen.len());
    let mut probe = params.clone();
    for &(p, i) in &chosen {
        let t = probe.get_mut(ids[p]);
        let orig = t.data()[i];
        t.data_mut()[i] = orig + opts.step;
        let fp = eval(&probe)?;
        probe.get_mut(ids[p]).data_mut()[i] = orig - opts.step;
        let fm = eval(&probe)?;
        probe.get_mut(ids[p]).data_mut()[i] = orig;
        numeric.push((fp - fm) / (2.0 * opts.step));
    }
    if numeric.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("finite-difference loss is not finite".into()));
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut report = GradReport {
        tolerance: opts.tolerance,
        total: all.len(),
        ..Default::default()
    };
    for (&(p, i), &n) in chosen.iter().zip(&numeric) {
        let a = work.get(ids[p]).grad().map_or(0.0, |g| g[i]);
        report.record(params.name(ids[p]), i, a, n, opts.metric.eval(a, n, scale));
    }
    Ok(report)
}
