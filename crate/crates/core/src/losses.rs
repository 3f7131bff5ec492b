//! Training objective: a pseudo-Huber fidelity term plus a perceptual term.
//!
//! The perceptual term is a deterministic stand-in for a learned perceptual
//! metric: a fixed, seeded three-layer convolutional pyramid whose features
//! are unit-normalised per pixel and compared with a mean squared distance.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

/// How the residual norm inside the pseudo-Huber loss is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HuberNorm {
    /// Root-mean-square residual (resolution independent).
    #[default]
    Rms,
    /// Plain L2 norm of the residual.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualMode {
    Off,
    #[default]
    FixedFeature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    pub perceptual: PerceptualMode,
    pub huber_norm: HuberNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.2,
            c: 0.03,
            perceptual: PerceptualMode::FixedFeature,
            huber_norm: HuberNorm::Rms,
        }
    }
}

/// Loss-term selection, mirroring the loss ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Phuber,
    Lpips,
    Both,
}

impl std::str::FromStr for LossKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phuber" => Ok(LossKind::Phuber),
            "lpips" => Ok(LossKind::Lpips),
            "both" => Ok(LossKind::Both),
            _ => Err(config_err!("unknown loss {s:?} (phuber|lpips|both)")),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(config_err!(
                "need alpha, beta ≥ 0 and alpha + beta > 0 (got {}, {})",
                self.alpha,
                self.beta
            ));
        }
        if self.c <= 0.0 {
            return Err(config_err!("pseudo-Huber c must be > 0, got {}", self.c));
        }
        Ok(())
    }

    /// Applies a loss ablation: a single term keeps unit weight.
    pub fn with_kind(mut self, kind: LossKind) -> Self {
        match kind {
            LossKind::Phuber => {
                self.alpha = 1.0;
                self.beta = 0.0;
            }
            LossKind::Lpips => {
                self.alpha = 0.0;
                self.beta = 1.0;
                self.perceptual = PerceptualMode::FixedFeature;
            }
            LossKind::Both => {}
        }
        self
    }

    fn uses_perceptual(&self) -> bool {
        self.beta > 0.0 && self.perceptual == PerceptualMode::FixedFeature
    }
}

/// `sqrt(‖y − ŷ‖² + c²) − c`.
pub fn pseudo_huber(g: &mut Graph, y: Var, y_hat: Var, c: f64, norm: HuberNorm) -> Result<Var> {
    if c <= 0.0 {
        return Err(config_err!("pseudo-Huber c must be > 0, got {c}"));
    }
    let d = g.sub(y, y_hat)?;
    let sq = g.square(d);
    let r2 = match norm {
        HuberNorm::Rms => g.mean_all(sq),
        HuberNorm::Sum => g.sum_all(sq),
    };
    let s = g.add_scalar(r2, c * c);
    let root = g.sqrt(s);
    Ok(g.add_scalar(root, -c))
}

const FEATURE_SEED: u64 = 0x4d41_524d_414d_4241;
const FEATURE_WIDTHS: [usize; 3] = [8, 16, 32];
const NORM_EPS: f64 = 1e-10;

/// Fixed convolutional feature pyramid used by [`perceptual_distance`].
pub struct FeaturePyramid {
    /// `(weight, stride)` per layer, 3×3 kernels with padding 1.
    layers: Vec<(Tensor, usize)>,
}

impl FeaturePyramid {
    fn build() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let mut cin = 1;
        let mut layers = Vec::new();
        for (i, &cout) in FEATURE_WIDTHS.iter().enumerate() {
            let fan = (cin * 9) as f64;
            let w = Tensor::randn(&[cout, cin, 3, 3], &mut rng).map(|v| v / fan.sqrt());
            layers.push((w, if i == 0 { 1 } else { 2 }));
            cin = cout;
        }
        Self { layers }
    }

    pub fn shared() -> &'static FeaturePyramid {
        static NET: OnceLock<FeaturePyramid> = OnceLock::new();
        NET.get_or_init(FeaturePyramid::build)
    }

    /// Raw (un-normalised) features of every layer.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, (w, stride)) in self.layers.iter().enumerate() {
            let inp = if i == 0 { h } else { g.tanh(h) };
            let wv = g.constant(w.clone());
            h = g.conv2d(inp, wv, None, *stride, 1)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Mean over layers of the mean squared difference of unit-normalised
/// features. Inputs are `B×1×H×W`.
pub fn perceptual_distance(g: &mut Graph, y: Var, y_hat: Var) -> Result<Var> {
    if g.shape(y) != g.shape(y_hat) {
        return Err(shape_err!(
            "perceptual distance: {:?} vs {:?}",
            g.shape(y),
            g.shape(y_hat)
        ));
    }
    let (_, c, _, _) = g.value(y).dims4()?;
    if c != 1 {
        return Err(shape_err!("perceptual distance expects single-channel images, got {c}"));
    }
    let net = FeaturePyramid::shared();
    let fa = net.features(g, y)?;
    let fb = net.features(g, y_hat)?;
    let mut total: Option<Var> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let na = g.unit_normalize(a, NORM_EPS)?;
        let nb = g.unit_normalize(b, NORM_EPS)?;
        let d = g.sub(na, nb)?;
        let sq = g.square(d);
        let m = g.mean_all(sq);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / FEATURE_WIDTHS.len() as f64))
}

/// Convenience evaluation of [`perceptual_distance`] on plain images
/// (`H×W` or `B×1×H×W`).
pub fn perceptual_value(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    let as4 = |t: &Tensor| -> Result<Tensor> {
        if t.ndim() == 4 {
            Ok(t.clone())
        } else {
            let (h, w) = t.image_dims()?;
            t.clone().reshape(&[1, 1, h, w])
        }
    };
    let mut g = Graph::inference();
    let a = g.constant(as4(y)?);
    let b = g.constant(as4(y_hat)?);
    let d = perceptual_distance(&mut g, a, b)?;
    g.value(d).item()
}

pub struct LossTerms {
    pub total: Var,
    pub phuber: Var,
    pub perceptual: Option<Var>,
}

/// `α·L_pHuber + β·L_perceptual`. The perceptual term is skipped when its
/// weight is zero or it is switched off.
pub fn combined_loss(g: &mut Graph, y: Var, y_hat: Var, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let phuber = pseudo_huber(g, y, y_hat, cfg.c, cfg.huber_norm)?;
    let mut total = g.scale(phuber, cfg.alpha);
    let perceptual = if cfg.uses_perceptual() {
        let p = perceptual_distance(g, y, y_hat)?;
        let wp = g.scale(p, cfg.beta);
        total = g.add(total, wp)?;
        Some(p)
    } else {
        None
    };
    Ok(LossTerms {
        total,
        phuber,
        perceptual,
    })
}
