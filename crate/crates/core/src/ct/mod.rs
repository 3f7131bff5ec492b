//! Desk-scale CT simulation: ellipse phantoms, metal inserts, sinogram
//! corruption, reconstruction and dataset packaging.

mod dataset;
mod fixture;
mod projection;

pub use dataset::{
    load_dataset, sample_seed, synth_dataset, synth_sample, Calibration, Dataset, Manifest, ManifestEntry,
    SynthConfig, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use fixture::{CtFixture, FixtureReport};
pub use projection::{coord, fbp, fbp_raw, pixel_size, radon, RampFilter, SinogramConfig, RECON_MAX};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SizeGroup;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn circle(cx: f64, cy: f64, r: f64, intensity: f64) -> Self {
        Self {
            cx,
            cy,
            a: r,
            b: r,
            angle: 0.0,
            intensity,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        (xr / self.a).powi(2) + (yr / self.b).powi(2) <= 1.0
    }
}

/// Ellipses on the `[-1, 1]²` field of view of an `n×n` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n: usize,
    pub ellipses: Vec<Ellipse>,
}

impl PhantomSpec {
    /// A body ellipse plus `k − 1` random inner structures, all inside the
    /// unit disk.
    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Self {
        let mut ellipses = Vec::with_capacity(k);
        if k > 0 {
            ellipses.push(Ellipse {
                cx: rng.random_range(-0.05..0.05),
                cy: rng.random_range(-0.05..0.05),
                a: rng.random_range(0.75..0.88),
                b: rng.random_range(0.6..0.8),
                angle: rng.random_range(-0.3..0.3),
                intensity: rng.random_range(0.4..0.55),
            });
        }
        while ellipses.len() < k {
            let e = Ellipse {
                cx: rng.random_range(-0.5..0.5),
                cy: rng.random_range(-0.5..0.5),
                a: rng.random_range(0.05..0.3),
                b: rng.random_range(0.05..0.3),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                intensity: rng.random_range(0.0..0.25),
            };
            if (e.cx.hypot(e.cy) + e.a.max(e.b)) <= 0.7 {
                ellipses.push(e);
            }
        }
        Self { n, ellipses }
    }
}

/// Rasterises the phantom at pixel centres; overlapping intensities add and
/// the result is clipped to `[0, 1]`.
pub fn make_phantom(spec: &PhantomSpec) -> Tensor {
    let n = spec.n;
    let mut img = Tensor::zeros(&[n, n]);
    for (idx, v) in img.data_mut().iter_mut().enumerate() {
        let (x, y) = (coord(idx % n, n), coord(idx / n, n));
        let s: f64 = spec.ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum();
        *v = s.clamp(0.0, 1.0);
    }
    img
}

pub const METAL_MU: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetalSpec {
    /// `(cx, cy, radius)` in field-of-view units.
    pub disks: Vec<(f64, f64, f64)>,
    pub mu: f64,
}

impl MetalSpec {
    pub fn none() -> Self {
        Self {
            disks: Vec::new(),
            mu: METAL_MU,
        }
    }

    /// Binary mask (1 = metal) on an `n×n` grid.
    pub fn mask(&self, n: usize) -> Tensor {
        let mut m = Tensor::zeros(&[n, n]);
        for (idx, v) in m.data_mut().iter_mut().enumerate() {
            let (x, y) = (coord(idx % n, n), coord(idx / n, n));
            if self.disks.iter().any(|&(cx, cy, r)| (x - cx).hypot(y - cy) <= r) {
                *v = 1.0;
            }
        }
        m
    }

    pub fn image(&self, n: usize) -> Tensor {
        self.mask(n).map(|v| v * self.mu)
    }

    /// One disk whose pixel count falls in `group` on an `n×n` grid,
    /// centred at a random point inside the body.
    pub fn preset<R: Rng + ?Sized>(group: SizeGroup, n: usize, rng: &mut R) -> Self {
        let scale = n as f64 / crate::metrics::REFERENCE_GRID as f64;
        let area_px = group.reference_count() * scale * scale;
        let px = pixel_size(n);
        let (rho, phi) = (rng.random_range(0.0..0.4), rng.random_range(0.0..std::f64::consts::TAU));
        let snap = |v: f64| coord(((v / px + n as f64 / 2.0 - 0.5).round() as usize).min(n - 1), n);
        let (cx, cy) = (snap(rho * phi.cos()), snap(rho * phi.sin()));
        let r0 = (area_px / std::f64::consts::PI).sqrt().max(0.5);
        let mut fallback = None;
        // Disk pixel counts jump in steps; a half-pixel centre shift reaches
        // the counts a pixel-centred disk cannot.
        for (ox, oy) in [(0.0, 0.0), (0.5, 0.5), (0.5, 0.0)] {
            let centre = (cx + ox * px, cy + oy * px);
            let mut r_px = r0;
            for _ in 0..200 {
                let spec = Self {
                    disks: vec![(centre.0, centre.1, r_px * px)],
                    mu: METAL_MU,
                };
                let count = spec.mask(n).sum() as usize;
                let got = SizeGroup::classify(count, n);
                if got == group && count > 0 {
                    return spec;
                }
                fallback.get_or_insert(spec);
                // groups are ordered large → tiny
                r_px *= if count == 0 || got > group { 1.02 } else { 0.98 };
            }
        }
        fallback.expect("at least one candidate")
    }
}

/// Beam-hardening and photon-starvation proxy applied to the sinogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub bh_gain: f64,
    /// Upper clip for rays through metal; `None` disables it.
    pub cap: Option<f64>,
    /// Noise standard deviation on metal rays; `None` selects `0.02·cap`.
    pub noise_sigma: Option<f64>,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            bh_gain: 0.3,
            cap: Some(1.5),
            noise_sigma: None,
        }
    }
}

impl CorruptionConfig {
    pub fn off() -> Self {
        Self {
            bh_gain: 0.0,
            cap: None,
            noise_sigma: Some(0.0),
        }
    }

    fn sigma(&self) -> f64 {
        self.noise_sigma.unwrap_or_else(|| self.cap.map_or(0.0, |c| 0.02 * c))
    }
}

/// `s' = s_t + s_m + γ·s_m²/(1 + s_m)`; rays that cross metal are then
/// clipped at the cap and receive seeded Gaussian noise.
pub fn corrupt_metal(s_tissue: &Tensor, s_metal: &Tensor, cfg: &CorruptionConfig, noise_seed: u64) -> Result<Tensor> {
    if s_tissue.shape() != s_metal.shape() {
        return Err(Error::Shape(format!(
            "sinogram shapes differ: {:?} vs {:?}",
            s_tissue.shape(),
            s_metal.shape()
        )));
    }
    let sigma = cfg.sigma();
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let out = s_tissue
        .data()
        .iter()
        .zip(s_metal.data())
        .map(|(&st, &sm)| {
            if sm <= 0.0 {
                return st;
            }
            let mut s = st + sm + cfg.bh_gain * sm * sm / (1.0 + sm);
            if let Some(cap) = cfg.cap {
                s = s.min(cap);
            }
            if sigma > 0.0 {
                s += noise.sample(&mut rng);
            }
            s
        })
        .collect();
    Tensor::new(s_tissue.shape(), out)
}

/// One training/evaluation example. Images are `H×W`; the mask marks metal.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub input: Tensor,
    pub gt: Tensor,
    pub mask: Tensor,
    pub group: SizeGroup,
    pub seed: u64,
}

impl SamplePair {
    pub fn metal_px(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v >= 0.5).count()
    }
}

/// Result of the threshold / excise / restore / reinsert procedure.
#[derive(Clone, Debug)]
pub struct Reinserted {
    pub output: Tensor,
    pub mask: Tensor,
}

/// Segments metal by `input ≥ tau`, replaces it with the mean of the other
/// pixels, restores the image and copies the metal pixels back verbatim.
pub fn excise_reinsert<F>(input: &Tensor, tau: f64, restore: F) -> Result<Reinserted>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let metal: Vec<bool> = input.data().iter().map(|&v| v >= tau).collect();
    let kept = metal.iter().filter(|&&m| !m).count();
    if kept == 0 {
        return Err(Error::Inference(format!("threshold {tau} marks every pixel as metal")));
    }
    let mean = input.data().iter().zip(&metal).filter(|(_, &m)| !m).map(|(v, _)| v).sum::<f64>() / kept as f64;
    let excised = input.zip_map(&Tensor::new(input.shape(), metal.iter().map(|&m| m as u8 as f64).collect())?, |v, m| {
        if m > 0.5 {
            mean
        } else {
            v
        }
    })?;
    let restored = restore(&excised)?;
    if restored.shape() != input.shape() {
        return Err(Error::Inference(format!(
            "restoration changed the shape {:?} → {:?}",
            input.shape(),
            restored.shape()
        )));
    }
    let output: Vec<f64> = restored
        .data()
        .iter()
        .zip(input.data())
        .zip(&metal)
        .map(|((&r, &i), &m)| if m { i } else { r })
        .collect();
    Ok(Reinserted {
        output: Tensor::new(input.shape(), output)?,
        mask: Tensor::new(input.shape(), metal.iter().map(|&m| m as u8 as f64).collect())?,
    })
}

pub fn mask_iou(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("mask shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Streak anisotropy of an artifact image `diff` around two metal objects
/// at pixel positions `p0`, `p1`: variance inside a band along the line
/// joining them divided by the variance inside a band across it through the
/// midpoint. Metal pixels (dilated by `margin`) and the shared centre are
/// ignored.
pub fn streak_variance_ratio(
    diff: &Tensor,
    metal: &Tensor,
    p0: (f64, f64),
    p1: (f64, f64),
    half_width: f64,
    margin: usize,
) -> Result<f64> {
    let (h, w) = diff.image_dims()?;
    let excluded = crate::metrics::dilate(metal, margin)?;
    let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return Err(Error::Analysis("streak axis needs two distinct points".into()));
    }
    let (ux, uy) = (dx / len, dy / len);
    let (mx, my) = ((p0.0 + p1.0) / 2.0, (p0.1 + p1.1) / 2.0);
    let (mut along, mut across) = (Vec::new(), Vec::new());
    for i in 0..h {
        for j in 0..w {
            if excluded.data()[i * w + j] >= 0.5 {
                continue;
            }
            let (rx, ry) = (j as f64 - mx, i as f64 - my);
            let par = rx * ux + ry * uy;
            let perp = -rx * uy + ry * ux;
            let v = diff.data()[i * w + j];
            match (perp.abs() <= half_width, par.abs() <= half_width) {
                (true, false) => along.push(v),
                (false, true) => across.push(v),
                _ => {}
            }
        }
    }
    let var = |v: &[f64]| -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
    };
    if along.is_empty() || across.is_empty() {
        return Err(Error::Analysis("streak bands are empty".into()));
    }
    Ok(var(&along) / var(&across).max(1e-300))
}
