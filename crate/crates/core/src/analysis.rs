//! Interpretability tooling: orientation spectra of FMB branches, feature
//! energy maps, amplified error maps and HU-window rendering.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::{pad_to_multiple, BlockRef, Marmamba, SIZE_MULTIPLE};
use crate::ct::Calibration;
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::spectral::{dft2, freq};
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumConfig {
    /// Orientation bins over `[0, π)`.
    pub bins: usize,
    /// Annulus radii as fractions of the Nyquist frequency.
    pub r_lo: f64,
    pub r_hi: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            bins: 36,
            r_lo: 0.15,
            r_hi: 0.45,
        }
    }
}

impl SpectrumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || !(0.0 <= self.r_lo && self.r_lo < self.r_hi) {
            return Err(Error::Analysis(format!(
                "invalid spectrum config: {} bins, annulus [{}, {}]",
                self.bins, self.r_lo, self.r_hi
            )));
        }
        Ok(())
    }

    pub fn bin_width_deg(&self) -> f64 {
        180.0 / self.bins as f64
    }
}

/// Mean power `|F|²` per orientation bin inside the annulus. Bins with no
/// annulus coefficient are 0.
pub fn directional_energy(map: &Tensor, cfg: &SpectrumConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (h, w) = map.image_dims()?;
    if h != w {
        return Err(shape_err!("directional energy needs a square map, got {h}×{w}"));
    }
    let spec = dft2(map)?;
    let mut energy = vec![0.0; cfg.bins];
    let mut count = vec![0usize; cfg.bins];
    for u in 0..h {
        let fy = freq(u, h);
        for v in 0..w {
            let fx = freq(v, w);
            let r = fx.hypot(fy) / 0.5;
            if r < cfg.r_lo || r > cfg.r_hi {
                continue;
            }
            let theta = fy.atan2(fx).rem_euclid(PI);
            let b = ((theta * cfg.bins as f64 / PI) as usize) % cfg.bins;
            energy[b] += spec[u * w + v].norm_sqr();
            count[b] += 1;
        }
    }
    if count.iter().all(|&c| c == 0) {
        return Err(Error::Analysis(format!(
            "annulus [{}, {}] holds no frequency of a {h}×{w} map",
            cfg.r_lo, cfg.r_hi
        )));
    }
    Ok(energy.iter().zip(&count).map(|(&e, &c)| if c == 0 { 0.0 } else { e / c as f64 }).collect())
}

/// Channel-averaged [`directional_energy`] of the first item of a
/// `B×C×H×W` activation.
pub fn channel_energy(t: &Tensor, cfg: &SpectrumConfig) -> Result<Vec<f64>> {
    let (_, c, h, w) = t.dims4()?;
    let mut acc = vec![0.0; cfg.bins];
    for ch in 0..c {
        let plane = Tensor::new(&[h, w], t.data()[ch * h * w..][..h * w].to_vec())?;
        for (a, p) in acc.iter_mut().zip(directional_energy(&plane, cfg)?) {
            *a += p / c as f64;
        }
    }
    Ok(acc)
}

/// `ln(max(p_branch, ε) / max(p_norm, ε))` per bin.
pub fn energy_logratio(p_branch: &[f64], p_norm: &[f64]) -> Result<Vec<f64>> {
    if p_branch.len() != p_norm.len() {
        return Err(Error::Analysis(format!(
            "spectra have {} and {} bins",
            p_branch.len(),
            p_norm.len()
        )));
    }
    Ok(p_branch
        .iter()
        .zip(p_norm)
        .map(|(&b, &n)| (b.max(LOG_FLOOR) / n.max(LOG_FLOOR)).ln())
        .collect())
}

pub fn argmax(v: &[f64]) -> Option<usize> {
    v.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &x)| match best {
            Some((_, b)) if b >= x => best,
            _ => Some((i, x)),
        })
        .map(|(i, _)| i)
}

/// Mean over channels of squared activations, `H×W`, first batch item.
pub fn feature_energy(t: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = t.dims4()?;
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&t.data()[ch * h * w..][..h * w]) {
            *o += v * v / c as f64;
        }
    }
    Tensor::new(&[h, w], out)
}

/// Orientation spectra of the three FMB branches of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSpectra {
    pub config: SpectrumConfig,
    pub p_norm: Vec<f64>,
    pub p_h: Option<Vec<f64>>,
    pub p_v: Option<Vec<f64>>,
}

/// `[normal, horizontal, vertical]` activations of block `tap` for an `H×W`
/// image, reflect-padded to the network multiple.
pub fn branch_taps(net: &Marmamba, ps: &ParamStore, img: &Tensor, tap: BlockRef) -> Result<[Option<Tensor>; 3]> {
    let (h, w) = img.image_dims()?;
    let (x, _) = pad_to_multiple(&img.clone().reshape(&[1, 1, h, w])?, SIZE_MULTIPLE)?;
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let (_, taps) = net.forward_with_taps(&mut g, ps, xv, tap)?;
    let get = |v| g.value(v).clone();
    Ok([Some(get(taps.normal)), taps.horizontal.map(get), taps.vertical.map(get)])
}

impl BranchSpectra {
    /// Spectra averaged over `imgs` (before taking any ratio).
    pub fn measure(net: &Marmamba, ps: &ParamStore, imgs: &[Tensor], tap: BlockRef, cfg: &SpectrumConfig) -> Result<Self> {
        if imgs.is_empty() {
            return Err(Error::Analysis("no images to analyse".into()));
        }
        let mut sums: [Option<Vec<f64>>; 3] = [None, None, None];
        for img in imgs {
            let taps = branch_taps(net, ps, img, tap)?;
            for (slot, t) in sums.iter_mut().zip(taps) {
                if let Some(t) = t {
                    let p = channel_energy(&t, cfg)?;
                    let acc = slot.get_or_insert_with(|| vec![0.0; cfg.bins]);
                    for (a, v) in acc.iter_mut().zip(p) {
                        *a += v / imgs.len() as f64;
                    }
                }
            }
        }
        let [n, hz, vt] = sums;
        Ok(Self {
            config: *cfg,
            p_norm: n.expect("normal branch is always present"),
            p_h: hz,
            p_v: vt,
        })
    }

    pub fn logratio_h(&self) -> Option<Vec<f64>> {
        self.p_h.as_ref().map(|p| energy_logratio(p, &self.p_norm).expect("same binning"))
    }

    pub fn logratio_v(&self) -> Option<Vec<f64>> {
        self.p_v.as_ref().map(|p| energy_logratio(p, &self.p_norm).expect("same binning"))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_deg_lo,bin_deg_hi,p_norm,p_h,p_v,logratio_h,logratio_v\n");
        let (lh, lv) = (self.logratio_h(), self.logratio_v());
        let opt = |v: &Option<Vec<f64>>, i: usize| v.as_ref().map(|v| format!("{:e}", v[i])).unwrap_or_default();
        let bw = self.config.bin_width_deg();
        for i in 0..self.config.bins {
            let _ = writeln!(
                s,
                "{},{},{:e},{},{},{},{}",
                i as f64 * bw,
                (i + 1) as f64 * bw,
                self.p_norm[i],
                opt(&self.p_h, i),
                opt(&self.p_v, i),
                opt(&lh, i),
                opt(&lv, i)
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorMapConfig {
    pub gain: f64,
    /// Amplified errors are clipped to `[0, clip]`.
    pub clip: f64,
}

impl Default for ErrorMapConfig {
    fn default() -> Self {
        Self { gain: 2.0, clip: 1.0 }
    }
}

/// `min(|restored − gt|·gain, clip)`; pixels under `metal` are reported as
/// zero error since they are copied from the input.
pub fn error_map(restored: &Tensor, gt: &Tensor, cfg: &ErrorMapConfig, metal: Option<&Tensor>) -> Result<Tensor> {
    let mut e = restored.zip_map(gt, |a, b| ((a - b).abs() * cfg.gain).min(cfg.clip))?;
    if let Some(m) = metal {
        if m.shape() != e.shape() {
            return Err(shape_err!("metal mask {:?} vs image {:?}", m.shape(), e.shape()));
        }
        for (v, &mv) in e.data_mut().iter_mut().zip(m.data()) {
            if mv >= 0.5 {
                *v = 0.0;
            }
        }
    }
    Ok(e)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderWindow {
    pub hu_lo: f64,
    pub hu_hi: f64,
}

impl Default for RenderWindow {
    fn default() -> Self {
        Self {
            hu_lo: -175.0,
            hu_hi: 275.0,
        }
    }
}

/// Linear map of `[lo, hi]` to `0..=255`, clamped, ties to even.
pub fn to_u8(v: f64, lo: f64, hi: f64) -> u8 {
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// 8-bit rendering of a normalised image in an HU window.
pub fn render_hu(img: &Tensor, window: &RenderWindow, calib: Option<&Calibration>) -> Result<Vec<u8>> {
    let calib = calib.ok_or_else(|| Error::Analysis("render error: no intensity calibration declared".into()))?;
    if !(window.hu_lo < window.hu_hi) {
        return Err(Error::Analysis(format!(
            "render window [{}, {}] is empty",
            window.hu_lo, window.hu_hi
        )));
    }
    Ok(img.data().iter().map(|&v| to_u8(calib.to_hu(v), window.hu_lo, window.hu_hi)).collect())
}

/// Binary greymap (`P5`) of an `h×w` 8-bit image.
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != w * h {
        return Err(shape_err!("{} pixels for a {w}×{h} image", pixels.len()));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
