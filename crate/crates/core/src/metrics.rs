//! Image-quality metrics and the masked, size-grouped evaluation protocol.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ct::SamplePair;
use crate::error::{config_err, Error, Result};
use crate::losses::perceptual_value;
use crate::tensor::Tensor;

/// Reported in place of +∞ when the included MSE is zero.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    NonMetal,
    MetalIncluded,
}

impl RegionMode {
    pub const ALL: [RegionMode; 2] = [RegionMode::NonMetal, RegionMode::MetalIncluded];

    pub fn as_str(self) -> &'static str {
        match self {
            RegionMode::NonMetal => "non_metal",
            RegionMode::MetalIncluded => "metal_included",
        }
    }

    /// Pixels that enter the metric for a metal mask (1 = metal).
    pub fn included(self, metal: &Tensor) -> Vec<bool> {
        match self {
            RegionMode::NonMetal => metal.data().iter().map(|&m| m < 0.5).collect(),
            RegionMode::MetalIncluded => vec![true; metal.len()],
        }
    }
}

/// Metal-size group. Bins are defined on the 416×416 grid of the reference
/// data and scale with image area on smaller grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeGroup {
    Large,
    Medium,
    Small,
    Tiny,
}

/// Reference grid the size bins are stated on.
pub const REFERENCE_GRID: usize = 416;
/// Lower bounds (pixels, reference grid) of large, medium and small; each
/// bound sits halfway between adjacent groups' published counts.
pub const SIZE_BOUNDS: [f64; 3] = [666.0, 189.0, 82.5];

/// Published per-case metal pixel counts of each group (reference grid).
pub const REFERENCE_SIZE_LISTS: [(SizeGroup, &[usize]); 4] = [
    (SizeGroup::Large, &[2061, 890, 881]),
    (SizeGroup::Medium, &[451, 254]),
    (SizeGroup::Small, &[124, 118, 112]),
    (SizeGroup::Tiny, &[53, 35]),
];

impl SizeGroup {
    pub const ALL: [SizeGroup; 4] = [SizeGroup::Large, SizeGroup::Medium, SizeGroup::Small, SizeGroup::Tiny];

    pub fn as_str(self) -> &'static str {
        match self {
            SizeGroup::Large => "large",
            SizeGroup::Medium => "medium",
            SizeGroup::Small => "small",
            SizeGroup::Tiny => "tiny",
        }
    }

    /// Group of a mask with `count` metal pixels on an `grid×grid` image.
    pub fn classify(count: usize, grid: usize) -> Self {
        let scale = (grid as f64 / REFERENCE_GRID as f64).powi(2);
        let c = count as f64;
        if c >= SIZE_BOUNDS[0] * scale {
            SizeGroup::Large
        } else if c >= SIZE_BOUNDS[1] * scale {
            SizeGroup::Medium
        } else if c >= SIZE_BOUNDS[2] * scale {
            SizeGroup::Small
        } else {
            SizeGroup::Tiny
        }
    }

    /// Representative metal area (reference grid) used to size presets.
    pub fn reference_count(self) -> f64 {
        match self {
            SizeGroup::Large => 1200.0,
            SizeGroup::Medium => 350.0,
            SizeGroup::Small => 118.0,
            SizeGroup::Tiny => 44.0,
        }
    }
}

impl std::str::FromStr for SizeGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| config_err!("unknown size group {s:?}"))
    }
}

fn check_pair(y: &Tensor, y_hat: &Tensor, include: Option<&[bool]>) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::Eval(format!("shape mismatch {:?} vs {:?}", y.shape(), y_hat.shape())));
    }
    if let Some(m) = include {
        if m.len() != y.len() {
            return Err(Error::Eval(format!("mask has {} pixels, image {}", m.len(), y.len())));
        }
    }
    Ok(())
}

/// Mean squared error over included pixels.
pub fn mse(y: &Tensor, y_hat: &Tensor, include: Option<&[bool]>) -> Result<f64> {
    check_pair(y, y_hat, include)?;
    let mut acc = 0.0;
    let mut n = 0usize;
    for (i, (a, b)) in y.data().iter().zip(y_hat.data()).enumerate() {
        if include.is_none_or(|m| m[i]) {
            acc += (a - b) * (a - b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Eval("metric mask includes no pixels".into()));
    }
    Ok(acc / n as f64)
}

pub fn psnr(y: &Tensor, y_hat: &Tensor, include: Option<&[bool]>, data_range: f64) -> Result<f64> {
    if data_range <= 0.0 {
        return Err(Error::Eval(format!("data range must be > 0, got {data_range}")));
    }
    let m = mse(y, y_hat, include)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP_DB))
}

pub fn rmse(y: &Tensor, y_hat: &Tensor, include: Option<&[bool]>) -> Result<f64> {
    Ok(mse(y, y_hat, include)?.sqrt())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| win[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| win[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over windows whose centre pixel is included. Only windows that
/// fit entirely inside the image are formed.
pub fn ssim(y: &Tensor, y_hat: &Tensor, include: Option<&[bool]>, data_range: f64) -> Result<f64> {
    check_pair(y, y_hat, include)?;
    let (h, w) = y.image_dims()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Eval(format!("SSIM needs ≥ {SSIM_WINDOW}×{SSIM_WINDOW} images, got {h}×{w}")));
    }
    let win = gaussian_window();
    let (a, b) = (y.data(), y_hat.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let e_aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &win);
    let e_bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &win);
    let e_ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &win);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let half = SSIM_WINDOW / 2;
    let ow = w + 1 - SSIM_WINDOW;
    let mut acc = 0.0;
    let mut n = 0usize;
    for (idx, &ma) in mu_a.iter().enumerate() {
        let (i, j) = (idx / ow + half, idx % ow + half);
        if include.is_some_and(|m| !m[i * w + j]) {
            continue;
        }
        let mb = mu_b[idx];
        let saa = e_aa[idx] - ma * ma;
        let sbb = e_bb[idx] - mb * mb;
        let sab = e_ab[idx] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * sab + c2)) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
        n += 1;
    }
    if n == 0 {
        return Err(Error::Eval("SSIM mask includes no window centres".into()));
    }
    Ok(acc / n as f64)
}

/// Grows a binary mask by a square of the given radius (Chebyshev distance).
pub fn dilate(mask: &Tensor, radius: usize) -> Result<Tensor> {
    if radius == 0 {
        return Ok(mask.clone());
    }
    let (h, w) = mask.image_dims()?;
    let m = mask.data();
    let r = radius as isize;
    let mut out = vec![0.0; m.len()];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let hit = (-r..=r).any(|di| {
                (-r..=r).any(|dj| {
                    let (y, x) = (i + di, j + dj);
                    y >= 0 && x >= 0 && y < h as isize && x < w as isize && m[(y * w as isize + x) as usize] >= 0.5
                })
            });
            if hit {
                out[(i * w as isize + j) as usize] = 1.0;
            }
        }
    }
    Tensor::new(mask.shape(), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub data_range: f64,
    /// Metal-mask dilation applied before excluding metal pixels.
    pub dilation: usize,
    pub modes: Vec<RegionMode>,
    pub perceptual: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            data_range: 1.0,
            dilation: 0,
            modes: RegionMode::ALL.to_vec(),
            perceptual: true,
        }
    }
}

/// Metrics of one image under one region mode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub mode: RegionMode,
    pub group: SizeGroup,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub perceptual: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub mode: RegionMode,
    pub group: SizeGroup,
    pub count: usize,
    pub psnr: Option<MeanStd>,
    pub ssim: Option<MeanStd>,
    pub rmse: Option<MeanStd>,
    pub perceptual: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalTable {
    pub records: Vec<ImageRecord>,
    pub cells: Vec<CellSummary>,
}

fn metric_row(
    id: &str,
    group: SizeGroup,
    mode: RegionMode,
    gt: &Tensor,
    pred: &Tensor,
    metal: &Tensor,
    cfg: &EvalConfig,
) -> Result<ImageRecord> {
    let include = mode.included(metal);
    let perceptual = if cfg.perceptual {
        // Excluded pixels are taken from the reference so they cannot contribute.
        let masked: Vec<f64> = pred
            .data()
            .iter()
            .zip(gt.data())
            .zip(&include)
            .map(|((&p, &g), &inc)| if inc { p } else { g })
            .collect();
        Some(perceptual_value(gt, &Tensor::new(pred.shape(), masked)?)?)
    } else {
        None
    };
    Ok(ImageRecord {
        image_id: id.to_string(),
        mode,
        group,
        psnr: psnr(gt, pred, Some(&include), cfg.data_range)?,
        ssim: ssim(gt, pred, Some(&include), cfg.data_range)?,
        rmse: rmse(gt, pred, Some(&include))?,
        perceptual,
    })
}

/// Runs `restore` on every pair's input and tabulates metrics per image and
/// per (region mode, size group) cell. Images are processed in parallel but
/// records keep the input order.
pub fn evaluate_set<F>(pairs: &[SamplePair], restore: F, cfg: &EvalConfig) -> Result<EvalTable>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let per_image: Vec<Vec<ImageRecord>> = pairs
        .par_iter()
        .map(|p| {
            let pred = restore(&p.input)?;
            let metal = dilate(&p.mask, cfg.dilation)?;
            let (h, w) = p.mask.image_dims()?;
            let count = p.mask.data().iter().filter(|&&m| m >= 0.5).count();
            let group = SizeGroup::classify(count, h.max(w));
            cfg.modes
                .iter()
                .map(|&mode| metric_row(&p.id, group, mode, &p.gt, &pred, &metal, cfg))
                .collect()
        })
        .collect::<Result<_>>()?;
    let records: Vec<ImageRecord> = per_image.into_iter().flatten().collect();
    Ok(EvalTable {
        cells: summarize(&records, &cfg.modes),
        records,
    })
}

/// Aggregates records into every (mode, group) cell; empty groups yield
/// cells with no statistics.
pub fn summarize(records: &[ImageRecord], modes: &[RegionMode]) -> Vec<CellSummary> {
    let mut cells = Vec::new();
    for &mode in modes {
        for group in SizeGroup::ALL {
            let members: Vec<&ImageRecord> = records.iter().filter(|r| r.mode == mode && r.group == group).collect();
            let col = |f: &dyn Fn(&ImageRecord) -> Option<f64>| -> Option<MeanStd> {
                let v: Option<Vec<f64>> = members.iter().map(|r| f(r)).collect();
                MeanStd::of(&v?)
            };
            cells.push(CellSummary {
                mode,
                group,
                count: members.len(),
                psnr: col(&|r| Some(r.psnr)),
                ssim: col(&|r| Some(r.ssim)),
                rmse: col(&|r| Some(r.rmse)),
                perceptual: col(&|r| r.perceptual),
            });
        }
    }
    cells
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl EvalTable {
    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("image_id,region_mode,size_group,psnr_db,ssim,rmse,perceptual\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.image_id,
                r.mode.as_str(),
                r.group.as_str(),
                r.psnr,
                r.ssim,
                r.rmse,
                opt(r.perceptual)
            );
        }
        s
    }

    pub fn aggregate_csv(&self) -> String {
        let mut s = String::from("region_mode,size_group,metric,count,mean,std\n");
        for c in &self.cells {
            for (name, m) in [("psnr_db", c.psnr), ("ssim", c.ssim), ("rmse", c.rmse), ("perceptual", c.perceptual)] {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    c.mode.as_str(),
                    c.group.as_str(),
                    name,
                    c.count,
                    opt(m.map(|m| m.mean)),
                    opt(m.map(|m| m.std))
                );
            }
        }
        s
    }

    pub fn write_csvs(&self, per_image: &Path, aggregate: &Path) -> Result<()> {
        std::fs::write(per_image, self.per_image_csv()).map_err(|e| Error::io(per_image, e))?;
        std::fs::write(aggregate, self.aggregate_csv()).map_err(|e| Error::io(aggregate, e))
    }

    pub fn cell(&self, mode: RegionMode, group: SizeGroup) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.mode == mode && c.group == group)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn psnr_examples() {
        let y = Tensor::rand_uniform(&[16, 16], 0.0, 1.0, &mut rng(0));
        assert_eq!(psnr(&y, &y, None, 1.0).unwrap(), PSNR_CAP_DB);
        let d = Tensor::full(&[16, 16], 0.5);
        let e = d.map(|v| v + 0.1);
        assert!((psnr(&d, &e, None, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let mut z = y.clone();
        z.data_mut()[7] += 0.3;
        let mut keep = vec![true; 256];
        keep[7] = false;
        assert_eq!(psnr(&y, &z, Some(&keep), 1.0).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&y, &z, Some(&[false; 256]), 1.0).is_err());
        assert!(psnr(&y, &z, None, 0.0).is_err());
    }

    #[test]
    fn rmse_examples() {
        let y = Tensor::rand_uniform(&[12, 12], 0.0, 1.0, &mut rng(1));
        assert_eq!(rmse(&y, &y, None).unwrap(), 0.0);
        let z = y.map(|v| v + 0.1);
        assert!((rmse(&y, &z, None).unwrap() - 0.1).abs() < 1e-12);
        assert!(rmse(&y, &z, Some(&[false; 144])).is_err());
    }

    #[test]
    fn rmse_two_pass_oracle() {
        let mut r = rng(2);
        let y = Tensor::rand_uniform(&[20, 20], 0.0, 1.0, &mut r);
        let z = Tensor::rand_uniform(&[20, 20], 0.0, 1.0, &mut r);
        let diffs: Vec<f64> = y.data().iter().zip(z.data()).map(|(a, b)| a - b).collect();
        let sq: Vec<f64> = diffs.iter().map(|d| d * d).collect();
        let mut total = 0.0;
        for chunk in sq.chunks(7).rev() {
            total += chunk.iter().rev().sum::<f64>();
        }
        let oracle = (total / sq.len() as f64).sqrt();
        assert!((rmse(&y, &z, None).unwrap() - oracle).abs() <= 1e-12);
    }

    /// Direct per-window SSIM evaluation used as an oracle.
    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, i: usize, j: usize) -> f64 {
        let win = gaussian_window();
        let (mut ma, mut mb) = (0.0, 0.0);
        for u in 0..11 {
            for v in 0..11 {
                let k = win[u] * win[v];
                ma += k * a[(i + u) * w + j + v];
                mb += k * b[(i + u) * w + j + v];
            }
        }
        let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
        for u in 0..11 {
            for v in 0..11 {
                let k = win[u] * win[v];
                let (x, y) = (a[(i + u) * w + j + v] - ma, b[(i + u) * w + j + v] - mb);
                vaa += k * x * x;
                vbb += k * y * y;
                vab += k * x * y;
            }
        }
        let _ = h;
        let (c1, c2) = (1e-4, 9e-4);
        ((2.0 * ma * mb + c1) * (2.0 * vab + c2)) / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2))
    }

    #[test]
    fn ssim_examples() {
        let mut r = rng(3);
        let y = Tensor::rand_uniform(&[16, 16], 0.0, 1.0, &mut r);
        assert_eq!(ssim(&y, &y, None, 1.0).unwrap(), 1.0);
        let z = Tensor::rand_uniform(&[16, 16], 0.0, 1.0, &mut r);
        let (s1, s2) = (ssim(&y, &z, None, 1.0).unwrap(), ssim(&z, &y, None, 1.0).unwrap());
        assert!((s1 - s2).abs() <= 1e-12);
        let mut acc = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                acc += ssim_oracle(y.data(), z.data(), 16, 16, i, j);
            }
        }
        assert!((s1 - acc / 36.0).abs() < 1e-12, "{s1} vs {}", acc / 36.0);
        // constant 0 vs constant 1
        let (c0, c1) = (Tensor::zeros(&[11, 11]), Tensor::ones(&[11, 11]));
        let expect = ssim_oracle(c0.data(), c1.data(), 11, 11, 0, 0);
        assert!((ssim(&c0, &c1, None, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1e-4 / 1.0001).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros(&[10, 16]), &Tensor::zeros(&[10, 16]), None, 1.0).is_err());
    }

    #[test]
    fn ssim_ignores_pixels_far_from_included_centres() {
        let mut r = rng(4);
        let y = Tensor::rand_uniform(&[32, 32], 0.0, 1.0, &mut r);
        let z = Tensor::rand_uniform(&[32, 32], 0.0, 1.0, &mut r);
        // include centres in rows/cols 5..10 only
        let include: Vec<bool> = (0..1024).map(|i| (5..10).contains(&(i / 32)) && (5..10).contains(&(i % 32))).collect();
        let base = ssim(&y, &z, Some(&include), 1.0).unwrap();
        let mut z2 = z.clone();
        for i in 0..32 {
            for j in 0..32 {
                if i >= 16 || j >= 16 {
                    z2.data_mut()[i * 32 + j] += 0.37;
                }
            }
        }
        assert_eq!(ssim(&y, &z2, Some(&include), 1.0).unwrap(), base);
    }

    #[test]
    fn size_groups_match_reference_lists() {
        for (g, counts) in REFERENCE_SIZE_LISTS {
            for &c in counts {
                assert_eq!(SizeGroup::classify(c, REFERENCE_GRID), g, "{c}");
            }
        }
        for g in SizeGroup::ALL {
            assert_eq!(SizeGroup::classify(g.reference_count() as usize, REFERENCE_GRID), g);
            assert_eq!(g.as_str().parse::<SizeGroup>().unwrap(), g);
        }
    }

    #[test]
    fn mean_std_population() {
        let m = MeanStd::of(&[20.0, 30.0]).unwrap();
        assert_eq!((m.mean, m.std), (25.0, 5.0));
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn dilation_grows_mask() {
        let mut m = Tensor::zeros(&[5, 5]);
        m.data_mut()[12] = 1.0;
        let d = dilate(&m, 1).unwrap();
        assert_eq!(d.sum(), 9.0);
        assert_eq!(dilate(&m, 0).unwrap(), m);
    }

    proptest! {
        #[test]
        fn masked_metrics_ignore_excluded(seed in any::<u64>(), bump in -1.0f64..1.0) {
            let mut r = rng(seed);
            let y = Tensor::rand_uniform(&[14, 14], 0.0, 1.0, &mut r);
            let z = Tensor::rand_uniform(&[14, 14], 0.0, 1.0, &mut r);
            let include: Vec<bool> = (0..196).map(|i| (i * 7 + seed as usize) % 5 != 0).collect();
            let mut z2 = z.clone();
            for (v, &inc) in z2.data_mut().iter_mut().zip(&include) {
                if !inc { *v += bump; }
            }
            prop_assert_eq!(psnr(&y, &z, Some(&include), 1.0).unwrap(), psnr(&y, &z2, Some(&include), 1.0).unwrap());
            prop_assert_eq!(rmse(&y, &z, Some(&include)).unwrap(), rmse(&y, &z2, Some(&include)).unwrap());
        }

        #[test]
        fn psnr_monotone_in_error(seed in any::<u64>(), k in 1.0f64..4.0) {
            let mut r = rng(seed);
            let y = Tensor::rand_uniform(&[8, 8], 0.0, 1.0, &mut r);
            let e = Tensor::rand_uniform(&[8, 8], -0.1, 0.1, &mut r);
            let a = y.zip_map(&e, |v, d| v + d).unwrap();
            let b = y.zip_map(&e, |v, d| v + k * d).unwrap();
            prop_assert!(psnr(&y, &a, None, 1.0).unwrap() >= psnr(&y, &b, None, 1.0).unwrap());
        }
    }
}
