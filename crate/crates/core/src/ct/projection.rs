//! Parallel-beam Radon transform and filtered backprojection.
//!
//! Images live on `[-1, 1]²` with pixel size `2/n`; detector bins share that
//! spacing, so line integrals are in image-intensity × unit-length units.

use std::f64::consts::PI;

use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::spectral::{circular_convolve, freq, real_spectrum};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampFilter {
    #[default]
    RamLak,
    /// Ram-Lak apodized by a Hann window.
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinogramConfig {
    pub n_angles: usize,
    pub filter: RampFilter,
}

impl Default for SinogramConfig {
    fn default() -> Self {
        Self {
            n_angles: 180,
            filter: RampFilter::RamLak,
        }
    }
}

impl SinogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_angles < 2 {
            return Err(config_err!("need at least 2 projection angles, got {}", self.n_angles));
        }
        Ok(())
    }

    pub fn angle(&self, a: usize) -> f64 {
        PI * a as f64 / self.n_angles as f64
    }
}

pub fn pixel_size(n: usize) -> f64 {
    2.0 / n as f64
}

/// Continuous coordinate of pixel/bin centre `i` on an `n` grid.
pub fn coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5 - n as f64 / 2.0) * pixel_size(n)
}

/// Bilinear sample at continuous `(x, y)`; zero outside the grid.
fn bilinear(img: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let inv = n as f64 / 2.0;
    let fj = x * inv + n as f64 / 2.0 - 0.5;
    let fi = y * inv + n as f64 / 2.0 - 0.5;
    let (j0, i0) = (fj.floor(), fi.floor());
    let (tx, ty) = (fj - j0, fi - i0);
    let (j0, i0) = (j0 as isize, i0 as isize);
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= n as isize || j >= n as isize {
            0.0
        } else {
            img[i as usize * n + j as usize]
        }
    };
    (1.0 - ty) * ((1.0 - tx) * at(i0, j0) + tx * at(i0, j0 + 1)) + ty * ((1.0 - tx) * at(i0 + 1, j0) + tx * at(i0 + 1, j0 + 1))
}

/// Line integrals `p(θ, t)` of a square image, `n_angles × n`.
pub fn radon(img: &Tensor, cfg: &SinogramConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (h, n) = img.image_dims()?;
    if h != n {
        return Err(shape_err!("radon needs a square image, got {h}×{n}"));
    }
    let dx = pixel_size(n);
    let data = img.data();
    let mut out = vec![0.0; cfg.n_angles * n];
    for a in 0..cfg.n_angles {
        let (s, c) = cfg.angle(a).sin_cos();
        for k in 0..n {
            let t = coord(k, n);
            let mut acc = 0.0;
            for m in 0..n {
                let r = coord(m, n);
                acc += bilinear(data, n, t * c - r * s, t * s + r * c);
            }
            out[a * n + k] = acc * dx;
        }
    }
    Tensor::new(&[cfg.n_angles, n], out)
}

/// Filtered backprojection without output clipping (a linear operator).
pub fn fbp_raw(sino: &Tensor, cfg: &SinogramConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (na, n) = sino.image_dims()?;
    if na != cfg.n_angles {
        return Err(shape_err!("sinogram has {na} angles, config says {}", cfg.n_angles));
    }
    let dx = pixel_size(n);
    let len = (2 * n).next_power_of_two();
    let mut kernel = vec![0.0; len];
    kernel[0] = 1.0 / (4.0 * dx * dx);
    for k in (1..n).step_by(2) {
        let v = -1.0 / (PI * PI * (k * k) as f64 * dx * dx);
        kernel[k] = v;
        kernel[len - k] = v;
    }
    let mut planner = FftPlanner::new();
    let mut spectrum = real_spectrum(&kernel, &mut planner);
    if cfg.filter == RampFilter::Hann {
        for (i, v) in spectrum.iter_mut().enumerate() {
            *v *= 0.5 * (1.0 + (2.0 * PI * freq(i, len)).cos());
        }
    }
    let mut filtered = vec![0.0; na * n];
    for a in 0..na {
        let q = circular_convolve(&sino.data()[a * n..][..n], &spectrum, &mut planner);
        for k in 0..n {
            filtered[a * n + k] = q[k] * dx;
        }
    }

    let mut img = vec![0.0; n * n];
    let trig: Vec<(f64, f64)> = (0..na).map(|a| cfg.angle(a).sin_cos()).collect();
    let inv = 1.0 / dx;
    for i in 0..n {
        let y = coord(i, n);
        for j in 0..n {
            let x = coord(j, n);
            let mut acc = 0.0;
            for (a, &(s, c)) in trig.iter().enumerate() {
                let fk = (x * c + y * s) * inv + n as f64 / 2.0 - 0.5;
                let k0 = fk.floor();
                let w = fk - k0;
                let k0 = k0 as isize;
                let row = &filtered[a * n..][..n];
                if k0 >= 0 && (k0 as usize) < n {
                    acc += (1.0 - w) * row[k0 as usize];
                }
                if k0 + 1 >= 0 && ((k0 + 1) as usize) < n {
                    acc += w * row[(k0 + 1) as usize];
                }
            }
            img[i * n + j] = acc * PI / na as f64;
        }
    }
    Tensor::new(&[n, n], img)
}

/// Upper clip of reconstructions; leaves headroom above tissue for metal.
pub const RECON_MAX: f64 = 1.5;

/// Filtered backprojection clipped to `[0, RECON_MAX]`.
pub fn fbp(sino: &Tensor, cfg: &SinogramConfig) -> Result<Tensor> {
    Ok(fbp_raw(sino, cfg)?.map(|v| v.clamp(0.0, RECON_MAX)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ct::{make_phantom, Ellipse, PhantomSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disk(n: usize, r: f64, v: f64) -> Tensor {
        make_phantom(&PhantomSpec {
            n,
            ellipses: vec![Ellipse::circle(0.0, 0.0, r, v)],
        })
    }

    #[test]
    fn zero_in_zero_out() {
        let cfg = SinogramConfig { n_angles: 12, ..Default::default() };
        let s = radon(&Tensor::zeros(&[16, 16]), &cfg).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        let f = fbp(&Tensor::zeros(&[12, 16]), &cfg).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_disk_projections_agree() {
        let cfg = SinogramConfig::default();
        let s = radon(&disk(64, 0.5, 0.5), &cfg).unwrap();
        let row = |a: usize| &s.data()[a * 64..][..64];
        // grid-aligned angles see the same pixel set
        for (x, y) in row(0).iter().zip(row(90)) {
            assert!((x - y).abs() < 1e-6);
        }
        // other angles agree up to interpolation error
        let peak = row(0).iter().cloned().fold(0.0, f64::max);
        for a in 0..180 {
            for (x, y) in row(0).iter().zip(row(a)) {
                assert!((x - y).abs() < 0.06 * peak, "angle {a}");
            }
        }
    }

    #[test]
    fn mass_conservation() {
        let spec = PhantomSpec::random(64, 5, &mut ChaCha8Rng::seed_from_u64(3));
        let img = make_phantom(&spec);
        let s = radon(&img, &SinogramConfig::default()).unwrap();
        let total = img.sum();
        for a in 0..180 {
            // detector sum in pixel units
            let row: f64 = s.data()[a * 64..][..64].iter().sum::<f64>() / pixel_size(64);
            assert!((row - total).abs() <= 0.01 * total, "angle {a}: {row} vs {total}");
        }
    }

    #[test]
    fn fbp_is_linear() {
        let cfg = SinogramConfig { n_angles: 30, ..Default::default() };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::randn(&[30, 24], &mut r);
        let b = Tensor::randn(&[30, 24], &mut r);
        let sum = a.zip_map(&b, |x, y| x + y).unwrap();
        let lhs = fbp_raw(&sum, &cfg).unwrap();
        let rhs = fbp_raw(&a, &cfg).unwrap().zip_map(&fbp_raw(&b, &cfg).unwrap(), |x, y| x + y).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-9);
    }

    #[test]
    fn hann_smooths_more_than_ram_lak() {
        let img = disk(32, 0.5, 0.5);
        let mut cfg = SinogramConfig::default();
        let s = radon(&img, &cfg).unwrap();
        let sharp = fbp_raw(&s, &cfg).unwrap();
        cfg.filter = RampFilter::Hann;
        let soft = fbp_raw(&s, &cfg).unwrap();
        let tv = |t: &Tensor| t.data().windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
        assert!(tv(&soft) < tv(&sharp));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(radon(&Tensor::zeros(&[4, 6]), &SinogramConfig::default()).is_err());
        let cfg = SinogramConfig { n_angles: 1, ..Default::default() };
        assert!(radon(&Tensor::zeros(&[4, 4]), &cfg).is_err());
        assert!(fbp(&Tensor::zeros(&[10, 4]), &SinogramConfig::default()).is_err());
    }
}
