//! Discrete Fourier transforms backed by `rustfft`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::Result;
use crate::tensor::Tensor;

/// Forward 2-D DFT of an `H×W` image, row-major, unnormalised.
pub fn dft2(img: &Tensor) -> Result<Vec<Complex64>> {
    let (h, w) = img.image_dims()?;
    let mut buf: Vec<Complex64> = img.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(w);
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    let mut tmp = vec![Complex64::default(); h];
    for j in 0..w {
        for i in 0..h {
            tmp[i] = buf[i * w + j];
        }
        col.process(&mut tmp);
        for i in 0..h {
            buf[i * w + j] = tmp[i];
        }
    }
    Ok(buf)
}

/// Signed frequency (cycles per sample) of DFT index `k` of length `n`.
pub fn freq(k: usize, n: usize) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k / n as f64
}

/// Circular convolution of real `x` with real `kernel` (same length).
pub(crate) fn circular_convolve(x: &[f64], kernel_spectrum: &[Complex64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = kernel_spectrum.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(n, Complex64::default());
    planner.plan_fft_forward(n).process(&mut buf);
    for (b, k) in buf.iter_mut().zip(kernel_spectrum) {
        *b *= k;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

pub(crate) fn real_spectrum(x: &[f64], planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(buf.len()).process(&mut buf);
    buf
}
