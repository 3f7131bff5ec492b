use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    corrupt_metal, excise_reinsert, fbp, fbp_raw, make_phantom, mask_iou, pixel_size, radon, streak_variance_ratio,
    CorruptionConfig, MetalSpec, PhantomSpec, SinogramConfig, METAL_MU,
};
use crate::error::Result;
use crate::tensor::Tensor;

/// Reference scene for streak and metal-segmentation measurements: a
/// 128×128 phantom with two metal disks on a horizontal line.
#[derive(Clone, Debug)]
pub struct CtFixture {
    pub n: usize,
    pub phantom: Tensor,
    pub metal: MetalSpec,
    pub sinogram: SinogramConfig,
    pub corruption: CorruptionConfig,
    pub noise_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixtureReport {
    pub streak_ratio: f64,
    pub mask_iou: f64,
    /// Fraction of true metal pixels at or above the threshold.
    pub mask_recall: f64,
}

impl CtFixture {
    pub const CENTRES: [(f64, f64); 2] = [(-0.35, 0.0), (0.35, 0.0)];
    pub const RADIUS: f64 = 0.12;

    pub fn reference() -> Self {
        let n = 128;
        let phantom = make_phantom(&PhantomSpec::random(n, 6, &mut ChaCha8Rng::seed_from_u64(7)));
        let metal = MetalSpec {
            disks: Self::CENTRES.iter().map(|&(x, y)| (x, y, Self::RADIUS)).collect(),
            mu: METAL_MU,
        };
        Self {
            n,
            phantom,
            metal,
            sinogram: SinogramConfig::default(),
            corruption: CorruptionConfig::default(),
            noise_seed: 3,
        }
    }

    /// `(clean sinogram, corrupted sinogram)`.
    pub fn sinograms(&self) -> Result<(Tensor, Tensor)> {
        let st = radon(&self.phantom, &self.sinogram)?;
        let sm = radon(&self.metal.image(self.n), &self.sinogram)?;
        let sc = corrupt_metal(&st, &sm, &self.corruption, self.noise_seed)?;
        Ok((st, sc))
    }

    /// Reconstruction of the corrupted scan (the network input).
    pub fn input(&self) -> Result<Tensor> {
        fbp(&self.sinograms()?.1, &self.sinogram)
    }

    pub fn measure(&self, tau: f64) -> Result<FixtureReport> {
        let (st, sc) = self.sinograms()?;
        let diff = fbp_raw(&sc, &self.sinogram)?.zip_map(&fbp_raw(&st, &self.sinogram)?, |a, b| a - b)?;
        let mask = self.metal.mask(self.n);
        let to_px = |v: f64| v / pixel_size(self.n) + self.n as f64 / 2.0 - 0.5;
        let [(x0, y0), (x1, y1)] = Self::CENTRES;
        let streak_ratio = streak_variance_ratio(&diff, &mask, (to_px(x0), to_px(y0)), (to_px(x1), to_px(y1)), 3.0, 2)?;
        let input = fbp(&sc, &self.sinogram)?;
        let seg = excise_reinsert(&input, tau, |x| Ok(x.clone()))?.mask;
        let truth = mask.data().iter().filter(|&&v| v >= 0.5).count();
        let hit = mask.data().iter().zip(seg.data()).filter(|(&m, &s)| m >= 0.5 && s >= 0.5).count();
        Ok(FixtureReport {
            streak_ratio,
            mask_iou: mask_iou(&seg, &mask)?,
            mask_recall: hit as f64 / truth as f64,
        })
    }
}
