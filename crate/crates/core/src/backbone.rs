//! The MARMamba restoration network.
//!
//! ```text
//! stem 3×3 (1→D)
//! encoder   D ─▶ 2D ─▶ 4D       (blocks, then stride-2 conv doubling C)
//! bottleneck            8D
//! decoder   4D ◀─ 2D ◀─ D       (2× transposed conv, concat skip, 1×1 fuse, blocks)
//! refinement D
//! head 3×3 (D→1), output = input + head
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::layers::{Conv2d, Upsample};
use crate::msmamba::{BlockConfig, FmbTaps, MsMambaBlock};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LEVELS: usize = 3;

/// How a decoder level merges the upsampled features with its skip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipFusion {
    /// Channel concat followed by a 1×1 conv back to the level width.
    #[default]
    Concat,
    Add,
}
/// Spatial extents must be multiples of this.
pub const SIZE_MULTIPLE: usize = 1 << LEVELS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub base_channels: usize,
    /// Blocks per stage: three encoder levels, bottleneck, three decoder
    /// levels (deepest first), refinement.
    pub stage_blocks: [usize; 8],
    pub input_channels: usize,
    pub skip_fusion: SkipFusion,
    pub head_zero_init: bool,
    pub block: BlockConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 12,
            stage_blocks: [1, 2, 2, 4, 2, 2, 1, 1],
            input_channels: 1,
            skip_fusion: SkipFusion::Concat,
            head_zero_init: true,
            block: BlockConfig::default(),
        }
    }
}

impl NetConfig {
    /// Desk-scale network used for gradient checks and overfit experiments.
    pub fn micro() -> Self {
        Self {
            base_channels: 4,
            stage_blocks: [1; 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.input_channels == 0 {
            return Err(config_err!("base_channels and input_channels must be ≥ 1"));
        }
        self.block.validate()
    }

    /// Channel width of every stage, in [`NetConfig::stage_blocks`] order.
    pub fn stage_channels(&self) -> [usize; 8] {
        let d = self.base_channels;
        [d, 2 * d, 4 * d, 8 * d, 4 * d, 2 * d, d, d]
    }
}

/// Identifies one MS-Mamba block: stage index (0..8) and block index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub stage: usize,
    pub block: usize,
}

#[derive(Clone, Debug)]
pub struct Marmamba {
    pub config: NetConfig,
    pub stem: Conv2d,
    pub stages: Vec<Vec<MsMambaBlock>>,
    pub down: Vec<Conv2d>,
    pub up: Vec<Upsample>,
    pub fuse: Vec<Conv2d>,
    pub head: Conv2d,
}

impl Marmamba {
    /// Builds the network and its freshly initialised parameters.
    pub fn new(config: NetConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let d = config.base_channels;
        let widths = config.stage_channels();

        let stem = Conv2d::new(&mut ps, "stem", config.input_channels, d, 3, 1, &mut rng);
        let mut stages = Vec::with_capacity(8);
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        for s in 0..8 {
            let c = widths[s];
            if (4..7).contains(&s) {
                // decoder level entry: upsample from the stage below
                let level = 6 - s;
                up.push(Upsample::new(&mut ps, &format!("up{level}"), 2 * c, c, &mut rng));
                if config.skip_fusion == SkipFusion::Concat {
                    fuse.push(Conv2d::new(&mut ps, &format!("fuse{level}"), 2 * c, c, 1, 1, &mut rng));
                }
            }
            let blocks = (0..config.stage_blocks[s])
                .map(|b| MsMambaBlock::new(&mut ps, &format!("stage{s}.block{b}"), c, &config.block, false, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            if s < LEVELS {
                down.push(Conv2d::new(&mut ps, &format!("down{s}"), c, 2 * c, 3, 2, &mut rng));
            }
        }
        // stored shallowest level first
        up.reverse();
        fuse.reverse();
        let head = if config.head_zero_init {
            Conv2d::zeroed(&mut ps, "head", d, config.input_channels, 3)
        } else {
            Conv2d::new(&mut ps, "head", d, config.input_channels, 3, 1, &mut rng)
        };
        Ok((
            Self {
                config,
                stem,
                stages,
                down,
                up,
                fuse,
                head,
            },
            ps,
        ))
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.run(g, ps, x, None)?.0)
    }

    /// Forward pass that also returns the FMB branch activations of `tap`.
    pub fn forward_with_taps(&self, g: &mut Graph, ps: &ParamStore, x: Var, tap: BlockRef) -> Result<(Var, FmbTaps)> {
        let (out, taps) = self.run(g, ps, x, Some(tap))?;
        let taps = taps.ok_or_else(|| config_err!("no MS-Mamba block at {tap:?}"))?;
        Ok((out, taps))
    }

    fn run(&self, g: &mut Graph, ps: &ParamStore, x: Var, tap: Option<BlockRef>) -> Result<(Var, Option<FmbTaps>)> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.config.input_channels {
            return Err(shape_err!(
                "network expects {} input channel(s), got {c}",
                self.config.input_channels
            ));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(shape_err!(
                "input {h}×{w} is not a multiple of {SIZE_MULTIPLE}; pad it first (pad_to_multiple)"
            ));
        }
        let mut taps = None;
        let mut stage = |g: &mut Graph, s: usize, mut v: Var| -> Result<Var> {
            for (b, blk) in self.stages[s].iter().enumerate() {
                if tap == Some(BlockRef { stage: s, block: b }) {
                    taps = Some(blk.fmb_taps(g, ps, v)?);
                }
                v = blk.forward(g, ps, v)?;
            }
            Ok(v)
        };

        let mut hcur = self.stem.forward(g, ps, x)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for level in 0..LEVELS {
            hcur = stage(g, level, hcur)?;
            skips.push(hcur);
            hcur = self.down[level].forward(g, ps, hcur)?;
        }
        hcur = stage(g, 3, hcur)?;
        for level in (0..LEVELS).rev() {
            hcur = self.up[level].forward(g, ps, hcur)?;
            hcur = match self.config.skip_fusion {
                SkipFusion::Concat => {
                    let cat = g.concat(&[hcur, skips[level]], 1)?;
                    self.fuse[level].forward(g, ps, cat)?
                }
                SkipFusion::Add => g.add(hcur, skips[level])?,
            };
            hcur = stage(g, 6 - level, hcur)?;
        }
        hcur = stage(g, 7, hcur)?;
        let residual = self.head.forward(g, ps, hcur)?;
        Ok((g.add(x, residual)?, taps))
    }

    /// Convenience inference on a plain tensor.
    pub fn infer(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, ps, xv)?;
        Ok(g.value(y).clone())
    }

    /// Inference on a single `H×W` image of any size via reflect padding.
    pub fn restore_image(&self, ps: &ParamStore, img: &Tensor) -> Result<Tensor> {
        let (h, w) = img.image_dims()?;
        let x = img.clone().reshape(&[1, 1, h, w])?;
        let (padded, rec) = pad_to_multiple(&x, SIZE_MULTIPLE)?;
        let y = self.infer(ps, &padded)?;
        crop_back(&y, &rec)?.reshape(&[h, w])
    }
}

pub fn count_params(ps: &ParamStore) -> usize {
    ps.numel()
}

/// Original spatial extent of a padded tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the last two axes on the bottom/right up to the next
/// multiple of `m`.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> Result<(Tensor, CropRecord)> {
    if m == 0 {
        return Err(config_err!("padding multiple must be ≥ 1"));
    }
    let nd = x.ndim();
    if nd < 2 {
        return Err(shape_err!("pad_to_multiple needs ≥ 2 dims, got {:?}", x.shape()));
    }
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let rec = CropRecord { height: h, width: w };
    if (ph, pw) == (h, w) {
        return Ok((x.clone(), rec));
    }
    let planes = x.len() / (h * w);
    let mut out = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        let src = &x.data()[p * h * w..][..h * w];
        for i in 0..ph {
            let si = reflect(i, h);
            for j in 0..pw {
                out.push(src[si * w + reflect(j, w)]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = ph;
    shape[nd - 1] = pw;
    Ok((Tensor::from_parts(shape, out), rec))
}

pub fn crop_back(y: &Tensor, rec: &CropRecord) -> Result<Tensor> {
    let nd = y.ndim();
    let (ph, pw) = (y.shape()[nd - 2], y.shape()[nd - 1]);
    if rec.height > ph || rec.width > pw {
        return Err(shape_err!("crop {rec:?} larger than {ph}×{pw}"));
    }
    let planes = y.len() / (ph * pw);
    let mut out = Vec::with_capacity(planes * rec.height * rec.width);
    for p in 0..planes {
        let src = &y.data()[p * ph * pw..][..ph * pw];
        for i in 0..rec.height {
            out.extend_from_slice(&src[i * pw..][..rec.width]);
        }
    }
    let mut shape = y.shape().to_vec();
    shape[nd - 2] = rec.height;
    shape[nd - 1] = rec.width;
    Ok(Tensor::from_parts(shape, out))
}
