use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    corrupt_metal, fbp, make_phantom, radon, CorruptionConfig, MetalSpec, PhantomSpec, SamplePair, SinogramConfig,
};
use crate::analysis::to_u8;
use crate::error::{config_err, Error, Result};
use crate::metrics::SizeGroup;
use crate::tensor::{read_mart, write_mart, StoreDtype, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Affine map from normalised intensity to HU: `hu = slope·v + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub slope: f64,
    pub intercept: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            slope: 2000.0,
            intercept: -1000.0,
        }
    }
}

impl Calibration {
    pub fn to_hu(&self, v: f64) -> f64 {
        self.slope * v + self.intercept
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub grid: usize,
    pub ellipses: usize,
    pub seed: u64,
    /// Metal size groups, assigned round-robin by sample index.
    pub size_mix: Vec<SizeGroup>,
    pub sinogram: SinogramConfig,
    pub corruption: CorruptionConfig,
    pub calibration: Calibration,
    pub export_pgm: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 8,
            grid: 64,
            ellipses: 6,
            seed: 0,
            size_mix: SizeGroup::ALL.to_vec(),
            sinogram: SinogramConfig::default(),
            corruption: CorruptionConfig::default(),
            calibration: Calibration::default(),
            export_pgm: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 8 {
            return Err(config_err!("grid must be ≥ 8, got {}", self.grid));
        }
        if self.size_mix.is_empty() {
            return Err(config_err!("size_mix must name at least one group"));
        }
        self.sinogram.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub input: String,
    pub gt: String,
    pub mask: String,
    pub metal_px: usize,
    pub group: SizeGroup,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub grid: usize,
    pub calibration: Calibration,
    pub samples: Vec<ManifestEntry>,
}

/// Seed of sample `index`, derived from the master seed only, so samples
/// can be generated in any order.
pub fn sample_seed(master: u64, index: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(index as u64);
    r.next_u64()
}

/// Generates sample `index`: phantom → clean reconstruction (ground truth),
/// phantom + metal → corrupted sinogram → reconstruction (input).
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Result<SamplePair> {
    let seed = sample_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.grid;
    let group = cfg.size_mix[index % cfg.size_mix.len()];
    let phantom = make_phantom(&PhantomSpec::random(n, cfg.ellipses, &mut rng));
    let metal = MetalSpec::preset(group, n, &mut rng);
    let s_tissue = radon(&phantom, &cfg.sinogram)?;
    let s_metal = radon(&metal.image(n), &cfg.sinogram)?;
    let corrupted = corrupt_metal(&s_tissue, &s_metal, &cfg.corruption, rng.next_u64())?;
    let gt = fbp(&s_tissue, &cfg.sinogram)?.map(|v| v.min(1.0));
    let input = fbp(&corrupted, &cfg.sinogram)?;
    let mask = metal.mask(n);
    let count = mask.data().iter().filter(|&&v| v >= 0.5).count();
    Ok(SamplePair {
        id: format!("s{index:04}"),
        input,
        gt,
        mask,
        group: SizeGroup::classify(count, n),
        seed,
    })
}

fn write_pgm(path: &Path, img: &Tensor, hi: f64) -> Result<()> {
    let (h, w) = img.image_dims()?;
    let px: Vec<u8> = img.data().iter().map(|&v| to_u8(v, 0.0, hi)).collect();
    crate::analysis::write_pgm(path, w, h, &px)
}

/// Writes `count` samples plus `manifest.json` into `out_dir`. On failure
/// every file written by this call is removed again.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pairs: Vec<SamplePair> = (0..cfg.count).into_par_iter().map(|i| synth_sample(cfg, i)).collect::<Result<_>>()?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<Manifest> {
        let mut samples = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let names = [
                format!("{}_input.mart", p.id),
                format!("{}_gt.mart", p.id),
                format!("{}_mask.mart", p.id),
            ];
            for (name, t) in names.iter().zip([&p.input, &p.gt, &p.mask]) {
                let path = out_dir.join(name);
                written.push(path.clone());
                write_mart(&path, t, StoreDtype::F64)?;
            }
            if cfg.export_pgm {
                for (suffix, t, hi) in [("input", &p.input, super::RECON_MAX), ("gt", &p.gt, 1.0), ("mask", &p.mask, 1.0)] {
                    let path = out_dir.join(format!("{}_{suffix}.pgm", p.id));
                    written.push(path.clone());
                    write_pgm(&path, t, hi)?;
                }
            }
            let [input, gt, mask] = names;
            samples.push(ManifestEntry {
                id: p.id.clone(),
                input,
                gt,
                mask,
                metal_px: p.metal_px(),
                group: p.group,
                seed: p.seed,
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            grid: cfg.grid,
            calibration: cfg.calibration,
            samples,
        };
        let path = out_dir.join(MANIFEST_FILE);
        written.push(path.clone());
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    })();
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    result
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub pairs: Vec<SamplePair>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format {
            path,
            msg: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let pairs = manifest
        .samples
        .iter()
        .map(|e| {
            let load = |name: &str| -> Result<Tensor> { read_mart(&dir.join(name)) };
            let pair = SamplePair {
                id: e.id.clone(),
                input: load(&e.input)?,
                gt: load(&e.gt)?,
                mask: load(&e.mask)?,
                group: e.group,
                seed: e.seed,
            };
            if pair.input.shape() != pair.gt.shape() || pair.gt.shape() != pair.mask.shape() {
                return Err(Error::Format {
                    path: dir.join(&e.id),
                    msg: "input, gt and mask shapes differ".into(),
                });
            }
            Ok(pair)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, pairs })
}
