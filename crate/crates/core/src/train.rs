//! Progressive-resolution training loop with checkpointing and resume.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::{Marmamba, SIZE_MULTIPLE};
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use crate::ct::SamplePair;
use crate::error::{config_err, Error, Result};
use crate::losses::{combined_loss, LossConfig};
use crate::optim::{cosine_lr, AdamConfig, AdamState, ScheduleConfig, ScheduleMode};
use crate::params::ParamStore;
use crate::tensor::{StoreDtype, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgressivePhase {
    pub image_size: usize,
    pub batch_size: usize,
    pub iterations: u64,
}

impl ProgressivePhase {
    pub const fn new(image_size: usize, batch_size: usize, iterations: u64) -> Self {
        Self {
            image_size,
            batch_size,
            iterations,
        }
    }
}

pub const PAPER_PHASES: [ProgressivePhase; 3] = [
    ProgressivePhase::new(256, 8, 100_000),
    ProgressivePhase::new(336, 4, 200_000),
    ProgressivePhase::new(416, 2, 20_000),
];

pub const DESK_PHASES: [ProgressivePhase; 3] = [
    ProgressivePhase::new(32, 4, 300),
    ProgressivePhase::new(48, 2, 300),
    ProgressivePhase::new(64, 1, 150),
];

/// Peak learning rate for the short desk-scale schedule.
pub const DESK_LR_MAX: f64 = 1e-3;

pub const LOSS_LOG_HEADER: &str = "iter,phase,lr,loss_total,loss_phuber,loss_perceptual";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phases: Vec<ProgressivePhase>,
    pub seed: u64,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phases: DESK_PHASES.to_vec(),
            seed: 0,
            loss: LossConfig::default(),
            schedule: ScheduleConfig {
                lr_max: DESK_LR_MAX,
                ..Default::default()
            },
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            keep_checkpoints: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(config_err!("at least one training phase is required"));
        }
        for p in &self.phases {
            if p.image_size == 0 || p.image_size % SIZE_MULTIPLE != 0 {
                return Err(config_err!(
                    "phase image size {} is not a positive multiple of {SIZE_MULTIPLE}",
                    p.image_size
                ));
            }
            if p.batch_size == 0 {
                return Err(config_err!("phase batch size must be ≥ 1"));
            }
        }
        if self.checkpoint_every == 0 || self.keep_checkpoints == 0 {
            return Err(config_err!("checkpoint_every and keep_checkpoints must be ≥ 1"));
        }
        self.loss.validate()?;
        self.schedule.validate()
    }

    pub fn total_iterations(&self) -> u64 {
        self.phases.iter().map(|p| p.iterations).sum()
    }

    /// Schedule actually used: stretched mode spans the whole run.
    pub fn effective_schedule(&self) -> ScheduleConfig {
        match self.schedule.mode {
            ScheduleMode::Restart => self.schedule,
            ScheduleMode::Stretched => ScheduleConfig {
                t_max: self.total_iterations().max(1),
                ..self.schedule
            },
        }
    }

    /// Phase index of global iteration `t`, `None` past the end.
    pub fn phase_at(&self, t: u64) -> Option<usize> {
        let mut end = 0;
        for (i, p) in self.phases.iter().enumerate() {
            end += p.iterations;
            if t < end {
                return Some(i);
            }
        }
        None
    }

    fn is_phase_end(&self, done: u64) -> bool {
        let mut end = 0;
        self.phases.iter().any(|p| {
            end += p.iterations;
            end == done
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: u64,
    pub phase: usize,
    pub lr: f64,
    pub total: f64,
    pub phuber: f64,
    pub perceptual: Option<f64>,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        let p = self.perceptual.map(|v| format!("{v:e}")).unwrap_or_default();
        format!(
            "{},{},{:e},{:e},{:e},{p}",
            self.iter, self.phase, self.lr, self.total, self.phuber
        )
    }
}

/// Crop positions and sample indices of one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub items: Vec<(usize, usize, usize)>,
}

fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(stream);
    r.next_u64()
}

/// Batch of global iteration `t`: a pure function of the master seed, the
/// phase and `t`, so interrupted runs replay exactly.
pub fn plan_batch(pairs: &[SamplePair], phase: usize, spec: &ProgressivePhase, seed: u64, t: u64) -> Result<BatchPlan> {
    if pairs.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, phase as u64));
    rng.set_stream(t);
    let idx: Vec<usize> = if pairs.len() >= spec.batch_size {
        sample(&mut rng, pairs.len(), spec.batch_size).into_vec()
    } else {
        (0..spec.batch_size).map(|_| rng.random_range(0..pairs.len())).collect()
    };
    let s = spec.image_size;
    let items = idx
        .into_iter()
        .map(|k| {
            let (h, w) = pairs[k].input.image_dims()?;
            if h < s || w < s {
                return Err(config_err!("sample {} is {h}×{w}, smaller than the {s}px crop", pairs[k].id));
            }
            Ok((k, rng.random_range(0..=h - s), rng.random_range(0..=w - s)))
        })
        .collect::<Result<_>>()?;
    Ok(BatchPlan { items })
}

fn crop(img: &Tensor, i0: usize, j0: usize, s: usize, out: &mut Vec<f64>) -> Result<()> {
    let (_, w) = img.image_dims()?;
    for i in i0..i0 + s {
        out.extend_from_slice(&img.data()[i * w + j0..][..s]);
    }
    Ok(())
}

/// `(input, target)` tensors of shape `B×1×S×S`.
pub fn assemble_batch(pairs: &[SamplePair], plan: &BatchPlan, size: usize) -> Result<(Tensor, Tensor)> {
    let b = plan.items.len();
    let (mut x, mut y) = (Vec::with_capacity(b * size * size), Vec::with_capacity(b * size * size));
    for &(k, i0, j0) in &plan.items {
        crop(&pairs[k].input, i0, j0, size, &mut x)?;
        crop(&pairs[k].gt, i0, j0, size, &mut y)?;
    }
    Ok((Tensor::new(&[b, 1, size, size], x)?, Tensor::new(&[b, 1, size, size], y)?))
}

/// Loss terms of one batch and the gradients accumulated on `ps`.
pub fn loss_and_grad(net: &Marmamba, ps: &mut ParamStore, x: &Tensor, y: &Tensor, loss: &LossConfig) -> Result<(f64, f64, Option<f64>)> {
    let mut g = Graph::train();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let out = net.forward(&mut g, ps, xv)?;
    let terms = combined_loss(&mut g, yv, out, loss)?;
    let total = g.value(terms.total).item()?;
    let phuber = g.value(terms.phuber).item()?;
    let perceptual = terms.perceptual.map(|p| g.value(p).item()).transpose()?;
    if !total.is_finite() {
        return Ok((total, phuber, perceptual));
    }
    g.backward(terms.total)?;
    ps.zero_grad();
    ps.accumulate_grads(&g);
    Ok((total, phuber, perceptual))
}

/// Where training writes its loss log and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub dtype: StoreDtype,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LossRecord>,
    pub optimizer: AdamState,
    pub iterations: u64,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("iter_{iteration:08}")
}

/// Checkpoint directories under `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let root = dir.join(CHECKPOINT_DIR);
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("iter_")))
        .collect();
    out.sort();
    Ok(out)
}

struct LogSink {
    writer: Option<BufWriter<File>>,
}

impl LogSink {
    /// Opens the log, dropping rows at or past `start` left by an earlier run.
    fn open(out: Option<&TrainOutput>, start: u64) -> Result<Self> {
        let Some(out) = out else { return Ok(Self { writer: None }) };
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        let path = out.dir.join(LOSS_LOG_FILE);
        let mut kept = Vec::new();
        if start > 0 && path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let iter: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
                if iter < start {
                    kept.push(line);
                }
            }
        }
        let mut text = format!("{LOSS_LOG_HEADER}\n");
        for l in kept {
            text.push_str(&l);
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let f = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            writer: Some(BufWriter::new(f)),
        })
    }

    fn push(&mut self, r: &LossRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            writeln!(w, "{}", r.csv_row()).map_err(|e| Error::io(LOSS_LOG_FILE, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|e| Error::io(LOSS_LOG_FILE, e))?;
        }
        Ok(())
    }
}

/// Trains `ps` in place. With `resume`, parameters, optimiser state and the
/// iteration counter come from the checkpoint and training continues where
/// it stopped.
pub fn train(
    pairs: &[SamplePair],
    net: &Marmamba,
    ps: &mut ParamStore,
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut opt, start) = match resume {
        Some(ck) => {
            if ck.net.config != net.config {
                return Err(config_err!("checkpoint network configuration differs from the requested one"));
            }
            *ps = ck.params;
            let opt = ck.optimizer.ok_or_else(|| config_err!("checkpoint has no optimizer state to resume from"))?;
            (opt, ck.meta.iteration)
        }
        None => (AdamState::new(ps, cfg.adam), 0),
    };
    let total = cfg.total_iterations();
    let schedule = cfg.effective_schedule();
    let mut sink = LogSink::open(out, start)?;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();

    for t in start..total {
        let phase = cfg.phase_at(t).expect("t < total");
        let spec = &cfg.phases[phase];
        let plan = plan_batch(pairs, phase, spec, cfg.seed, t)?;
        let (x, y) = assemble_batch(pairs, &plan, spec.image_size)?;
        let lr = cosine_lr(t, &schedule);
        let step = loss_and_grad(net, ps, &x, &y, &cfg.loss);
        if step.is_err() {
            sink.flush()?;
        }
        let (loss, phuber, perceptual) = step?;
        let rec = LossRecord {
            iter: t,
            phase,
            lr,
            total: loss,
            phuber,
            perceptual,
        };
        sink.push(&rec)?;
        log.push(rec);
        if !loss.is_finite() {
            sink.flush()?;
            return Err(Error::Numeric(format!("loss became {loss} at iteration {t}")));
        }
        if let Err(e) = opt.step(ps, lr) {
            sink.flush()?;
            return Err(e);
        }
        let done = t + 1;
        if let Some(out) = out {
            if done % cfg.checkpoint_every == 0 || cfg.is_phase_end(done) {
                sink.flush()?;
                let dir = out.dir.join(CHECKPOINT_DIR).join(checkpoint_name(done));
                let meta = CheckpointMeta {
                    iteration: done,
                    seed: cfg.seed,
                };
                save_checkpoint(&dir, &net.config, ps, Some(&opt), &meta, out.dtype)?;
                checkpoints.push(dir);
                let all = list_checkpoints(&out.dir)?;
                for old in &all[..all.len().saturating_sub(cfg.keep_checkpoints)] {
                    fs::remove_dir_all(old).map_err(|e| Error::io(old, e))?;
                }
            }
        }
    }
    sink.flush()?;
    Ok(TrainOutcome {
        log,
        optimizer: opt,
        iterations: total,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::NetConfig;
    use crate::checkpoint::load_checkpoint;
    use crate::ct::{synth_sample, SinogramConfig, SynthConfig};

    fn tiny_set(count: usize) -> Vec<SamplePair> {
        let cfg = SynthConfig {
            count,
            grid: 16,
            sinogram: SinogramConfig { n_angles: 24, ..Default::default() },
            ..Default::default()
        };
        (0..count).map(|i| synth_sample(&cfg, i).unwrap()).collect()
    }

    fn tiny_cfg(phases: Vec<ProgressivePhase>) -> TrainConfig {
        TrainConfig {
            phases,
            checkpoint_every: 3,
            schedule: ScheduleConfig {
                lr_max: 1e-3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn micro() -> (Marmamba, ParamStore) {
        Marmamba::new(NetConfig::micro(), 1).unwrap()
    }

    #[test]
    fn phase_lookup() {
        let c = tiny_cfg(vec![ProgressivePhase::new(8, 1, 2), ProgressivePhase::new(16, 1, 3)]);
        let phases: Vec<_> = (0..6).map(|t| c.phase_at(t)).collect();
        assert_eq!(phases, [Some(0), Some(0), Some(1), Some(1), Some(1), None]);
        assert!(c.is_phase_end(2) && c.is_phase_end(5) && !c.is_phase_end(3));
        assert_eq!(c.total_iterations(), 5);
    }

    #[test]
    fn rejects_bad_phases() {
        assert!(tiny_cfg(vec![]).validate().is_err());
        assert!(tiny_cfg(vec![ProgressivePhase::new(12, 1, 1)]).validate().is_err());
        assert!(tiny_cfg(vec![ProgressivePhase::new(8, 0, 1)]).validate().is_err());
        assert!(tiny_cfg(PAPER_PHASES.to_vec()).validate().is_ok());
    }

    #[test]
    fn batch_plan_is_deterministic_and_in_bounds() {
        let pairs = tiny_set(3);
        let spec = ProgressivePhase::new(8, 2, 1);
        let a = plan_batch(&pairs, 0, &spec, 5, 7).unwrap();
        assert_eq!(a, plan_batch(&pairs, 0, &spec, 5, 7).unwrap());
        assert_ne!(a, plan_batch(&pairs, 0, &spec, 5, 8).unwrap());
        assert_ne!(a.items[0].0, a.items[1].0);
        for &(k, i, j) in &a.items {
            assert!(k < 3 && i <= 8 && j <= 8);
        }
    }

    #[test]
    fn small_dataset_samples_with_replacement() {
        let pairs = tiny_set(2);
        let spec = ProgressivePhase::new(8, 5, 1);
        let plan = plan_batch(&pairs, 0, &spec, 0, 0).unwrap();
        assert_eq!(plan.items.len(), 5);
        let (x, y) = assemble_batch(&pairs, &plan, 8).unwrap();
        assert_eq!(x.shape(), &[5, 1, 8, 8]);
        assert_eq!(y.shape(), &[5, 1, 8, 8]);
    }

    #[test]
    fn crops_too_large_are_rejected() {
        let pairs = tiny_set(1);
        assert!(plan_batch(&pairs, 0, &ProgressivePhase::new(24, 1, 1), 0, 0).is_err());
    }

    #[test]
    fn crop_copies_the_window() {
        let pairs = tiny_set(1);
        let plan = BatchPlan { items: vec![(0, 3, 5)] };
        let (x, _) = assemble_batch(&pairs, &plan, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(x.data()[i * 8 + j], pairs[0].input.data()[(i + 3) * 16 + j + 5]);
            }
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let pairs = tiny_set(2);
        let cfg = tiny_cfg(vec![ProgressivePhase::new(8, 2, 4)]);
        let run = || {
            let (net, mut ps) = micro();
            let o = train(&pairs, &net, &mut ps, &cfg, None, None).unwrap();
            (o.log, ps)
        };
        let ((la, pa), (lb, pb)) = (run(), run());
        assert_eq!(la, lb);
        for (id, _, t) in pa.iter() {
            assert_eq!(t.data(), pb.get(id).data());
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let pairs = tiny_set(2);
        let cfg = tiny_cfg(vec![ProgressivePhase::new(8, 2, 4), ProgressivePhase::new(16, 1, 2)]);
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutput {
            dir: dir.path().to_path_buf(),
            dtype: StoreDtype::F64,
        };
        let (net, mut ps) = micro();
        let full = train(&pairs, &net, &mut ps, &cfg, Some(&out), None).unwrap();
        // every 3 iterations and at the phase boundary (4) and the end (6)
        let names: Vec<_> = full.checkpoints.iter().map(|p| p.file_name().unwrap().to_owned()).collect();
        assert_eq!(names, ["iter_00000003", "iter_00000004", "iter_00000006"]);

        let ck = load_checkpoint(&dir.path().join(CHECKPOINT_DIR).join("iter_00000003")).unwrap();
        let (net2, mut ps2) = micro();
        let resumed = train(&pairs, &net2, &mut ps2, &cfg, Some(&out), Some(ck)).unwrap();
        assert_eq!(resumed.log[0].iter, 3);
        assert!((resumed.log[0].total - full.log[3].total).abs() <= 1e-12);
        assert_eq!(resumed.log[..], full.log[3..]);
        for (id, _, t) in ps.iter() {
            assert_eq!(t.data(), ps2.get(id).data());
        }
        let text = fs::read_to_string(dir.path().join(LOSS_LOG_FILE)).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], LOSS_LOG_HEADER);
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines[6].starts_with("5,1,"));
    }

    #[test]
    fn keeps_only_the_last_checkpoints() {
        let pairs = tiny_set(2);
        let mut cfg = tiny_cfg(vec![ProgressivePhase::new(8, 1, 8)]);
        cfg.checkpoint_every = 1;
        cfg.keep_checkpoints = 3;
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutput {
            dir: dir.path().to_path_buf(),
            dtype: StoreDtype::F64,
        };
        let (net, mut ps) = micro();
        train(&pairs, &net, &mut ps, &cfg, Some(&out), None).unwrap();
        let left: Vec<_> = list_checkpoints(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(left, ["iter_00000006", "iter_00000007", "iter_00000008"]);
    }

    #[test]
    fn nan_loss_aborts_and_keeps_checkpoints() {
        let mut pairs = tiny_set(1);
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutput {
            dir: dir.path().to_path_buf(),
            dtype: StoreDtype::F64,
        };
        let mut cfg = tiny_cfg(vec![ProgressivePhase::new(8, 1, 2), ProgressivePhase::new(16, 1, 2)]);
        cfg.checkpoint_every = 100;
        // the full-frame phase reads the poisoned pixel
        pairs[0].gt.data_mut()[16 * 16 - 1] = f64::NAN;
        let (net, mut ps) = micro();
        let res = train(&pairs, &net, &mut ps, &cfg, Some(&out), None);
        assert!(matches!(res, Err(Error::Numeric(_))), "{res:?}");
        let left = list_checkpoints(dir.path()).unwrap();
        assert!(left.iter().any(|p| p.ends_with("iter_00000002")));
        let text = fs::read_to_string(dir.path().join(LOSS_LOG_FILE)).unwrap();
        assert!(text.lines().last().unwrap().contains("NaN"), "{text}");
    }

    #[test]
    fn loss_log_row_format() {
        let r = LossRecord {
            iter: 12,
            phase: 1,
            lr: 2e-4,
            total: 0.5,
            phuber: 0.25,
            perceptual: None,
        };
        assert_eq!(r.csv_row(), "12,1,2e-4,5e-1,2.5e-1,");
    }
}
