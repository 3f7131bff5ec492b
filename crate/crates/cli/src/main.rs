mod config;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use marmamba::analysis::{error_map, render_hu, write_pgm, BranchSpectra};
use marmamba::backbone::{BlockRef, Marmamba};
use marmamba::checkpoint::{load_checkpoint, Checkpoint};
use marmamba::ct::{excise_reinsert, load_dataset, synth_dataset};
use marmamba::gradcheck::{gradcheck_model, ModelCheckOptions};
use marmamba::losses::LossKind;
use marmamba::metrics::evaluate_set;
use marmamba::msmamba::{BranchSet, PoolSet};
use marmamba::selftest::{self, METAL_TAU};
use marmamba::tensor::{read_mart, write_mart, StoreDtype, Tensor};
use marmamba::train::{list_checkpoints, train, TrainOutput, PAPER_PHASES};
use marmamba::autodiff::OpKind;
use marmamba::optim::ScheduleConfig;
use marmamba::{Error, Result};

use config::RunConfig;
use rundir::RunDir;

/// Exit status for command-line usage errors.
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "marmamba", version = env!("MARMAMBA_VERSION"), about = "Metal artifact reduction toolkit")]
struct Cli {
    /// Worker threads for synthesis, evaluation and analysis.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired synthetic dataset.
    Synth(SynthArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the uncorrected input) on a dataset.
    Eval(EvalArgs),
    /// Restore one image.
    Infer(InferArgs),
    /// Directional spectra, error map and renderings for one image.
    Analyze(AnalyzeArgs),
    /// Compare analytic and numeric gradients of the micro network.
    Gradcheck(GradcheckArgs),
    /// Run the fast invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    /// Also write 8-bit PGM previews.
    #[arg(long)]
    pgm: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `synth`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// FMB branches: any of n, h, v (n is mandatory).
    #[arg(long, value_name = "SET")]
    fmb_branches: Option<BranchSet>,
    /// AMB pooling: any of a, m.
    #[arg(long, value_name = "SET")]
    amb_pool: Option<PoolSet>,
    #[arg(long, value_name = "phuber|lpips|both")]
    loss: Option<LossKind>,
    /// Use the published three-phase schedule and learning rate.
    #[arg(long)]
    paper_schedule: bool,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Write the resolved configuration and stop.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint or training run directory; omit to score the inputs.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Metal-mask dilation radius in pixels.
    #[arg(long)]
    dilation: Option<usize>,
    #[arg(long)]
    no_perceptual: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Image as a MART1 tensor (H×W or 1×1×H×W).
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Threshold, excise and reinsert metal around the restoration.
    #[arg(long)]
    real_mode: bool,
    #[arg(long, requires = "real_mode", default_value_t = METAL_TAU)]
    tau: f64,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// Reference image for the error map.
    #[arg(long, value_name = "FILE")]
    gt: Option<PathBuf>,
    /// Metal mask to blank in the error map.
    #[arg(long, value_name = "FILE")]
    mask: Option<PathBuf>,
    #[arg(long)]
    stage: Option<usize>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Corrupt the backward rule of one op: scan, conv, linear, layernorm, matmul.
    #[arg(long, value_name = "OP")]
    fault: Option<String>,
    /// Fraction of parameter scalars checked.
    #[arg(long, default_value_t = 0.05)]
    subsample: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Only run checks for these acceptance criteria.
    #[arg(long, value_name = "N")]
    criterion: Vec<u8>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("marmamba: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("marmamba: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Analyze(a) => analyze(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Selftest(a) => selftest_cmd(a),
    }
}

fn synth(a: SynthArgs) -> Result<u8> {
    let mut cfg = a.common.run_config()?;
    if let Some(c) = a.count {
        cfg.synth.count = c;
    }
    if let Some(g) = a.grid {
        cfg.synth.grid = g;
    }
    cfg.synth.export_pgm |= a.pgm;
    let cfg = cfg.resolve();
    cfg.synth.validate()?;
    let run = RunDir::create(&a.out, a.common.force)?;
    run.write_config(&cfg, "synth")?;
    let manifest = synth_dataset(&cfg.synth, run.path())?;
    println!("wrote {} samples to {}", manifest.samples.len(), run.path().display());
    Ok(0)
}

fn train_cmd(a: TrainArgs) -> Result<u8> {
    let (cfg, run, resume) = if a.resume {
        let run = RunDir::open(&a.out)?;
        let cfg = RunConfig::load(&run.path().join(config::CONFIG_FILE))?;
        let latest = list_checkpoints(run.path())?
            .pop()
            .ok_or_else(|| Error::Config(format!("no checkpoint to resume in {}", run.path().display())))?;
        (cfg, run, Some(load_checkpoint(&latest)?))
    } else {
        let mut cfg = a.common.run_config()?;
        if let Some(b) = a.fmb_branches {
            cfg.net.block.fmb_branches = b;
        }
        if let Some(p) = a.amb_pool {
            cfg.net.block.amb_pool = p;
        }
        if let Some(k) = a.loss {
            cfg.loss = cfg.loss.with_kind(k);
        }
        if a.paper_schedule {
            cfg.phases = PAPER_PHASES.to_vec();
            cfg.schedule = ScheduleConfig {
                mode: cfg.schedule.mode,
                ..ScheduleConfig::default()
            };
        }
        let cfg = cfg.resolve();
        cfg.validate()?;
        let run = RunDir::create(&a.out, a.common.force)?;
        run.write_config(&cfg, "train")?;
        (cfg, run, None)
    };
    if a.dry_run {
        println!("resolved configuration written to {}", run.path().join(config::CONFIG_FILE).display());
        return Ok(0);
    }
    let data = load_dataset(&a.data)?;
    let (net, mut ps) = Marmamba::new(cfg.net.clone(), cfg.seed)?;
    let out = TrainOutput {
        dir: run.path().to_path_buf(),
        dtype: if cfg.checkpoint.f32 { StoreDtype::F32 } else { StoreDtype::F64 },
    };
    let outcome = train(&data.pairs, &net, &mut ps, &cfg.train_config(), Some(&out), resume)?;
    if let Some(last) = outcome.log.last() {
        println!("iteration {}: loss {:.6e}", last.iter + 1, last.total);
    }
    println!("{} checkpoints in {}", outcome.checkpoints.len(), run.path().display());
    Ok(0)
}

/// A checkpoint directory, or the newest checkpoint of a training run.
fn resolve_checkpoint(path: &Path) -> Result<Checkpoint> {
    if path.join("meta.json").exists() {
        return load_checkpoint(path);
    }
    let latest = list_checkpoints(path)?
        .pop()
        .ok_or_else(|| Error::Config(format!("{} holds no checkpoint", path.display())))?;
    load_checkpoint(&latest)
}

fn eval(a: EvalArgs) -> Result<u8> {
    let mut cfg = a.common.run_config()?;
    if let Some(d) = a.dilation {
        cfg.eval.dilation = d;
    }
    cfg.eval.perceptual &= !a.no_perceptual;
    let cfg = cfg.resolve();
    let data = load_dataset(&a.data)?;
    let ck = a.checkpoint.as_deref().map(resolve_checkpoint).transpose()?;
    let run = RunDir::create(&a.out, a.common.force)?;
    run.write_config(&cfg, "eval")?;
    let table = match &ck {
        Some(ck) => evaluate_set(&data.pairs, |x| ck.net.restore_image(&ck.params, x), &cfg.eval)?,
        None => evaluate_set(&data.pairs, |x| Ok(x.clone()), &cfg.eval)?,
    };
    table.write_csvs(&run.path().join("per_image.csv"), &run.path().join("aggregate.csv"))?;
    print!("{}", table.aggregate_csv());
    Ok(0)
}

fn read_image(path: &Path) -> Result<Tensor> {
    let t = read_mart(path)?;
    let (h, w) = t.image_dims()?;
    t.reshape(&[h, w])
}

fn infer(a: InferArgs) -> Result<u8> {
    let cfg = a.common.run_config()?.resolve();
    let ck = resolve_checkpoint(&a.checkpoint)?;
    let img = read_image(&a.input)?;
    let run = RunDir::create(&a.out, a.common.force)?;
    run.write_config(&cfg, "infer")?;
    let (h, w) = img.image_dims()?;
    let restored = if a.real_mode {
        let r = excise_reinsert(&img, a.tau, |x| ck.net.restore_image(&ck.params, x))?;
        write_mart(&run.path().join("metal_mask.mart"), &r.mask, StoreDtype::F64)?;
        r.output
    } else {
        ck.net.restore_image(&ck.params, &img)?
    };
    write_mart(&run.path().join("restored.mart"), &restored, StoreDtype::F64)?;
    let px = render_hu(&restored, &cfg.analysis.window, Some(&cfg.synth.calibration))?;
    write_pgm(&run.path().join("restored.pgm"), w, h, &px)?;
    println!("restored {h}×{w} image into {}", run.path().display());
    Ok(0)
}

fn analyze(a: AnalyzeArgs) -> Result<u8> {
    let mut cfg = a.common.run_config()?;
    let tap = BlockRef {
        stage: a.stage.unwrap_or(cfg.analysis.tap.stage),
        block: a.block.unwrap_or(cfg.analysis.tap.block),
    };
    cfg.analysis.tap = tap;
    let cfg = cfg.resolve();
    cfg.analysis.spectrum.validate()?;
    let ck = resolve_checkpoint(&a.checkpoint)?;
    let img = read_image(&a.image)?;
    let (h, w) = img.image_dims()?;
    let run = RunDir::create(&a.out, a.common.force)?;
    run.write_config(&cfg, "analyze")?;
    let spectra = BranchSpectra::measure(&ck.net, &ck.params, std::slice::from_ref(&img), tap, &cfg.analysis.spectrum)?;
    std::fs::write(run.path().join("spectrum.csv"), spectra.to_csv()).map_err(|e| Error::io(run.path(), e))?;
    let restored = ck.net.restore_image(&ck.params, &img)?;
    let calib = Some(&cfg.synth.calibration);
    write_pgm(&run.path().join("input.pgm"), w, h, &render_hu(&img, &cfg.analysis.window, calib)?)?;
    write_pgm(&run.path().join("restored.pgm"), w, h, &render_hu(&restored, &cfg.analysis.window, calib)?)?;
    if let Some(gt) = &a.gt {
        let gt = read_image(gt)?;
        let mask = a.mask.as_deref().map(read_image).transpose()?;
        let e = error_map(&restored, &gt, &cfg.analysis.error_map, mask.as_ref())?;
        let px: Vec<u8> = e.data().iter().map(|&v| marmamba::analysis::to_u8(v, 0.0, 1.0)).collect();
        write_pgm(&run.path().join("error_map.pgm"), w, h, &px)?;
    }
    print!("{}", spectra.to_csv());
    Ok(0)
}

fn parse_fault(name: &str) -> Result<OpKind> {
    Ok(match name {
        "scan" => OpKind::SelectiveScan,
        "conv" => OpKind::Conv2d,
        "linear" => OpKind::Linear,
        "layernorm" => OpKind::LayerNorm,
        "matmul" => OpKind::MatMul,
        _ => return Err(Error::Config(format!("unknown fault target {name:?} (scan|conv|linear|layernorm|matmul)"))),
    })
}

fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    let fault = a.fault.as_deref().map(parse_fault).transpose()?;
    let (net, ps, x, y) = selftest::gradcheck_fixture()?;
    let opts = ModelCheckOptions {
        subsample_fraction: a.subsample,
        seed: a.seed,
        fault,
        ..Default::default()
    };
    let report = gradcheck_model(&net, &ps, &x, &y, &Default::default(), &opts)?;
    println!(
        "checked {} of {} scalars: max rel err {:.3e}, max abs err {:.3e}, {} above {:.0e}",
        report.checked,
        report.total,
        report.max_rel_err,
        report.max_abs_err,
        report.failures.len(),
        report.tolerance
    );
    for f in report.failures.iter().take(10) {
        println!("  {}[{}]: analytic {:.6e}, numeric {:.6e}", f.name, f.index, f.analytic, f.numeric);
    }
    if report.passed() {
        Ok(0)
    } else {
        Err(Error::Numeric("analytic gradients disagree with finite differences".into()))
    }
}

fn selftest_cmd(a: SelftestArgs) -> Result<u8> {
    if let Some(&bad) = a.criterion.iter().find(|&&c| !selftest::GROUPS.iter().any(|(k, _)| *k == c)) {
        return Err(Error::Config(format!("no fast checks for criterion {bad}")));
    }
    let checks = selftest::run(&a.criterion, |c| {
        println!("[{:>2}] {} {}: {}", c.criterion, if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail)
    });
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    Ok(if failed == 0 { 0 } else { 1 })
}
