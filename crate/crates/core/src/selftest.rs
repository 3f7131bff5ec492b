//! Fast invariant suite: each check reproduces one published contract of
//! the toolkit at its stated tolerance.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{argmax, directional_energy, energy_logratio, SpectrumConfig};
use crate::autodiff::{flip_tensor, FlipAxis, Graph, OpKind};
use crate::backbone::{Marmamba, NetConfig};
use crate::ct::{
    corrupt_metal, coord, excise_reinsert, fbp, make_phantom, radon, CorruptionConfig, CtFixture, MetalSpec, PhantomSpec,
    SinogramConfig, SynthConfig,
};
use crate::error::Result;
use crate::gradcheck::{gradcheck_model, ModelCheckOptions};
use crate::losses::{combined_loss, pseudo_huber, HuberNorm, LossConfig};
use crate::metrics::{psnr, rmse, ssim, SizeGroup, REFERENCE_GRID, REFERENCE_SIZE_LISTS};
use crate::msmamba::{BlockConfig, Branch, BranchSet, Fmb};
use crate::optim::{cosine_lr, AdamConfig, AdamState, ScheduleConfig};
use crate::params::ParamStore;
use crate::ssm::{scan_chunked, scan_sequential, ScanOperands};
use crate::tensor::Tensor;
use crate::train::{train, ProgressivePhase, TrainConfig};

/// Metal threshold of the excise/reinsert procedure (normalised units).
pub const METAL_TAU: f64 = 1.2;

#[derive(Clone, Debug)]
pub struct Check {
    /// Acceptance criterion this check belongs to.
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(criterion: u8, name: &str, passed: bool, detail: String) -> Self {
        Self {
            criterion,
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn from_result(criterion: u8, name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(criterion, name, passed, detail),
            Err(e) => Self::new(criterion, name, false, format!("error: {e}")),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Micro network with a non-zero head, so every parameter receives gradient.
pub fn gradcheck_fixture() -> Result<(Marmamba, ParamStore, Tensor, Tensor)> {
    let cfg = NetConfig {
        head_zero_init: false,
        ..NetConfig::micro()
    };
    let (net, ps) = Marmamba::new(cfg, 0)?;
    let x = Tensor::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng(1));
    let y = Tensor::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng(2));
    Ok((net, ps, x, y))
}

pub fn gradient_integrity() -> Vec<Check> {
    let mut out = Vec::new();
    let t0 = Instant::now();
    let positive = gradcheck_fixture().and_then(|(net, ps, x, y)| {
        let r = gradcheck_model(&net, &ps, &x, &y, &LossConfig::default(), &ModelCheckOptions::default())?;
        Ok((
            r.passed() && r.max_rel_err < 1e-4,
            format!("max rel err {:.3e} over {} of {} scalars", r.max_rel_err, r.checked, r.total),
        ))
    });
    let elapsed = t0.elapsed();
    out.push(Check::from_result(1, "micro backbone gradcheck", positive));
    out.push(Check::new(
        1,
        "gradcheck runtime",
        elapsed < Duration::from_secs(60),
        format!("{:.1} s (limit 60 s)", elapsed.as_secs_f64()),
    ));
    let negative = gradcheck_fixture().and_then(|(net, ps, x, y)| {
        let opts = ModelCheckOptions {
            subsample_fraction: 0.01,
            fault: Some(OpKind::SelectiveScan),
            ..Default::default()
        };
        let r = gradcheck_model(&net, &ps, &x, &y, &LossConfig::default(), &opts)?;
        Ok((
            !r.passed() && r.max_rel_err > 1e-2,
            format!("corrupted scan backward: max rel err {:.3e}", r.max_rel_err),
        ))
    });
    out.push(Check::from_result(1, "fault injection detected", negative));
    out
}

pub fn scan_oracle() -> Check {
    let mut worst = 0.0f64;
    let r = (|| -> Result<(bool, String)> {
        for len in [1, 2, 3, 7, 64, 257] {
            let s = ScanOperands::random(2, len, 4, 6, len as u64);
            let (ys, hs) = scan_sequential(&s.view())?;
            for chunk in [1, 8, 64] {
                let (yc, hc) = scan_chunked(&s.view(), chunk)?;
                for (a, b) in ys.iter().zip(&yc).chain(hs.iter().zip(&hc)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        Ok((worst < 1e-10, format!("max abs diff {worst:.2e}")))
    })();
    Check::from_result(2, "chunked scan equals sequential", r)
}

pub fn residual_identity() -> Check {
    let r = (|| -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        for trial in 0..10u64 {
            let (net, ps) = Marmamba::new(NetConfig::micro(), trial)?;
            let x = Tensor::randn(&[1, 1, 16, 24], &mut rng(100 + trial));
            worst = worst.max(net.infer(&ps, &x)?.max_abs_diff(&x)?);
        }
        Ok((worst <= 1e-12, format!("max |out − in| {worst:.1e} over 10 trials")))
    })();
    Check::from_result(3, "zero head gives identity", r)
}

fn fmb_taps(fmb: &Fmb, ps: &ParamStore, x: &Tensor) -> Result<[Option<Tensor>; 3]> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let t = fmb.taps(&mut g, ps, xv)?;
    Ok([
        Some(g.value(t.normal).clone()),
        t.vertical.map(|v| g.value(v).clone()),
        t.horizontal.map(|v| g.value(v).clone()),
    ])
}

pub fn flip_algebra() -> Vec<Check> {
    let involution = (|| -> Result<(bool, String)> {
        let x = Tensor::randn(&[2, 3, 5, 4], &mut rng(5));
        let mut ok = true;
        for axis in [FlipAxis::Vertical, FlipAxis::Horizontal] {
            ok &= flip_tensor(&flip_tensor(&x, axis)?, axis)? == x;
        }
        Ok((ok, "flip∘flip == id bitwise".into()))
    })();
    let conjugation = (|| -> Result<(bool, String)> {
        let mut ps = ParamStore::new();
        let fmb = Fmb::new(&mut ps, "f", 3, &BlockConfig::default(), false, &mut rng(3))?;
        let x = Tensor::randn(&[2, 3, 6, 5], &mut rng(4));
        let [m0, m1, m2] = fmb_taps(&fmb, &ps, &x)?.map(Option::unwrap);
        let mut worst = 0.0f64;
        for (axis, b, mb) in [(FlipAxis::Vertical, Branch::Vertical, &m1), (FlipAxis::Horizontal, Branch::Horizontal, &m2)] {
            let swapped = fmb.swap_roles(&ps, Branch::Normal, b)?;
            let t = fmb_taps(&fmb, &swapped, &flip_tensor(&x, axis)?)?;
            let slot = if b == Branch::Vertical { 1 } else { 2 };
            worst = worst.max(t[0].as_ref().unwrap().max_abs_diff(&flip_tensor(mb, axis)?)?);
            worst = worst.max(t[slot].as_ref().unwrap().max_abs_diff(&flip_tensor(&m0, axis)?)?);
        }
        Ok((worst <= 1e-9, format!("max deviation {worst:.1e}")))
    })();
    let disabled = (|| -> Result<(bool, String)> {
        let cfg = BlockConfig {
            fmb_branches: BranchSet::NORMAL_ONLY,
            ..Default::default()
        };
        let mut ps = ParamStore::new();
        let fmb = Fmb::new(&mut ps, "f", 3, &cfg, false, &mut rng(1))?;
        let x = Tensor::randn(&[1, 3, 4, 4], &mut rng(2));
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let out = fmb.forward(&mut g, &ps, xv)?;
        let t = fmb.taps(&mut g, &ps, xv)?;
        let proj = fmb.project.forward(&mut g, &ps, t.normal)?;
        Ok((g.value(out) == g.value(proj), "normal-only FMB == projection of normal branch".into()))
    })();
    vec![
        Check::from_result(4, "flip involution", involution),
        Check::from_result(4, "FMB flip conjugation", conjugation),
        Check::from_result(4, "disabled-branch identity", disabled),
    ]
}

fn scalar_loss(f: impl FnOnce(&mut Graph) -> Result<crate::autodiff::Var>) -> Result<f64> {
    let mut g = Graph::inference();
    let v = f(&mut g)?;
    g.value(v).item()
}

pub fn loss_contracts() -> Vec<Check> {
    let value = (|| -> Result<(bool, String)> {
        let y = Tensor::zeros(&[1, 1, 1, 2]);
        let r = Tensor::new(&[1, 1, 1, 2], vec![0.024, 0.032])?;
        let v = scalar_loss(|g| {
            let (a, b) = (g.constant(y), g.constant(r));
            pseudo_huber(g, a, b, 0.03, HuberNorm::Sum)
        })?;
        Ok(((v - 0.02).abs() <= 1e-12, format!("‖r‖=0.04, c=0.03 → {v:.15}")))
    })();
    let zero_grad = (|| -> Result<(bool, String)> {
        let y = Tensor::rand_uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng(0));
        let mut g = Graph::train();
        let a = g.constant(y.clone());
        let b = g.leaf(y);
        let l = combined_loss(&mut g, a, b, &LossConfig::default())?.total;
        g.backward(l)?;
        let m = g.grad(b).map_or(0.0, |d| d.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        Ok((m < 1e-8, format!("max |∂L/∂ŷ| at ŷ = y: {m:.1e}")))
    })();
    let linear = (|| -> Result<(bool, String)> {
        let y = Tensor::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng(1));
        let yh = Tensor::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng(2));
        let eval = |alpha: f64, beta: f64| -> Result<(f64, f64, f64)> {
            let cfg = LossConfig {
                alpha,
                beta,
                ..Default::default()
            };
            let mut g = Graph::inference();
            let (a, b) = (g.constant(y.clone()), g.constant(yh.clone()));
            let t = combined_loss(&mut g, a, b, &cfg)?;
            Ok((g.value(t.total).item()?, g.value(t.phuber).item()?, g.value(t.perceptual.unwrap()).item()?))
        };
        let mut worst = 0.0f64;
        for (a, b) in [(0.8, 0.2), (0.3, 1.7), (2.0, 0.5)] {
            let (total, ph, pe) = eval(a, b)?;
            worst = worst.max((total - (a * ph + b * pe)).abs());
        }
        Ok((worst <= 1e-12, format!("max |L − (αL_ph + βL_p)| {worst:.1e}")))
    })();
    vec![
        Check::from_result(5, "pseudo-Huber hand value", value),
        Check::from_result(5, "zero gradient at identity", zero_grad),
        Check::from_result(5, "combined loss linearity", linear),
    ]
}

/// `steps` seeded micro training steps on 64-pixel synthetic data.
pub fn replay_run(steps: u64) -> Result<(Vec<f64>, ParamStore)> {
    let synth = SynthConfig {
        count: 4,
        ..Default::default()
    };
    let pairs: Vec<_> = (0..synth.count).map(|i| crate::ct::synth_sample(&synth, i)).collect::<Result<_>>()?;
    let (net, mut ps) = Marmamba::new(NetConfig::micro(), 7)?;
    let cfg = TrainConfig {
        phases: vec![ProgressivePhase::new(16, 2, steps)],
        seed: 11,
        ..Default::default()
    };
    let out = train(&pairs, &net, &mut ps, &cfg, None, None)?;
    Ok((out.log.iter().map(|r| r.total).collect(), ps))
}

pub fn optimizer_contracts() -> Vec<Check> {
    let c = ScheduleConfig::default();
    let (l0, l1) = (cosine_lr(0, &c), cosine_lr(1000, &c));
    let sched = Check::new(
        7,
        "cosine schedule endpoints",
        l0 == 2e-4 && l1 == 1e-8,
        format!("lr(0) = {l0:e}, lr(1000) = {l1:e}"),
    );
    let adam = (|| -> Result<(bool, String)> {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::scalar(1.0));
        let mut st = AdamState::new(&ps, AdamConfig::default());
        ps.get_mut(id).accumulate_grad(&[1.0]);
        st.step(&mut ps, 0.1)?;
        let w = ps.get(id).data()[0];
        Ok(((w - 0.9).abs() <= 1e-9, format!("w = 1, g = 1, lr = 0.1 → {w:.12}")))
    })();
    let replay = (|| -> Result<(bool, String)> {
        let (la, pa) = replay_run(100)?;
        let (lb, pb) = replay_run(100)?;
        let same_loss = la.iter().zip(&lb).all(|(a, b)| a.to_bits() == b.to_bits());
        let same_params = pa
            .iter()
            .all(|(id, _, t)| t.data().iter().zip(pb.get(id).data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        Ok((same_loss && same_params && la.len() == 100, format!("{} steps, losses and parameters compared bitwise", la.len())))
    })();
    vec![
        sched,
        Check::from_result(7, "Adam closed-form step", adam),
        Check::from_result(7, "seeded replay", replay),
    ]
}

pub fn ct_pipeline() -> Vec<Check> {
    let round_trip = (|| -> Result<(bool, String)> {
        let n = 128;
        let img = make_phantom(&PhantomSpec::random(n, 6, &mut rng(2)));
        let cfg = SinogramConfig::default();
        let rec = fbp(&radon(&img, &cfg)?, &cfg)?;
        let inside: Vec<bool> = (0..n * n).map(|k| coord(k / n, n).hypot(coord(k % n, n)) <= 0.9).collect();
        let e = rmse(&img, &rec, Some(&inside))?;
        Ok((e < 0.05, format!("n=128, 180 angles, RMSE inside r ≤ 0.9: {e:.4}")))
    })();
    let identity = (|| -> Result<(bool, String)> {
        let cfg = SinogramConfig::default();
        let st = radon(&make_phantom(&PhantomSpec::random(64, 6, &mut rng(4))), &cfg)?;
        let sm = radon(&MetalSpec::none().image(64), &cfg)?;
        let out = corrupt_metal(&st, &sm, &CorruptionConfig::default(), 1)?;
        Ok((out == st, "corruption without metal leaves the sinogram bitwise unchanged".into()))
    })();
    let fixture = CtFixture::reference();
    let report = fixture.measure(METAL_TAU);
    let streak = match &report {
        Ok(r) => Check::new(8, "streak anisotropy", r.streak_ratio >= 2.0, format!("variance ratio {:.2}", r.streak_ratio)),
        Err(e) => Check::new(8, "streak anisotropy", false, format!("error: {e}")),
    };
    let bits = (|| -> Result<(bool, String)> {
        let input = fixture.input()?;
        let r = excise_reinsert(&input, METAL_TAU, |x| Ok(x.map(|v| 0.5 * v)))?;
        let ok = input
            .data()
            .iter()
            .zip(r.output.data())
            .zip(r.mask.data())
            .all(|((a, b), &m)| m < 0.5 || a.to_bits() == b.to_bits());
        let px = r.mask.sum() as usize;
        Ok((ok && px > 0, format!("{px} metal pixels copied back bitwise")))
    })();
    let iou = match &report {
        Ok(r) => Check::new(
            8,
            "metal mask IoU",
            r.mask_iou >= 0.9,
            format!("IoU {:.3} (recall {:.3}) at τ = {METAL_TAU}", r.mask_iou, r.mask_recall),
        ),
        Err(e) => Check::new(8, "metal mask IoU", false, format!("error: {e}")),
    };
    vec![
        Check::from_result(8, "radon/fbp round trip", round_trip),
        Check::from_result(8, "no-metal corruption identity", identity),
        streak,
        Check::from_result(8, "excise/reinsert keeps metal", bits),
        iou,
    ]
}

pub fn metric_oracles() -> Vec<Check> {
    let psnr20 = (|| -> Result<(bool, String)> {
        let y = Tensor::full(&[8, 8], 0.5);
        let v = psnr(&y, &y.map(|v| v + 0.1), None, 1.0)?;
        Ok(((v - 20.0).abs() < 1e-9, format!("uniform 0.1 error → {v:.12} dB")))
    })();
    let ssim1 = (|| -> Result<(bool, String)> {
        let x = Tensor::rand_uniform(&[24, 24], 0.0, 1.0, &mut rng(3));
        let v = ssim(&x, &x, None, 1.0)?;
        Ok(((v - 1.0).abs() <= 1e-12, format!("SSIM(x, x) = {v}")))
    })();
    let rmse_oracle = (|| -> Result<(bool, String)> {
        let a = Tensor::randn(&[33, 17], &mut rng(4));
        let b = Tensor::randn(&[33, 17], &mut rng(5));
        let fast = rmse(&a, &b, None)?;
        // Kahan-compensated accumulation as an independent reference
        let (mut s, mut comp) = (0.0f64, 0.0f64);
        for (x, y) in a.data().iter().zip(b.data()) {
            let term = (x - y) * (x - y) - comp;
            let t = s + term;
            comp = (t - s) - term;
            s = t;
        }
        let slow = (s / a.len() as f64).sqrt();
        Ok(((fast - slow).abs() <= 1e-12, format!("|Δ| = {:.1e}", (fast - slow).abs())))
    })();
    let masked = (|| -> Result<(bool, String)> {
        let y = Tensor::rand_uniform(&[20, 20], 0.0, 1.0, &mut rng(6));
        let z = Tensor::rand_uniform(&[20, 20], 0.0, 1.0, &mut rng(7));
        let include: Vec<bool> = (0..400).map(|k| !(k / 20 >= 15 && k % 20 >= 15)).collect();
        let mut z2 = z.clone();
        for k in 0..400 {
            if !include[k] {
                z2.data_mut()[k] += 3.0;
            }
        }
        let same = psnr(&y, &z, Some(&include), 1.0)? == psnr(&y, &z2, Some(&include), 1.0)?
            && rmse(&y, &z, Some(&include))? == rmse(&y, &z2, Some(&include))?;
        Ok((same, "PSNR and RMSE unchanged by excluded-pixel edits".into()))
    })();
    let bins = {
        let mut bad = Vec::new();
        for (g, counts) in REFERENCE_SIZE_LISTS {
            for &c in counts {
                if SizeGroup::classify(c, REFERENCE_GRID) != g {
                    bad.push(c);
                }
            }
        }
        Check::new(9, "size-group binning", bad.is_empty(), format!("misclassified counts: {bad:?}"))
    };
    vec![
        Check::from_result(9, "PSNR 20 dB case", psnr20),
        Check::from_result(9, "SSIM self-similarity", ssim1),
        Check::from_result(9, "RMSE independent accumulation", rmse_oracle),
        Check::from_result(9, "masked metric invariance", masked),
        bins,
    ]
}

pub fn directional_contracts() -> Vec<Check> {
    let cfg = SpectrumConfig::default();
    let stripe = (|| -> Result<(bool, String)> {
        let n = 64;
        let img = Tensor::new(
            &[n, n],
            (0..n * n).map(|k| (2.0 * std::f64::consts::PI * 10.0 * (k / n) as f64 / n as f64).cos()).collect(),
        )?;
        let p = directional_energy(&img, &cfg)?;
        let b = argmax(&p).unwrap_or(0);
        let rest = p.iter().enumerate().filter(|&(i, _)| i != b).fold(0.0f64, |m, (_, &v)| m.max(v));
        let ratio = p[b] / rest.max(1e-300);
        Ok((b == cfg.bins / 2 && ratio >= 10.0, format!("peak bin {b}, concentration {ratio:.2e}")))
    })();
    let logratio = (|| -> Result<(bool, String)> {
        let p = directional_energy(&Tensor::randn(&[32, 32], &mut rng(8)), &cfg)?;
        let l = energy_logratio(&p, &p)?;
        Ok((l.iter().all(|&v| v == 0.0), "logratio(P, P) ≡ 0".into()))
    })();
    let dc = (|| -> Result<(bool, String)> {
        let x = Tensor::randn(&[48, 48], &mut rng(9));
        let a = directional_energy(&x, &cfg)?;
        let b = directional_energy(&x.map(|v| v + 0.7), &cfg)?;
        let d = a.iter().zip(&b).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        Ok((d <= 1e-9, format!("max |ΔP| after +0.7 offset {d:.1e}")))
    })();
    vec![
        Check::from_result(10, "stripe peak concentration", stripe),
        Check::from_result(10, "logratio of identical spectra", logratio),
        Check::from_result(10, "DC-offset invariance", dc),
    ]
}

/// Check groups with the criteria they cover.
pub const GROUPS: [(u8, fn() -> Vec<Check>); 9] = [
    (1, gradient_integrity),
    (2, || vec![scan_oracle()]),
    (3, || vec![residual_identity()]),
    (4, flip_algebra),
    (5, loss_contracts),
    (7, optimizer_contracts),
    (8, ct_pipeline),
    (9, metric_oracles),
    (10, directional_contracts),
];

/// Runs the groups whose criterion is listed (all when `criteria` is
/// empty); `progress` sees each check as it lands.
pub fn run(criteria: &[u8], mut progress: impl FnMut(&Check)) -> Vec<Check> {
    let mut all = Vec::new();
    for (criterion, group) in GROUPS {
        if !criteria.is_empty() && !criteria.contains(&criterion) {
            continue;
        }
        for c in group() {
            progress(&c);
            all.push(c);
        }
    }
    all
}

pub fn run_all(progress: impl FnMut(&Check)) -> Vec<Check> {
    run(&[], progress)
}
