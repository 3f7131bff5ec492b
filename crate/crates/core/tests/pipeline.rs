use marmamba::backbone::{Marmamba, NetConfig};
use marmamba::checkpoint::load_checkpoint;
use marmamba::ct::{load_dataset, synth_dataset, SynthConfig};
use marmamba::metrics::{evaluate_set, EvalConfig, RegionMode, SizeGroup};
use marmamba::train::{list_checkpoints, train, ProgressivePhase, TrainConfig, TrainOutput, LOSS_LOG_FILE};
use marmamba::tensor::StoreDtype;

fn small_synth() -> SynthConfig {
    SynthConfig {
        count: 4,
        grid: 32,
        ..Default::default()
    }
}

#[test]
fn synth_train_checkpoint_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    synth_dataset(&small_synth(), &data_dir).unwrap();
    let data = load_dataset(&data_dir).unwrap();
    assert_eq!(data.pairs.len(), 4);

    let (net, mut ps) = Marmamba::new(NetConfig::micro(), 5).unwrap();
    let cfg = TrainConfig {
        phases: vec![ProgressivePhase::new(16, 2, 3), ProgressivePhase::new(32, 1, 2)],
        seed: 5,
        ..Default::default()
    };
    let out = TrainOutput {
        dir: tmp.path().join("run"),
        dtype: StoreDtype::F64,
    };
    let outcome = train(&data.pairs, &net, &mut ps, &cfg, Some(&out), None).unwrap();
    assert_eq!(outcome.iterations, 5);
    let log = std::fs::read_to_string(out.dir.join(LOSS_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 6);

    let cks = list_checkpoints(&out.dir).unwrap();
    assert_eq!(cks.len(), 2, "one checkpoint per phase end");
    let ck = load_checkpoint(cks.last().unwrap()).unwrap();
    assert_eq!(ck.meta.iteration, 5);

    let eval = EvalConfig {
        perceptual: false,
        ..Default::default()
    };
    let a = evaluate_set(&data.pairs, |x| ck.net.restore_image(&ck.params, x), &eval).unwrap();
    let b = evaluate_set(&data.pairs, |x| net.restore_image(&ps, x), &eval).unwrap();
    assert_eq!(a.per_image_csv(), b.per_image_csv());
    assert_eq!(a.aggregate_csv(), b.aggregate_csv());
    assert_eq!(a.records.len(), 4 * RegionMode::ALL.len());
    assert_eq!(a.cells.len(), RegionMode::ALL.len() * SizeGroup::ALL.len());
}

#[test]
fn identity_restoration_scores_the_input() {
    let pairs: Vec<_> = (0..2).map(|i| marmamba::ct::synth_sample(&small_synth(), i).unwrap()).collect();
    let eval = EvalConfig {
        perceptual: false,
        modes: vec![RegionMode::MetalIncluded],
        ..Default::default()
    };
    let t = evaluate_set(&pairs, |x| Ok(x.clone()), &eval).unwrap();
    for (r, p) in t.records.iter().zip(&pairs) {
        let expect = marmamba::metrics::psnr(&p.gt, &p.input, None, 1.0).unwrap();
        assert_eq!(r.psnr, expect);
    }
}
