use std::collections::BTreeSet;

use convadapt::checkpoint::{load_adapter, load_base, save_adapter, save_base};
use convadapt::data::generate_synthetic;
use convadapt::training::{crossval, finetune_adapter, finetune_freeze, pretrain, predict_volume, EvalOptions};
use convadapt::*;

fn cohort(n: usize, seed: u64) -> Vec<SegVolume> {
    generate_synthetic(&SynthSpec {
        patient_count: n,
        slices: 2,
        height: 16,
        width: 16,
        target_volume_ml: [2.0, 6.0],
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn quick(phase_pretrain: bool) -> TrainConfig {
    let base = if phase_pretrain { TrainConfig::pretrain() } else { TrainConfig::finetune() };
    TrainConfig { epochs: 2, views: 2, ..base }
}

#[test]
fn adapter_checkpoint_round_trip_reproduces_predictions() {
    let data = cohort(3, 1);
    let mut net = Network::build(&NetworkSpec::new(Architecture::MultiView, 4), 1).unwrap();
    pretrain(&mut net, &data, &quick(true)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_base(&net, &dir.path().join("base")).unwrap();
    finetune_adapter(&mut net, &data, &AdapterConfig::new(AdapterMethod::ConvDora, 3), &quick(false)).unwrap();
    save_adapter(&net, &dir.path().join("adapter")).unwrap();

    let mut restored = load_base(&dir.path().join("base")).unwrap();
    let cfg = load_adapter(&mut restored, &dir.path().join("adapter")).unwrap();
    assert_eq!(cfg, AdapterConfig::new(AdapterMethod::ConvDora, 3));
    assert_eq!(restored.trainable_count(), net.trainable_count());
    // Checkpoints are f32: outputs agree to single precision.
    let x = ndarray::Array4::from_shape_fn((1, 1, 16, 16), |(_, _, i, j)| ((i * 16 + j) % 7) as f64 / 7.0);
    let a = net.forward(&x).unwrap();
    let b = restored.forward(&x).unwrap();
    let err = a.iter().zip(&b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    assert!(err < 1e-4, "{err}");
    for v in &data {
        assert_eq!(predict_volume(&net, v).unwrap().dim(), v.mask.dim());
    }
}

#[test]
fn freeze_strategies_train_exactly_their_blocks() {
    let data = cohort(2, 2);
    let base = Network::build(&NetworkSpec::new(Architecture::MultiView, 4), 2).unwrap();
    for strategy in FreezeStrategy::ALL {
        let mut net = base.clone();
        finetune_freeze(&mut net, &data, strategy, &quick(false)).unwrap();
        let changed: BTreeSet<String> = net
            .named_tensors()
            .into_iter()
            .zip(base.named_tensors())
            .filter(|(a, b)| a.2 != b.2)
            .map(|(a, _)| a.0)
            .collect();
        let allowed = |name: &str| strategy.modules().iter().any(|m| name.starts_with(&format!("{m}.")));
        assert!(changed.iter().all(|c| allowed(c)), "{strategy}: {changed:?}");
        assert_eq!(changed.is_empty(), strategy == FreezeStrategy::None, "{strategy}");
    }
}

#[test]
fn crossval_covers_every_patient_once_per_mode() {
    let data = cohort(6, 3);
    let base = Network::build(&NetworkSpec::new(Architecture::Standard, 4), 3).unwrap();
    let cfg = SweepConfig {
        methods: vec![AdapterMethod::DoraC],
        ranks: vec![2, 64],
        strategies: vec![FreezeStrategy::Decoding],
        train: TrainConfig { epochs: 1, ..TrainConfig::finetune() },
        ..SweepConfig::default()
    };
    assert_eq!(cfg.cells().len(), 9);
    let summary = crossval(&data, &cfg, &base).unwrap();
    assert_eq!(summary.rows.len(), 3);
    for row in &summary.rows {
        let mut ids: Vec<&str> = row.report.patients.iter().map(|p| p.patient_id.as_str()).collect();
        ids.sort();
        let mut want: Vec<&str> = data.iter().map(|v| v.patient_id.as_str()).collect();
        want.sort();
        assert_eq!(ids, want, "{}", row.mode);
    }
    let ranks: Vec<usize> = summary.rank_series.iter().map(|p| p.rank).collect();
    assert_eq!(ranks, [2, 64]);
    assert_eq!(summary.rank_series[1].alpha, 128.0);
    let dir = tempfile::tempdir().unwrap();
    summary.write(dir.path()).unwrap();
    for f in ["table_strategies.csv", "table_adapters.csv", "rank_vs_dice.csv", "summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn fold_split_is_seeded_and_balanced() {
    let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
    let a = FoldSplit::round_robin(&ids, 3, 7).unwrap();
    let b = FoldSplit::round_robin(&ids, 3, 7).unwrap();
    assert_eq!(a, b);
    let mut sizes = [0usize; 3];
    for f in a.assignments.values() {
        sizes[*f] += 1;
    }
    sizes.sort();
    assert_eq!(sizes, [3, 3, 4]);
    assert!(FoldSplit::round_robin(&["x", "x"], 2, 0).is_err());
}

#[test]
fn eval_contrast_remap_is_deterministic() {
    let data = cohort(3, 4);
    let net = Network::build(&NetworkSpec::new(Architecture::Standard, 4), 4).unwrap();
    let opts = EvalOptions { contrast_seed: Some(9) };
    let a = training::evaluate(&net, &data, &opts).unwrap();
    let b = training::evaluate(&net, &data, &opts).unwrap();
    assert_eq!(a, b);
}
