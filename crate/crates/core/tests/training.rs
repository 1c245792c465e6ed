//! End-to-end training on tiny synthetic sets.

use dmem::data::{generate_synthetic, Sample, SynthSpec};
use dmem::ensemble::{
    argmax_labels, fuse_nuclei, majority_vote, mean_nucleus_zsi, prepare, train_bundle, train_path, BundlePath, BundlePlan, EnsembleBundle,
    OptimizerKind, TrainConfig, ABLATION_KIND, ENSEMBLE_KIND,
};
use dmem::network::{build_network, ArchConfig, Variant};
use dmem::Error;

fn arch() -> ArchConfig {
    ArchConfig {
        stages: 2,
        initial_channels: 8,
        growth_rate: 4,
        layers_per_block: 2,
        input_size: (16, 16),
        ..ArchConfig::default()
    }
}

fn samples(count: usize, seed: u64) -> Vec<Sample> {
    generate_synthetic(&SynthSpec {
        count,
        size: 32,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn hp(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

fn quiet(_: usize, _: Variant, _: &dmem::ensemble::EpochLog) {}

#[test]
fn one_epoch_beats_uniform_guess() {
    let data: Vec<Sample> = generate_synthetic(&SynthSpec {
        count: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let t = train_path::<f64>(&ArchConfig::default(), &data, &[], &cfg, 0, &mut |_| {}).unwrap();
    let loss = t.history[0].loss;
    assert!(loss.is_finite() && loss < 4f64.ln(), "loss {loss}");
}

#[test]
fn best_validation_epoch_is_kept() {
    let (train, val) = (samples(4, 1), samples(3, 21));
    let mut seen = Vec::new();
    let t = train_path::<f64>(&arch(), &train, &val, &hp(6), 3, &mut |log| seen.push(log.clone())).unwrap();
    assert_eq!(t.history, seen);
    let zsis: Vec<f64> = t.history.iter().map(|h| h.val_zsi.unwrap()).collect();
    let best = zsis.iter().cloned().fold(f64::MIN, f64::max);
    let first_best = zsis.iter().position(|&z| z == best).unwrap() + 1;
    assert_eq!(t.selected_epoch, first_best, "{zsis:?}");
    let prepared: Vec<_> = val.iter().map(|s| prepare::<f64>(&arch(), s).unwrap()).collect();
    assert_eq!(mean_nucleus_zsi(&t.model, &prepared).unwrap(), best);
    let manifest = t.manifest(ENSEMBLE_KIND, &hp(6));
    assert_eq!(manifest.get("selected_epoch"), Some(first_best.to_string().as_str()));

    let last = train_path::<f64>(&arch(), &train, &[], &hp(3), 3, &mut |_| {}).unwrap();
    assert_eq!(last.selected_epoch, 3);
}

#[test]
fn zero_learning_rate_freezes_weights() {
    let data = samples(4, 2);
    let cfg = TrainConfig {
        lr: 0.0,
        flips: false,
        ..hp(2)
    };
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let cfg = TrainConfig { optimizer, ..cfg.clone() };
        let t = train_path::<f64>(&arch(), &data, &[], &cfg, 5, &mut |_| {}).unwrap();
        let fresh = build_network::<f64>(&arch(), 5).unwrap();
        assert_eq!(t.model.checksum(), fresh.checksum());
        assert!((t.history[0].loss - t.history[1].loss).abs() < 1e-12);
        assert_eq!(t.history[0].val_zsi, None);
    }
}

#[test]
fn same_seed_same_weights() {
    let data = samples(4, 3);
    let a = train_path::<f32>(&arch(), &data, &[], &hp(1), 9, &mut |_| {}).unwrap();
    let b = train_path::<f32>(&arch(), &data, &[], &hp(1), 9, &mut |_| {}).unwrap();
    let c = train_path::<f32>(&arch(), &data, &[], &hp(1), 10, &mut |_| {}).unwrap();
    assert_eq!(a.model.checksum(), b.model.checksum());
    assert_eq!(a.history, b.history);
    assert_ne!(a.model.checksum(), c.model.checksum());
}

#[test]
fn threads_do_not_change_results() {
    let data = samples(4, 4);
    let run = |parallel| {
        train_bundle::<f32>(&arch(), &BundlePlan::Ensemble, &data, &[], &hp(1), 7, parallel, &quiet).unwrap()
    };
    let (a, b) = (run(false), run(true));
    assert_eq!(a.kind(), "D-MEM");
    for (p, q) in a.paths().iter().zip(b.paths()) {
        assert_eq!(p.model.checksum(), q.model.checksum());
        assert_eq!(p.manifest, q.manifest);
        assert_eq!(p.manifest.get("kind"), Some(ENSEMBLE_KIND));
    }
    assert_eq!(a.variants(), Variant::ALL.to_vec());
    assert_eq!(a.paths()[2].manifest.get("seed"), Some("9"));
}

#[test]
fn saved_bundle_predicts_identically() {
    let data = samples(3, 5);
    let bundle = train_bundle::<f32>(&arch(), &BundlePlan::Ensemble, &data, &[], &hp(1), 1, false, &quiet).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    assert_eq!(dmem::ensemble::stored_precision(dir.path()).unwrap(), "f32");
    let back = EnsembleBundle::<f32>::load(dir.path()).unwrap();
    for s in &data {
        let image = s.resized(16, 16).unwrap().image;
        let (p, q) = (bundle.predict(&image).unwrap(), back.predict(&image).unwrap());
        assert_eq!(p, q);
        assert_eq!(p.votes.len(), 16 * 16);
        assert!(p.votes.iter().all(|v| v.iter().sum::<u8>() == 3));
    }
    assert!(bundle.predict(&data[0].image).is_err());
}

#[test]
fn identical_paths_reduce_to_single_argmax() {
    let model = build_network::<f64>(&arch(), 11).unwrap();
    let copy = || BundlePath {
        model: build_network::<f64>(&arch(), 11).unwrap(),
        manifest: Default::default(),
    };
    let bundle = EnsembleBundle::new(vec![copy(), copy(), copy()]).unwrap();
    let image = samples(1, 6)[0].resized(16, 16).unwrap().image;
    let pred = bundle.predict(&image).unwrap();
    let logits = model.predict_logits(&dmem::data::normalize(&image)).unwrap();
    let labels = argmax_labels(&logits).unwrap();
    assert_eq!(pred.labels, labels);
    assert_eq!(pred.nuclei, fuse_nuclei(&labels));
    let probs = bundle.path_probabilities(&dmem::data::normalize(&image)).unwrap();
    assert_eq!(majority_vote([&probs[0], &probs[1], &probs[2]]).unwrap(), labels);
}

#[test]
fn exploding_loss_is_reported() {
    let data = samples(4, 7);
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr: 1e12,
        epochs: 5,
        ..hp(5)
    };
    match train_path::<f32>(&arch(), &data, &[], &cfg, 1, &mut |_| {}) {
        Err(Error::NonFiniteLoss { path, epoch, batch }) => {
            assert_eq!(path, "plain");
            assert!(epoch >= 1 && batch >= 1);
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e12 stayed finite"),
    }
}

#[test]
fn single_path_bundle_is_an_ablation() {
    let data = samples(2, 8);
    let plan = BundlePlan::Single(Variant::DeformExpand);
    let bundle = train_bundle::<f32>(&arch(), &plan, &data, &[], &hp(1), 4, false, &quiet).unwrap();
    assert!(!bundle.is_ensemble());
    assert_eq!(bundle.kind(), ABLATION_KIND);
    assert_eq!(bundle.paths()[0].manifest.get("kind"), Some(ABLATION_KIND));
    let pred = bundle.predict(&data[0].resized(16, 16).unwrap().image).unwrap();
    assert!(pred.votes.is_empty());
    let report = bundle.evaluate(&data).unwrap();
    assert_eq!(report.rows.len(), 2);
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    let data = samples(2, 9);
    for bad in [
        TrainConfig { epochs: 0, ..hp(1) },
        TrainConfig { batch_size: 0, ..hp(1) },
        TrainConfig { lr: -1.0, ..hp(1) },
    ] {
        assert!(train_path::<f32>(&arch(), &data, &[], &bad, 1, &mut |_| {}).is_err());
    }
    assert!(train_path::<f32>(&arch(), &[], &[], &hp(1), 1, &mut |_| {}).is_err());
    assert!(EnsembleBundle::<f64>::new(Vec::new()).is_err());
}
