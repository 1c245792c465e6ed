//! Dense blocks and whole networks: channel bookkeeping, connectivity,
//! zero-offset equivalence and persistence.

use dmem::blocks::{DenseBlock, DenseBlockConfig};
use dmem::network::{build_network, ArchConfig, Model, Variant};
use dmem::params::{ParamKind, ParamStore};
use dmem::{Graph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant) -> ArchConfig {
    ArchConfig {
        stages: 2,
        initial_channels: 6,
        growth_rate: 3,
        layers_per_block: 2,
        input_size: (16, 12),
        variant,
        ..ArchConfig::default()
    }
}

fn input(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.kind(id) == ParamKind::Offset {
            continue;
        }
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

#[test]
fn block_channels_grow_by_layers_times_growth() {
    for deformable in [false, true] {
        for num_layers in 1..=4 {
            for growth_rate in [2, 4, 8] {
                let cfg = DenseBlockConfig {
                    num_layers,
                    growth_rate,
                    deformable,
                };
                let mut store = ParamStore::<f64>::new();
                let block = DenseBlock::new(&mut store, "b", 5, cfg).unwrap();
                assert_eq!(block.out_channels(), 5 + num_layers * growth_rate);
                let mut g = Graph::new();
                let p = store.bind(&mut g, false);
                let x = g.constant(input(Shape::new(1, 5, 6, 6), 1));
                let t = block.trace(&mut g, &p, x, None).unwrap();
                assert_eq!(g.shape(t.output), Shape::new(1, 5 + num_layers * growth_rate, 6, 6));
                for (l, &inp) in t.layer_inputs.iter().enumerate() {
                    assert_eq!(g.shape(inp).c, 5 + l * growth_rate);
                }
            }
        }
    }
}

#[test]
fn every_layer_feeds_all_successors() {
    for deformable in [false, true] {
        let cfg = DenseBlockConfig {
            num_layers: 4,
            growth_rate: 3,
            deformable,
        };
        let mut store = ParamStore::<f64>::new();
        let block = DenseBlock::new(&mut store, "b", 2, cfg).unwrap();
        randomize(&mut store, 2);
        let x = input(Shape::new(1, 2, 5, 5), 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x);
        let base = block.trace(&mut g, &p, xv, None).unwrap();
        // Layer m's input holds the block input and every earlier output, in order.
        for m in 0..4 {
            let inp = g.value(base.layer_inputs[m]).clone();
            for l in 0..m {
                let out = g.value(base.layer_outputs[l]);
                for c in 0..3 {
                    assert_eq!(inp.plane(0, 2 + 3 * l + c), out.plane(0, c));
                }
            }
        }
        for l in 0..4 {
            let ablated = block.trace(&mut g, &p, xv, Some(l)).unwrap();
            for m in 0..4 {
                let diff = g.value(ablated.layer_outputs[m]).max_abs_diff(g.value(base.layer_outputs[m]));
                if m < l {
                    assert_eq!(diff, 0.0, "layer {m} must not see layer {l}");
                } else if m > l {
                    assert!(diff > 1e-6, "layer {l} does not reach layer {m} (deformable {deformable})");
                }
            }
        }
    }
}

#[test]
fn logits_have_input_resolution() {
    for v in Variant::ALL {
        let cfg = small(v);
        let model = build_network::<f64>(&cfg, 1).unwrap();
        let out = model.predict_logits(&input(Shape::new(2, 3, 16, 12), 4)).unwrap();
        assert_eq!(out.shape(), Shape::new(2, 4, 16, 12));
    }
    let model = build_network::<f64>(&small(Variant::Plain), 1).unwrap();
    assert!(model.predict_logits(&input(Shape::new(1, 3, 16, 16), 4)).is_err());
}

#[test]
fn zeroed_offsets_match_plain_network() {
    let plain = build_network::<f64>(&small(Variant::Plain), 5).unwrap();
    let x = input(Shape::new(2, 3, 16, 12), 6);
    let want = plain.predict_logits(&x).unwrap();
    for v in [Variant::DeformContract, Variant::DeformExpand] {
        let mut model = build_network::<f64>(&small(v), 99).unwrap();
        let copied = model.copy_shared_from(&plain).unwrap();
        assert_eq!(copied, plain.params.len());
        assert!(model.parameter_count() > plain.parameter_count());
        let got = model.predict_logits(&x).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-9, "{v}");
    }
}

#[test]
fn deformable_variants_differ_once_offsets_move() {
    let plain = build_network::<f64>(&small(Variant::Plain), 5).unwrap();
    let x = input(Shape::new(1, 3, 16, 12), 6);
    let want = plain.predict_logits(&x).unwrap();
    let mut model = build_network::<f64>(&small(Variant::DeformExpand), 5).unwrap();
    model.copy_shared_from(&plain).unwrap();
    let id = model
        .params
        .ids()
        .find(|&id| model.params.name(id).ends_with("offset.bias"))
        .unwrap();
    model.params.get_mut(id).data_mut().fill(0.3);
    assert!(model.predict_logits(&x).unwrap().max_abs_diff(&want) > 1e-6);
}

#[test]
fn initialization_is_seeded() {
    let a = build_network::<f64>(&ArchConfig::default(), 3).unwrap();
    let b = build_network::<f64>(&ArchConfig::default(), 3).unwrap();
    let c = build_network::<f64>(&ArchConfig::default(), 4).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    // Offset predictors start at zero, so every variant starts as a plain network.
    let d = build_network::<f64>(&ArchConfig::default().with_variant(Variant::DeformContract), 3).unwrap();
    for id in d.params.ids() {
        if d.params.kind(id) == ParamKind::Offset {
            assert!(d.params.get(id).data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_network::<f32>(&small(Variant::DeformContract), 8).unwrap();
    let mut extra = dmem::kv::KeyValues::new();
    extra.set("note", "hello");
    model.save(dir.path(), &extra).unwrap();
    let (back, manifest) = Model::<f32>::load(dir.path()).unwrap();
    assert_eq!(back.cfg, model.cfg);
    assert_eq!(back.checksum(), model.checksum());
    assert_eq!(manifest.get("note"), Some("hello"));
    assert_eq!(manifest.get("variant"), Some("deform-contract"));
    // The same weights read at double precision predict the same labels.
    let (wide, _) = Model::<f64>::load(dir.path()).unwrap();
    assert_eq!(wide.checksum(), model.checksum());
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_network::<f64>(&small(Variant::Plain), 8).unwrap();
    model.save(dir.path(), &Default::default()).unwrap();
    std::fs::remove_file(dir.path().join("model.dmem")).unwrap();
    assert!(matches!(Model::<f64>::load(dir.path()), Err(dmem::Error::Io { .. })));
}
