//! Invariants checked over generated inputs.

use dmem::autograd::softmax_channels;
use dmem::data::{encode_labels, normalize, resize_bilinear, resize_nearest, raw, RawMask};
use dmem::ensemble::{argmax_labels, fuse_nuclei, majority_vote, majority_vote_counts};
use dmem::mask::class;
use dmem::metrics::{fscore, precision, recall, zsi};
use dmem::{BinaryMask, Graph, LabelMask, Shape, Tensor};
use proptest::prelude::*;

fn binary_mask(len: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), len)
}

fn label_mask(len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, len)
}

fn logits(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, len)
}

fn prob_map(values: Vec<f64>) -> Tensor<f64> {
    softmax_channels(&Tensor::from_vec(Shape::new(1, 4, 3, 3), values).unwrap())
}

proptest! {
    #[test]
    fn zsi_is_symmetric(a in binary_mask(36), b in binary_mask(36)) {
        let (a, b) = (BinaryMask::new(6, 6, a).unwrap(), BinaryMask::new(6, 6, b).unwrap());
        prop_assert_eq!(zsi(&a, &b).unwrap(), zsi(&b, &a).unwrap());
    }

    #[test]
    fn zsi_equals_fscore(a in binary_mask(36), b in binary_mask(36)) {
        let (a, b) = (BinaryMask::new(6, 6, a).unwrap(), BinaryMask::new(6, 6, b).unwrap());
        let z = zsi(&a, &b).unwrap();
        prop_assert!((z - fscore(&a, &b).unwrap()).abs() < 1e-12);
        let (p, r) = (precision(&a, &b).unwrap(), recall(&a, &b).unwrap());
        if p + r > 0.0 {
            prop_assert!((z - 2.0 * p * r / (p + r)).abs() < 1e-12);
        }
        prop_assert!((0.0..=1.0).contains(&z));
    }

    #[test]
    fn adding_true_positive_never_lowers_zsi(a in binary_mask(36), b in binary_mask(36), i in 0usize..36) {
        let gt = BinaryMask::new(6, 6, b.clone()).unwrap();
        let before = zsi(&BinaryMask::new(6, 6, a.clone()).unwrap(), &gt).unwrap();
        if b[i] {
            let mut a2 = a;
            a2[i] = true;
            let after = zsi(&BinaryMask::new(6, 6, a2).unwrap(), &gt).unwrap();
            prop_assert!(after >= before);
        }
    }

    #[test]
    fn vote_ignores_path_order(a in logits(36), b in logits(36), c in logits(36)) {
        let (a, b, c) = (prob_map(a), prob_map(b), prob_map(c));
        let base = majority_vote([&a, &b, &c]).unwrap();
        for perm in [[&a, &c, &b], [&b, &a, &c], [&b, &c, &a], [&c, &a, &b], [&c, &b, &a]] {
            prop_assert_eq!(&majority_vote(perm).unwrap(), &base);
        }
        let counts = majority_vote_counts([&a, &b, &c]).unwrap().counts;
        prop_assert!(counts.iter().all(|n| n.iter().sum::<u8>() == 3));
    }

    #[test]
    fn positive_logit_scaling_keeps_votes(a in logits(36), s in 0.05f64..20.0) {
        let t = Tensor::from_vec(Shape::new(1, 4, 3, 3), a).unwrap();
        let scaled = t.map(|v| v * s);
        prop_assert_eq!(
            argmax_labels(&softmax_channels(&t)).unwrap(),
            argmax_labels(&softmax_channels(&scaled)).unwrap()
        );
    }

    #[test]
    fn fusion_is_monotone(m in label_mask(25), extra in prop::collection::vec((0usize..25, 2u8..4), 0..10)) {
        let before = LabelMask::new(5, 5, m.clone()).unwrap();
        let mut grown = m;
        for (i, v) in extra {
            grown[i] = v;
        }
        let (f0, f1) = (fuse_nuclei(&before), fuse_nuclei(&LabelMask::new(5, 5, grown).unwrap()));
        prop_assert!(f0.data().iter().zip(f1.data()).all(|(a, b)| !*a || *b));
    }

    #[test]
    fn normalize_standardizes_and_is_idempotent(v in prop::collection::vec(-50.0f64..50.0, 2 * 3 * 16)) {
        let t = Tensor::from_vec(Shape::new(2, 3, 4, 4), v).unwrap();
        let once = normalize(&t);
        for n in 0..2 {
            let item = once.item(n);
            let mean = item.iter().sum::<f64>() / item.len() as f64;
            let var = item.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / item.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var == 0.0 || (var - 1.0).abs() < 1e-6);
        }
        prop_assert!(normalize(&once).max_abs_diff(&once) < 1e-9);
    }

    #[test]
    fn encoding_keeps_nucleus_pixels(v in prop::collection::vec(0usize..4, 64), t in 1usize..10) {
        let palette = [raw::BACKGROUND, raw::CYTOPLASM, raw::NUCLEUS, raw::UNKNOWN];
        let data: Vec<u8> = v.iter().map(|&i| palette[i]).collect();
        let enc = encode_labels(&RawMask::new(8, 8, data.clone()).unwrap(), t).unwrap();
        for (r, e) in data.iter().zip(enc.data()) {
            let nucleus = *e == class::NORMAL_NUCLEUS || *e == class::ABNORMAL_NUCLEUS;
            prop_assert_eq!(*r == raw::NUCLEUS, nucleus);
            prop_assert!(*e < 4);
        }
    }

    #[test]
    fn resizing_stays_in_range(
        m in label_mask(20),
        v in prop::collection::vec(0.0f64..1.0, 20),
        h in 1usize..12,
        w in 1usize..12,
    ) {
        let mask = LabelMask::new(4, 5, m.clone()).unwrap();
        let r = resize_nearest(&mask, h, w).unwrap();
        prop_assert!(r.data().iter().all(|x| m.contains(x)));
        let img = Tensor::from_vec(Shape::new(1, 1, 4, 5), v.clone()).unwrap();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = resize_bilinear(&img, h, w).unwrap();
        prop_assert!(out.data().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
    }

    #[test]
    fn zero_offsets_reduce_to_convolution(
        c in 1usize..4,
        o in 1usize..4,
        h in 3usize..7,
        w in 3usize..7,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |s: Shape| Tensor::from_fn(s, |_, _, _, _| rng.random_range(-1.0..1.0));
        let x = rand_t(Shape::new(1, c, h, w));
        let k = rand_t(Shape::new(o, c, 3, 3));
        let b = rand_t(Shape::bias(o));
        let mut g = Graph::<f64>::new();
        let (xv, kv, bv) = (g.constant(x), g.constant(k), g.constant(b));
        let off = g.constant(Tensor::zeros(Shape::new(1, 18, h, w)));
        let d = g.deformable_conv2d(xv, kv, Some(bv), off, 1).unwrap();
        let r = g.conv2d(xv, kv, Some(bv), 1, 1).unwrap();
        prop_assert!(g.value(d).max_abs_diff(g.value(r)) < 1e-12);
    }
}
