//! Optimized kernels against brute-force references on many small
//! random instances.

mod support;

use dmem::data::{components, encode_labels, raw, RawMask};
use dmem::ensemble::{majority_vote, vote_pixel};
use dmem::metrics::{aggregate, fscore, precision, recall, zsi, Confusion, MetricsRow};
use dmem::{BinaryMask, Graph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use support::random_tensor;

const CASES: usize = 1000;

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..CASES {
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2 + 1);
        let shape = Shape::new(
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(k..=7),
            rng.random_range(k..=7),
        );
        let x = random_tensor(&mut rng, shape, 1.0);
        let cout = rng.random_range(1..=3);
        let w = random_tensor(&mut rng, Shape::new(cout, shape.c, k, k), 1.0);
        let b = random_tensor(&mut rng, Shape::bias(w.shape().n), 1.0);
        let with_bias = rng.random_bool(0.5);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, with_bias.then_some(bv), stride, pad).unwrap();
        let want = support::conv2d(&x, &w, with_bias.then_some(&b), stride, pad);
        assert_eq!(g.shape(y), want.shape());
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv_transpose2d_matches_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..CASES {
        let k = [1, 2, 3][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..k);
        let output_pad = rng.random_range(0..stride);
        let shape = Shape::new(1, rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=5));
        let x = random_tensor(&mut rng, shape, 1.0);
        let cout = rng.random_range(1..=3);
        let w = random_tensor(&mut rng, Shape::new(shape.c, cout, k, k), 1.0);
        let b = random_tensor(&mut rng, Shape::bias(w.shape().c), 1.0);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let Ok(y) = g.conv_transpose2d(xv, wv, Some(bv), stride, pad, output_pad) else {
            continue;
        };
        let want = support::conv_transpose2d(&x, &w, Some(&b), stride, pad, output_pad);
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn bilinear_sample_matches_tent_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..CASES {
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let x = random_tensor(&mut rng, Shape::new(1, 2, h, w), 1.0);
        let pos = Tensor::from_fn(Shape::new(1, 2, 2, 3), |_, c, _, _| {
            let extent = if c == 0 { h } else { w } as f64;
            rng.random_range(-1.5..extent + 0.5)
        });
        let mut g = Graph::new();
        let (xv, pv) = (g.constant(x.clone()), g.constant(pos.clone()));
        let y = g.bilinear_sample(xv, pv).unwrap();
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..3 {
                    let (py, px) = (pos.at(0, 0, i, j), pos.at(0, 1, i, j));
                    let want = support::bilinear(x.plane(0, c), h, w, py, px);
                    assert!((g.value(y).at(0, c, i, j) - want).abs() < 1e-12);
                    let free = dmem::deform::bilinear_sample(x.plane(0, c), h, w, py, px).unwrap();
                    assert!((free - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn deformable_conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..CASES {
        let k = [1, 3][rng.random_range(0..2)];
        let pad = rng.random_range(0..=k / 2);
        let shape = Shape::new(
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(k..=6),
            rng.random_range(k..=6),
        );
        let (oh, ow) = (shape.h + 2 * pad - k + 1, shape.w + 2 * pad - k + 1);
        let x = random_tensor(&mut rng, shape, 1.0);
        let cout = rng.random_range(1..=3);
        let w = random_tensor(&mut rng, Shape::new(cout, shape.c, k, k), 1.0);
        let b = random_tensor(&mut rng, Shape::bias(w.shape().n), 1.0);
        let off = random_tensor(&mut rng, Shape::new(shape.n, 2 * k * k, oh, ow), 2.5);
        let mut g = Graph::new();
        let vars = [&x, &w, &b, &off].map(|t| g.constant(t.clone()));
        let y = g.deformable_conv2d(vars[0], vars[1], Some(vars[2]), vars[3], pad).unwrap();
        let want = support::deform_conv2d(&x, &w, Some(&b), &off, pad);
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }
}

fn random_probs(rng: &mut ChaCha8Rng) -> [f64; 4] {
    // Coarse values make argmax ties and mean ties reachable.
    let raw: [f64; 4] = std::array::from_fn(|_| rng.random_range(0..5) as f64 + 0.01);
    let s: f64 = raw.iter().sum();
    raw.map(|v| v / s)
}

#[test]
fn vote_matches_pattern_enumeration() {
    let table = support::vote_table();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..CASES {
        let p: [[f64; 4]; 3] = std::array::from_fn(|_| random_probs(&mut rng));
        assert_eq!(vote_pixel(&p).0, support::vote(&table, &p), "{p:?}");
    }
    // Every one of the 64 vote patterns, realized with one-hot-ish maps.
    for pattern in 0..64 {
        let votes = [pattern / 16, (pattern / 4) % 4, pattern % 4];
        let p: [[f64; 4]; 3] = votes.map(|v| std::array::from_fn(|c| if c == v { 0.7 } else { 0.1 }));
        assert_eq!(vote_pixel(&p).0, support::vote(&table, &p));
    }
}

#[test]
fn majority_vote_maps_match_pixelwise_reference() {
    let table = support::vote_table();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let maps: Vec<Tensor<f64>> = (0..3)
            .map(|_| {
                let mut t = Tensor::zeros(Shape::new(1, 4, 3, 4));
                for i in 0..12 {
                    let p = random_probs(&mut rng);
                    for (c, v) in p.iter().enumerate() {
                        t.data_mut()[c * 12 + i] = *v;
                    }
                }
                t
            })
            .collect();
        let got = majority_vote([&maps[0], &maps[1], &maps[2]]).unwrap();
        for i in 0..12 {
            let p: [[f64; 4]; 3] = std::array::from_fn(|m| std::array::from_fn(|c| maps[m].data()[c * 12 + i]));
            assert_eq!(got.data()[i], support::vote(&table, &p));
        }
    }
}

#[test]
fn metrics_match_pixel_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..CASES {
        let density = rng.random_range(0.0..1.0);
        let mut mask = || -> Vec<bool> { (0..256).map(|_| rng.random_bool(density)).collect() };
        let (p, t) = (mask(), mask());
        let (tp, fp, fn_) = support::tally(&p, &t);
        let pred = BinaryMask::new(16, 16, p).unwrap();
        let gt = BinaryMask::new(16, 16, t).unwrap();
        let c = Confusion::tally(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (tp, fp, fn_));
        let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        if tp + fp + fn_ == 0.0 {
            assert_eq!(zsi(&pred, &gt).unwrap(), 1.0);
            continue;
        }
        assert!(close(zsi(&pred, &gt).unwrap(), 2.0 * tp / (2.0 * tp + fp + fn_)));
        let want_p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let want_r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        assert!(close(precision(&pred, &gt).unwrap(), want_p));
        assert!(close(recall(&pred, &gt).unwrap(), want_r));
        let want_f = if want_p + want_r > 0.0 {
            2.0 * want_p * want_r / (want_p + want_r)
        } else {
            0.0
        };
        assert!(close(fscore(&pred, &gt).unwrap(), want_f));
    }
}

#[test]
fn aggregate_matches_two_pass_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<MetricsRow> = (0..100)
        .map(|i| {
            let z = rng.random_range(0.0..1.0);
            MetricsRow {
                id: format!("r{i}"),
                zsi: z,
                precision: rng.random_range(0.0..1.0),
                recall: rng.random_range(0.0..1.0),
                fscore: z,
            }
        })
        .collect();
    let columns: [Vec<f64>; 4] = [
        rows.iter().map(|r| r.zsi).collect(),
        rows.iter().map(|r| r.precision).collect(),
        rows.iter().map(|r| r.recall).collect(),
        rows.iter().map(|r| r.fscore).collect(),
    ];
    let report = aggregate(rows).unwrap();
    for (col, s) in columns.iter().zip(&report.summary) {
        let (m, sd) = support::mean_std(col);
        assert!((s.mean - m).abs() < 1e-12);
        assert!((s.std - sd).abs() < 1e-12);
    }
}

#[test]
fn nucleus_components_match_union_find() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..CASES {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let data: Vec<u8> = (0..h * w)
            .map(|_| [raw::BACKGROUND, raw::CYTOPLASM, raw::NUCLEUS, raw::NUCLEUS, raw::UNKNOWN][rng.random_range(0..5)])
            .collect();
        let member: Vec<bool> = data.iter().map(|&v| v == raw::NUCLEUS).collect();
        let want = support::component_areas(h, w, &member);
        let mut got: Vec<usize> = components(h, w, |i| member[i]).iter().map(|c| c.area()).collect();
        got.sort_unstable();
        assert_eq!(got, want);

        let threshold = rng.random_range(1..=6);
        let enc = encode_labels(&RawMask::new(h, w, data).unwrap(), threshold).unwrap();
        let small = want.iter().filter(|&&a| a < threshold).sum::<usize>();
        let large = want.iter().filter(|&&a| a >= threshold).sum::<usize>();
        let hist = enc.histogram();
        assert_eq!((hist[2], hist[3]), (large, small));
    }
}
