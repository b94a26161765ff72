//! Randomized invariants.

use proptest::prelude::*;

use mambavad::data::rgb_difference;
use mambavad::gradcheck::random_tensor;
use mambavad::graph::Graph;
use mambavad::loss::sparsity_loss;
use mambavad::memory::{cosine_similarity, kept_count, topk_mask, topk_softmax, write_items};
use mambavad::params::{seeded_rng, ParamBuilder, ParamStore};
use mambavad::score::{anomaly_scores, frame_level_auc, minmax_normalize};
use mambavad::ssm::{cross_merge, cross_scan, selective_scan_forward, ScanArgs, Ss2d, SsmConfig};
use mambavad::tensor::Tensor;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

/// Scores with a guaranteed mix of labels.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0f64..100.0, n),
            prop::collection::vec(0u8..2, n - 2).prop_map(|mut v| {
                v.push(0);
                v.push(1);
                v
            }),
        )
    })
}

fn transpose(x: &Tensor<f64>) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[w, h, c], |i| {
        let (r, rest) = (i / (h * c), i % (h * c));
        let (col, ch) = (rest / c, rest % c);
        x.data()[(col * w + r) * c + ch]
    })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn scan_is_causal(l in 2usize..16, d in 1usize..4, n in 1usize..4, cut in 0usize..15, seed in 0u64..1000) {
        let cut = cut % (l - 1);
        let t = |shape: &[usize], s: u64| random_tensor(shape, seed * 7 + s, 1.0);
        let (u, delta) = (t(&[l, d], 1), t(&[l, d], 2).map(|v| v.abs() + 0.01));
        let (a, b, c, ds) = (t(&[d, n], 3).map(|v| -v.abs()), t(&[l, n], 4), t(&[l, n], 5), t(&[d], 6));
        let run = |u: &[f64]| {
            selective_scan_forward(&ScanArgs { u, delta: delta.data(), a: a.data(), b: b.data(), c: c.data(), d_skip: ds.data(), len: l, dim: d, state: n }, false).0
        };
        let base = run(u.data());
        let mut changed = u.data().to_vec();
        for v in &mut changed[(cut + 1) * d..] {
            *v += 5.0;
        }
        let after = run(&changed);
        prop_assert_eq!(&base[..(cut + 1) * d], &after[..(cut + 1) * d]);
    }

    #[test]
    fn cross_merge_inverts_cross_scan_up_to_four(h in 1usize..12, w in 1usize..12, c in 1usize..5, seed in 0u64..1000) {
        let x = random_tensor(&[h, w, c], seed, 10.0);
        let back = cross_merge(&cross_scan(&x).unwrap()).unwrap();
        for (b, v) in back.data().iter().zip(x.data()) {
            prop_assert_eq!(*b, 4.0 * v);
        }
    }

    #[test]
    fn ss2d_commutes_with_transpose(h in 1usize..5, w in 1usize..5, seed in 0u64..500) {
        let cfg = SsmConfig { d_state: 2, ..SsmConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(seed, 0);
        let ss2d = Ss2d::new(&mut ParamBuilder::new(&mut store, &mut rng), 2, &cfg);
        // row-major and column-major directions trade places under transposition
        let swapped = Ss2d { dirs: vec![ss2d.dirs[2].clone(), ss2d.dirs[3].clone(), ss2d.dirs[0].clone(), ss2d.dirs[1].clone()] };
        let x = random_tensor(&[h, w, 2], seed + 1, 1.0);
        let g = Graph::inference(&store);
        let direct = transpose(&ss2d.forward(&g, &g.constant(x.clone())).unwrap().to_tensor());
        let via_t = swapped.forward(&g, &g.constant(transpose(&x))).unwrap();
        for (a, b) in direct.data().iter().zip(via_t.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn read_weights_are_a_sparse_simplex(nq in 1usize..8, n in 1usize..12, c in 1usize..6, k in 1u32..=100, seed in 0u64..1000) {
        let q = random_tensor(&[nq, c], seed, 1.0);
        let m = random_tensor(&[n, c], seed + 1, 1.0);
        let sim = cosine_similarity(&q, &m).unwrap();
        let w = topk_softmax(&sim, k as f64).unwrap();
        let mask = topk_mask(&sim, k as f64).unwrap();
        let keep = kept_count(n, k as f64);
        prop_assert_eq!(keep, ((k as f64) * n as f64 / 100.0 - 1e-9).ceil() as usize);
        for i in 0..nq {
            let row = w.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let kept: Vec<usize> = (0..n).filter(|&j| mask[i * n + j]).collect();
            prop_assert_eq!(kept.len(), keep);
            // every retained similarity is at least every dropped one
            let lo = kept.iter().map(|&j| sim.row(i)[j]).fold(f64::INFINITY, f64::min);
            prop_assert!((0..n).filter(|j| !kept.contains(j)).all(|j| sim.row(i)[j] <= lo));
        }
    }

    #[test]
    fn cosine_argmax_ignores_query_scale(seed in 0u64..1000, alpha in 0.01f64..100.0) {
        let q = random_tensor(&[4, 3], seed, 1.0);
        let m = random_tensor(&[5, 3], seed + 1, 1.0);
        let argmax = |s: &Tensor<f64>, i: usize| (0..5).max_by(|&a, &b| s.row(i)[a].total_cmp(&s.row(i)[b])).unwrap();
        let s1 = cosine_similarity(&q, &m).unwrap();
        let s2 = cosine_similarity(&q.map(|v| v * alpha), &m).unwrap();
        for i in 0..4 {
            prop_assert_eq!(argmax(&s1, i), argmax(&s2, i));
        }
    }

    #[test]
    fn write_ignores_query_order(seed in 0u64..1000, shift in 1usize..6) {
        let q = random_tensor(&[6, 3], seed, 1.0);
        let m = random_tensor(&[4, 3], seed + 1, 1.0);
        let rotated = Tensor::from_fn(&[6, 3], |i| q.data()[(i + 3 * shift) % 18]);
        let a = write_items(&m, &q).unwrap();
        let b = write_items(&m, &rotated).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for j in 0..4 {
            prop_assert!((a.row(j).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sparsity_is_never_positive(nq in 1usize..8, n in 2usize..8, seed in 0u64..1000) {
        let g = Graph::<f64>::standalone(false);
        let q = g.constant(random_tensor(&[nq, 3], seed, 1.0));
        let m = g.constant(random_tensor(&[n, 3], seed + 1, 1.0));
        prop_assert!(sparsity_loss(&g, &q, &m).unwrap().data()[0] <= 0.0);
    }

    #[test]
    fn auc_ignores_monotone_transforms((scores, labels) in scored_labels(), a in 0.01f64..10.0, b in -50.0f64..50.0) {
        let base = frame_level_auc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let mapped: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        prop_assert_eq!(frame_level_auc(&mapped, &labels).unwrap(), base);
        let squashed: Vec<f64> = scores.iter().map(|s| (s / 50.0).tanh() + s.powi(3) * 1e-9).collect();
        prop_assert_eq!(frame_level_auc(&squashed, &labels).unwrap(), base);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((frame_level_auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn minmax_lands_in_unit_interval_and_keeps_order(v in prop::collection::vec(-1e6f64..1e6, 1..50)) {
        let out = minmax_normalize(&v);
        prop_assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(out[i] <= out[j]);
                }
            }
        }
    }

    #[test]
    fn fused_score_absorbs_affine_psnr_and_distance_shifts(
        psnr in prop::collection::vec(10.0f64..40.0, 3..30),
        a in 0.1f64..10.0,
        b in -20.0f64..20.0,
        shift in -5.0f64..5.0,
        tau in 0.0f64..=1.0,
    ) {
        let n = psnr.len();
        let dists: Vec<Vec<f64>> = (0..4).map(|l| (0..n).map(|i| ((i * 7 + l * 3) % 11) as f64 * 0.1).collect()).collect();
        let base = anomaly_scores(&psnr, &dists, tau).unwrap();
        let psnr2: Vec<f64> = psnr.iter().map(|p| a * p + b).collect();
        let dists2: Vec<Vec<f64>> = dists.iter().map(|d| d.iter().map(|v| v + shift).collect()).collect();
        let moved = anomaly_scores(&psnr2, &dists2, tau).unwrap();
        for (x, y) in base.iter().zip(&moved) {
            prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
            prop_assert!((0.0..=1.0 + 1e-12).contains(x));
        }
    }

    #[test]
    fn reversed_frames_negate_differences(k in 2usize..6, seed in 0u64..1000) {
        let frames: Vec<Tensor<f32>> = (0..k).map(|i| random_tensor(&[3, 3, 3], seed + i as u64, 1.0).cast()).collect();
        let mut rev = frames.clone();
        rev.reverse();
        let fwd = rgb_difference(&frames).unwrap();
        let bwd = rgb_difference(&rev).unwrap();
        for (f, b) in fwd.iter().zip(bwd.iter().rev()) {
            for (x, y) in f.data().iter().zip(b.data()) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }
}
