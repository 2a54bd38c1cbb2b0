mod common;

use hpff::analysis::{linear_cka, linear_probe, FeatureMatrix, ProbeConfig};
use hpff::checkpoint::{Checkpoint, CheckpointHeader, Entry};
use hpff::data::{subset_indices, synthetic, Split};
use hpff::nn::{build_preset, AuxHeadSpec};
use hpff::optim::{cosine_lr, CosineSchedule};
use hpff::partition::{balanced_sizes, Partition};
use hpff::pff::{assemble_patches, split_patches};
use hpff::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    FeatureMatrix::new(0, "p", rows, cols, common::uniform(rows * cols, seed)).unwrap()
}

/// Right-multiplies by a product of random Givens rotations and scales by `c`.
fn rotate_scale(x: &FeatureMatrix, c: f64, seed: u64) -> FeatureMatrix {
    let mut v = x.values.clone();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..3 * x.cols {
        let (i, j) = (r.gen_range(0..x.cols), r.gen_range(0..x.cols));
        if i == j {
            continue;
        }
        let t: f64 = r.gen_range(0.0..std::f64::consts::TAU);
        for row in 0..x.rows {
            let (a, b) = (v[row * x.cols + i], v[row * x.cols + j]);
            v[row * x.cols + i] = t.cos() * a - t.sin() * b;
            v[row * x.cols + j] = t.sin() * a + t.cos() * b;
        }
    }
    v.iter_mut().for_each(|e| *e *= c);
    FeatureMatrix::new(0, "q", x.rows, x.cols, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cka_is_symmetric_and_bounded(rows in 3usize..30, cx in 1usize..6, cy in 1usize..6, seed in 0u64..1000) {
        let x = matrix(rows, cx, seed);
        let y = matrix(rows, cy, seed + 7);
        let a = linear_cka(&x, &y).unwrap();
        let b = linear_cka(&y, &x).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn cka_is_invariant_to_rotation_and_scale(rows in 3usize..30, cols in 1usize..6, c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0], seed in 0u64..1000) {
        let x = matrix(rows, cols, seed);
        prop_assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-8);
        let y = rotate_scale(&x, c, seed);
        prop_assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn patches_reassemble_exactly(h in 1usize..12, w in 1usize..12, n in 1usize..4, seed in 0u64..100) {
        let x = Tensor::new(common::uniform(2 * h * w, seed), [1, 2, h, w]).unwrap();
        match split_patches(&x, n) {
            Ok(p) => {
                prop_assert_eq!(p.len(), n * n);
                let back = assemble_patches(&p, n, h, w).unwrap();
                prop_assert_eq!(back.data(), x.data());
            }
            Err(_) => prop_assert!((n - 1) * h.div_ceil(n) >= h || (n - 1) * w.div_ceil(n) >= w),
        }
    }

    #[test]
    fn cosine_schedule_never_increases(lr_max in 0.001f64..1.0, frac in 0.0f64..1.0, total in 1usize..60) {
        let s = CosineSchedule { lr_max, lr_min: lr_max * frac, total_epochs: total };
        let lrs: Vec<f64> = (0..total).map(|e| cosine_lr(&s, e).unwrap()).collect();
        prop_assert!((lrs[0] - lr_max).abs() < 1e-12);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn balanced_split_covers_every_unit(units in 1usize..40, k in 1usize..10) {
        prop_assume!(k <= units);
        let s = balanced_sizes(units, k);
        prop_assert_eq!(s.iter().sum::<usize>(), units);
        prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
    }

    #[test]
    fn stratified_subsets_are_sorted_unique_and_sized(n in 1usize..200, seed in 0u64..50) {
        let ds = synthetic(Split::Train, 200, 3).unwrap();
        let idx = subset_indices(&ds, n, seed).unwrap();
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(&idx, &subset_indices(&ds, n, seed).unwrap());
        let full = ds.class_counts();
        let picked = ds.select(&idx).unwrap().class_counts();
        for c in 0..10 {
            let share = full[c] as f64 * n as f64 / ds.len() as f64;
            prop_assert!((picked[c] as f64 - share).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(values in prop::collection::vec(-1e6f32..1e6, 1..50), epoch in 0usize..1000) {
        let ck = Checkpoint {
            header: CheckpointHeader {
                arch: "mlp-4".into(),
                input_shape: vec![1, 28, 28],
                num_classes: 10,
                method: "local".into(),
                modules: 2,
                config_hash: "h".into(),
                epoch,
            },
            entries: vec![Entry { name: "w".into(), shape: vec![values.len()], values }],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, ck);
    }
}

#[test]
fn cascade_groups_follow_the_window_rule() {
    for k in 1..=8 {
        let m = build_preset::<f32>("miniresnet-8", &[3, 8, 8], 10, 0).unwrap();
        let p = Partition::new(m, k, (k >= 2).then_some(2), &AuxHeadSpec::default(), 0).unwrap();
        assert_eq!(p.groups.len(), k.saturating_sub(2), "K = {k}");
        for j in 1..k {
            let covering = p.groups.iter().filter(|g| g.members.contains(&j)).count();
            let expected = if k < 3 {
                0
            } else if j == 1 || j == k - 1 {
                1
            } else {
                2
            };
            assert_eq!(covering, expected, "K = {k}, module {j}");
        }
    }
}

#[test]
fn shuffled_label_probe_is_at_chance() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut make = |n: usize| {
        let v: Vec<f64> = (0..n * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..10)).collect();
        (FeatureMatrix::new(0, "s", n, 16, v).unwrap(), y)
    };
    let (tr, ytr) = make(1000);
    let (te, yte) = make(1000);
    let cfg = ProbeConfig::default();
    let a = linear_probe(&tr, &ytr, &te, &yte, &cfg).unwrap();
    assert!((a.test_accuracy - 0.1).abs() <= 0.05, "{}", a.test_accuracy);
    assert_eq!(a, linear_probe(&tr, &ytr, &te, &yte, &cfg).unwrap());
}
