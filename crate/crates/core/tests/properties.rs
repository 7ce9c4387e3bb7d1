use atas_core::adaptive::{
    ema_update, inverse_transform_perturbation, resize_bilinear, step_size, transform_perturbation, AdaptiveConfig,
    StateTable, StorageSide,
};
use atas_core::attacks::{project_box, sign_step, within_budget};
use atas_core::autodiff::{grad_check, Bindings, Graph};
use atas_core::data::{apply_aug, parse_idx, write_idx_images, AugRecord};
use atas_core::diagnostics::{decile_subset, grad_norm_profile, CoDetector, SubsetSpec};
use atas_core::saddle::{bilinear_family, gradient_norm_ratio, quadratic_family, BilinearSpec, QuadraticSpec};
use atas_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn two_layer_network_gradients_match_differences(
        n in 1usize..4, d in 1usize..5, h in 1usize..5, k in 2usize..5, seed in any::<u64>()
    ) {
        let mut g = Graph::new();
        let x = g.input(&[n, d]).unwrap();
        let w1 = g.param(&[d, h]).unwrap();
        let b1 = g.param(&[h]).unwrap();
        let w2 = g.param(&[h, k]).unwrap();
        let z1 = g.matmul(x, w1).unwrap();
        let z1 = g.add_bias(z1, b1).unwrap();
        let a1 = g.relu(z1).unwrap();
        let z2 = g.matmul(a1, w2).unwrap();
        let mut t = Tensor::zeros(&[n, k]);
        for i in 0..n {
            t.row_mut(i)[i % k] = 1.0;
        }
        let target = g.constant(t).unwrap();
        let loss = g.softmax_xent(z2, target).unwrap();
        g.set_loss(loss).unwrap();
        let mut b = Bindings::new();
        b.insert(x, tensor(vec![n, d], seed, 1.0));
        b.insert(w1, tensor(vec![d, h], seed ^ 1, 1.0));
        // Biases well away from zero keep every pre-activation off the kink.
        b.insert(b1, Tensor::full(&[h], 3.0));
        b.insert(w2, tensor(vec![h, k], seed ^ 2, 1.0));
        prop_assert!(grad_check(&g, &b, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn resize_reproduces_affine_fields(
        c in 1usize..3, h in 2usize..20, w in 2usize..20, s in 2usize..10,
        a in -1.0f64..1.0, b in -1.0f64..1.0, k in -1.0f64..1.0
    ) {
        let data: Vec<f64> = (0..c * h * w)
            .map(|idx| {
                let (i, j) = ((idx / w) % h, idx % w);
                k + a * i as f64 / h as f64 + b * j as f64 / w as f64
            })
            .collect();
        let field = Tensor::new(vec![c, h, w], data).unwrap();
        let small = resize_bilinear(&field, (s, s)).unwrap();
        let back = resize_bilinear(&small, (h, w)).unwrap();
        prop_assert!(max_diff(&back, &field) < 1e-10);
    }

    #[test]
    fn resize_round_trip_is_idempotent(h in 2usize..16, w in 2usize..16, s in 2usize..8, seed in any::<u64>()) {
        let delta = tensor(vec![1, h, w], seed, 0.3);
        let round = |t: &Tensor| resize_bilinear(&resize_bilinear(t, (s, s)).unwrap(), (h, w)).unwrap();
        let once = round(&delta);
        prop_assert!(max_diff(&round(&once), &once) < 1e-10);
    }

    #[test]
    fn ema_stays_between_its_inputs(v in 0.0f64..10.0, g in 0.0f64..10.0, beta in 0.0f64..=1.0) {
        let out = ema_update(v, g, beta).unwrap();
        prop_assert!(out >= v.min(g) - 1e-12 && out <= v.max(g) + 1e-12);
    }

    #[test]
    fn step_size_decreases_in_v(v1 in 0.0f64..10.0, dv in 0.0f64..10.0, gamma in 0.0f64..1.0, c in 1e-4f64..1.0) {
        let a = step_size(v1, gamma, c).unwrap();
        let b = step_size(v1 + dv, gamma, c).unwrap();
        prop_assert!(b <= a);
        prop_assert!(a <= gamma / c + 1e-15);
    }

    #[test]
    fn projection_is_feasible_and_idempotent(seed in any::<u64>(), eps in 0.0f64..0.5, alpha in 0.0f64..1.0) {
        let x = tensor(vec![2, 6], seed, 0.5).map(|v| v + 0.5);
        let g = tensor(vec![2, 6], seed ^ 7, 1.0);
        let stepped = sign_step(&x, &g, alpha).unwrap();
        let p = project_box(&stepped, &x, eps, 0.0, 1.0).unwrap();
        prop_assert!(within_budget(&p, &x, eps, 0.0, 1.0));
        prop_assert_eq!(project_box(&p, &x, eps, 0.0, 1.0).unwrap(), p);
    }

    #[test]
    fn ratio_is_scale_invariant_and_at_least_the_floor(
        g in prop::collection::vec(0.01f64..100.0, 1..20), scale in 0.01f64..100.0, beta in 0.0f64..0.99
    ) {
        let r = gradient_norm_ratio(&g, beta).unwrap();
        let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
        prop_assert!((gradient_norm_ratio(&scaled, beta).unwrap() - r).abs() < 1e-9 * r);
        prop_assert!(r >= (1.0 - beta).powf(-0.25) * (1.0 - 1e-12));
    }

    #[test]
    fn ranks_survive_monotone_rescaling(norms in prop::collection::vec(0.0f64..10.0, 1..50)) {
        let p = grad_norm_profile(&[norms.clone()]).unwrap();
        let q = grad_norm_profile(&[norms.iter().map(|v| (3.0 * v + 1.0).ln()).collect()]).unwrap();
        prop_assert_eq!(p.rank, q.rank);
    }

    #[test]
    fn deciles_partition_the_ids(norms in prop::collection::vec(0.0f64..10.0, 1..120)) {
        let n = norms.len();
        let p = grad_norm_profile(&[norms]).unwrap();
        let mut seen = vec![0usize; n];
        for d in 1..=10 {
            let ids = decile_subset(&p, SubsetSpec::new(d, d).unwrap()).unwrap();
            prop_assert!((ids.len() as f64 - n as f64 / 10.0).abs() <= 1.0);
            for id in ids {
                seen[id] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn co_detection_is_translation_covariant(
        pgd in prop::collection::vec(0.0f64..1.0, 2..15), fgsm in prop::collection::vec(0.0f64..1.0, 2..15),
        shift in 0usize..100
    ) {
        let n = pgd.len().min(fgsm.len());
        let det = CoDetector::default();
        let epochs: Vec<usize> = (0..n).collect();
        let shifted: Vec<usize> = epochs.iter().map(|e| e + shift).collect();
        let a = det.detect_series(&epochs, &pgd[..n], &fgsm[..n]).unwrap();
        let b = det.detect_series(&shifted, &pgd[..n], &fgsm[..n]).unwrap();
        prop_assert_eq!(a.map(|e| e.epoch + shift), b.map(|e| e.epoch));
    }

    #[test]
    fn augmentation_round_trips_the_visible_region(
        dy in 0usize..5, dx in 0usize..5, flip in any::<bool>(), seed in any::<u64>()
    ) {
        let rec = AugRecord { flip, dy, dx, pad: 2 };
        let delta = tensor(vec![1, 6, 6], seed, 0.3);
        let there = transform_perturbation(&delta, &rec).unwrap();
        let back = inverse_transform_perturbation(&there, &rec).unwrap();
        let again = transform_perturbation(&back, &rec).unwrap();
        prop_assert!(max_diff(&again, &there) < 1e-15);
        let img = apply_aug(delta.data(), &[1, 6, 6], &rec).unwrap();
        prop_assert_eq!(img.as_slice(), there.data());
    }

    #[test]
    fn idx_images_round_trip(n in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes: Vec<f64> = (0..n * h * w).map(|_| rng.random_range(0..=255u8) as f64 / 255.0).collect();
        let images = Tensor::new(vec![n, h, w], bytes).unwrap();
        let parsed = parse_idx(&write_idx_images(&images).unwrap()).unwrap();
        prop_assert!(max_diff(&parsed, &images) < 1e-12);
    }

    #[test]
    fn state_snapshots_round_trip(seed in any::<u64>(), side in prop::option::of(2usize..6)) {
        let cfg = AdaptiveConfig {
            storage_side: side.map_or(StorageSide::Full, StorageSide::Side),
            ..AdaptiveConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = StateTable::new(cfg, 5, &[1, 7, 7]).unwrap();
        table.init_uniform(0.2, &mut rng).unwrap();
        for id in 0..5 {
            table.update_v(id, rng.random_range(0.0..4.0)).unwrap();
            let loaded = table.load(id, 0.2).unwrap();
            prop_assert!(loaded.norm_linf() <= 0.2 + 1e-12);
        }
        let mut copy = StateTable::new(cfg, 5, &[1, 7, 7]).unwrap();
        copy.load_bytes(&table.to_bytes()).unwrap();
        prop_assert_eq!(copy.to_bytes(), table.to_bytes());
        for id in 0..5 {
            prop_assert_eq!(copy.get(id).unwrap(), table.get(id).unwrap());
        }
    }

    #[test]
    fn saddle_oracles_bracket_the_objective(seed in any::<u64>(), quadratic in any::<bool>()) {
        let problem = if quadratic {
            quadratic_family(&QuadraticSpec { n: 6, d: 3, seed, ..QuadraticSpec::default() }).unwrap()
        } else {
            bilinear_family(&BilinearSpec { n: 6, d: 3, p: 4, seed, ..BilinearSpec::default() }).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
        let mut theta: Vec<f64> = (0..problem.p).map(|_| rng.random_range(-1.0..1.0)).collect();
        problem.project_theta(&mut theta);
        let x: Vec<f64> = problem.x0.iter().map(|c| c + problem.epsilon * rng.random_range(-1.0..1.0)).collect();
        let here = problem.phi(&theta, &x);
        let (_, max) = problem.inner_max(&theta);
        let (_, min) = problem.inner_min(&x);
        prop_assert!(max >= here - 1e-12);
        prop_assert!(min <= here + 1e-12);
        prop_assert!((problem.max_value(&theta) - max).abs() < 1e-12);
    }
}
