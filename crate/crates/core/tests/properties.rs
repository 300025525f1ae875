use convlower::batching::{execute_partitioned, footprint, plan_partitions};
use convlower::cost::{CostModel, CostWeights};
use convlower::gemm::{multiply, multiply_reference, GemmConfig, Mat};
use convlower::lowering::{lift_counted, lower, LoweringStrategy};
use convlower::scheduler::{
    heuristic_gap, makespan_curve, optimal_split_sweep, proportional_split, simulate_makespan,
    DeviceProfile, SplitPlan,
};
use convlower::tensor::{direct_convolve, direct_convolve_batch, max_relative_error};
use convlower::{convolve_lowered, DataBatch, KernelBank, LayerConfig, Tensor3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALL: [LoweringStrategy; 3] = LoweringStrategy::ALL;

/// Small layers, seed.
fn small_layer() -> impl Strategy<Value = (LayerConfig, u64)> {
    (1usize..=5, 0usize..=6, 1usize..=6, 1usize..=5, 1usize..=3, any::<u64>()).prop_map(
        |(k, extra, d, o, b, seed)| (LayerConfig::new(k + extra, k, d, o, b).unwrap(), seed),
    )
}

fn problem(layer: &LayerConfig, seed: u64) -> (DataBatch, KernelBank) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        DataBatch::random(layer.b, layer.n, layer.d, &mut rng),
        KernelBank::random(layer.k, layer.d, layer.o, &mut rng),
    )
}

fn device(name: &str, flops: f64, overhead: f64) -> DeviceProfile {
    DeviceProfile::new(name, flops, overhead).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_the_data_scales_the_output((layer, seed) in small_layer(), e in -3i32..=3) {
        let (batch, bank) = problem(&layer, seed);
        let alpha = 2f32.powi(e);
        let d = &batch.members()[0];
        let r = direct_convolve(d, bank.kernel(0)).unwrap();
        let rs = direct_convolve(&d.scaled(alpha), bank.kernel(0)).unwrap();
        for (a, b) in r.values.iter().zip(&rs.values) {
            prop_assert_eq!(a * alpha, *b);
        }
    }

    #[test]
    fn kernel_additivity((layer, seed) in small_layer()) {
        let (batch, k1) = problem(&layer, seed);
        let (_, k2) = problem(&layer, seed ^ 0x5555);
        let sum = direct_convolve_batch(&batch, &k1.add(&k2).unwrap()).unwrap();
        let a = direct_convolve_batch(&batch, &k1).unwrap();
        let b = direct_convolve_batch(&batch, &k2).unwrap();
        let parts: Vec<f32> = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
        prop_assert!(max_relative_error(sum.values(), &parts) <= 1e-5);
    }

    #[test]
    fn embedding_shifts_the_interior((layer, seed) in small_layer(), dr in 0usize..3, dc in 0usize..3, pad in 0usize..3) {
        let (batch, bank) = problem(&layer, seed);
        let d = &batch.members()[0];
        let big_n = layer.n + dr.max(dc) + pad;
        let mut big = Tensor3::zeros(big_n, layer.d);
        for r in 0..layer.n {
            for c in 0..layer.n {
                for i in 0..layer.d {
                    big.set(r + dr, c + dc, i, d.get(r, c, i));
                }
            }
        }
        let small = direct_convolve(d, bank.kernel(0)).unwrap();
        let shifted = direct_convolve(&big, bank.kernel(0)).unwrap();
        for r in 0..layer.m() {
            for c in 0..layer.m() {
                prop_assert_eq!(small.get(r, c), shifted.get(r + dr, c + dc));
            }
        }
    }

    #[test]
    fn batch_is_the_independent_convolutions((layer, seed) in small_layer()) {
        let (batch, bank) = problem(&layer, seed);
        let out = direct_convolve_batch(&batch, &bank).unwrap();
        for (i, d) in batch.members().iter().enumerate() {
            for j in 0..layer.o {
                let single = direct_convolve(d, bank.kernel(j)).unwrap();
                prop_assert_eq!(out.plane(i, j), &single.values[..]);
            }
        }
    }

    #[test]
    fn every_lowering_commutes_with_direct_convolution((layer, seed) in small_layer()) {
        let (batch, bank) = problem(&layer, seed);
        let oracle = direct_convolve_batch(&batch, &bank).unwrap();
        let mut maxima = Vec::new();
        for s in ALL {
            let (out, _) = convolve_lowered(&batch, &bank, s, 1).unwrap();
            prop_assert!(out.max_relative_error(&oracle) <= 1e-5, "{} err {}", s, out.max_relative_error(&oracle));
            maxima.push(out.values().iter().copied().fold(f32::MIN, f32::max));
        }
        let scale = oracle.values().iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-30);
        for m in &maxima[1..] {
            prop_assert!(((m - maxima[0]) / scale).abs() <= 1e-5);
        }
    }

    #[test]
    fn counted_work_matches_the_formulas((layer, seed) in small_layer()) {
        let (batch, bank) = problem(&layer, seed);
        let LayerConfig { n, k, d, o, b } = layer;
        let m = layer.m();
        let expected_lower = [b * m * m * k * k * d, b * n * n * k * d, b * n * n * d];
        let per_output = [0, k - 1, k * k - 1];
        let model = CostModel::default();
        for (idx, s) in ALL.into_iter().enumerate() {
            let lowered = lower(&batch, &bank, s).unwrap();
            prop_assert_eq!(lowered.elements_written, expected_lower[idx] as u64);
            let rhat = multiply(&lowered.dhat, &lowered.khat, &GemmConfig::default()).unwrap();
            let (_, adds) = lift_counted(&rhat, s, &layer).unwrap();
            prop_assert_eq!(adds, (b * m * m * o * per_output[idx]) as u64);
            let est = model.estimate(s, &layer);
            prop_assert_eq!(est.lower_elements_written, lowered.elements_written);
            prop_assert_eq!(est.lift_adds, adds);
            let (rows, inner) = lowered.dhat.shape();
            prop_assert_eq!(est.gemm_flops, 2 * (rows * inner * lowered.khat.cols()) as u64);
        }
    }

    #[test]
    fn gemm_matches_reference(r in 1usize..70, i in 1usize..70, c in 1usize..70, threads in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Mat::random(r, i, &mut rng);
        let b = Mat::random(i, c, &mut rng);
        let fast = multiply(&a, &b, &GemmConfig::with_threads(threads)).unwrap();
        let slow = multiply_reference(&a, &b).unwrap();
        prop_assert!(max_relative_error(fast.values(), slow.values()) <= 1e-5);
        let single = multiply(&a, &b, &GemmConfig::with_threads(1)).unwrap();
        prop_assert_eq!(fast, single);
    }

    #[test]
    fn selection_ignores_uniform_weight_scaling((layer, _) in small_layer(), e in -6i32..6) {
        let base = CostModel::default();
        let scaled = CostModel::new(base.weights.scaled(10f64.powi(e), 10f64.powi(e)));
        prop_assert_eq!(base.select(&layer).strategy, scaled.select(&layer).strategy);
    }

    #[test]
    fn type2_sits_between_the_others(k in 2usize..=11, m in 1usize..40, d in 1usize..64, o in 1usize..64, b in 1usize..4) {
        let n = m + k - 1;
        let layer = LayerConfig::new(n, k, d, o, b).unwrap();
        let e: Vec<_> = ALL.iter().map(|&s| convlower::cost::estimate(s, &layer)).collect();
        prop_assert!(e[0].lift_adds < e[1].lift_adds && e[1].lift_adds < e[2].lift_adds);
        // Type1 writes b·m²k²d, Type2 b·n²kd: the ordering holds while n² < k·m².
        if n * n < k * m * m {
            prop_assert!(e[2].lower_elements_written < e[1].lower_elements_written);
            prop_assert!(e[1].lower_elements_written < e[0].lower_elements_written);
        }
    }

    #[test]
    fn choice_never_returns_to_type1_as_d_over_o_grows(n_extra in 0usize..20, k in 2usize..=5, b in 1usize..8, alpha_exp in -11.0f64..-8.0, beta_exp in -12.0f64..-9.0) {
        let n = k + n_extra;
        let model = CostModel::new(CostWeights { alpha: 10f64.powf(alpha_exp), beta: 10f64.powf(beta_exp) });
        let product = 4096usize;
        let mut seen_type3 = false;
        let mut d = 1;
        while d <= product {
            let layer = LayerConfig::new(n, k, d, product / d, b).unwrap();
            let choice = model.select(&layer).strategy;
            if seen_type3 {
                prop_assert_ne!(choice, LoweringStrategy::Type1, "d={}", d);
            }
            seen_type3 |= choice == LoweringStrategy::Type3;
            d *= 2;
        }
    }

    #[test]
    fn plans_respect_their_bounds(b in 1usize..300, threads in 1usize..64, p in 1usize..64) {
        match plan_partitions(b, threads, p) {
            Ok(plan) => {
                prop_assert!(p <= b && p <= threads);
                prop_assert_eq!(plan.partition_sizes.iter().sum::<usize>(), b);
                prop_assert_eq!(plan.threads_per_partition.iter().sum::<usize>(), threads);
                let (lo, hi) = (plan.partition_sizes.iter().min().unwrap(), plan.partition_sizes.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
            Err(_) => prop_assert!(p > b || p > threads),
        }
    }

    #[test]
    fn footprint_is_linear_in_partition_size((layer, _) in small_layer(), size in 1usize..64) {
        for s in ALL {
            let one = footprint(s, &layer, 1).unwrap().lowered_bytes_per_partition;
            let many = footprint(s, &layer, size).unwrap().lowered_bytes_per_partition;
            prop_assert_eq!(many, one * size as u64);
        }
    }

    #[test]
    fn partitioning_preserves_output_and_work((layer, seed) in small_layer(), p in 1usize..=3) {
        let layer = layer.with_batch(layer.b + 3);
        let (batch, bank) = problem(&layer, seed);
        let whole = execute_partitioned(&batch, &bank, ALL[seed as usize % 3], &plan_partitions(layer.b, 4, 1).unwrap()).unwrap();
        let split = execute_partitioned(&batch, &bank, ALL[seed as usize % 3], &plan_partitions(layer.b, 4, p).unwrap()).unwrap();
        prop_assert_eq!(&whole.output, &split.output);
        prop_assert_eq!(whole.gemm_flops, split.gemm_flops);
    }

    #[test]
    fn proportional_split_is_scale_invariant(f in proptest::collection::vec(1e6f64..1e13, 1..5), scale in 1e-3f64..1e3, b in 1usize..500) {
        let devs: Vec<_> = f.iter().map(|&x| device("d", x, 0.0)).collect();
        let scaled: Vec<_> = f.iter().map(|&x| device("d", x * scale, 0.0)).collect();
        let a = proportional_split(&devs, b).unwrap();
        let c = proportional_split(&scaled, b).unwrap();
        for (x, y) in a.fractions.iter().zip(&c.fractions) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!((a.fractions.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(a.image_counts.iter().sum::<usize>(), b);
    }

    #[test]
    fn zero_overhead_proportional_is_optimal(f1 in 1e9f64..1e13, f2 in 1e9f64..1e13, g in 10usize..200) {
        let layer = LayerConfig::new(15, 3, 64, 64, 128).unwrap();
        let s = LoweringStrategy::Type1;
        let devs = [device("cpu", f1, 0.0), device("gpu", f2, 0.0)];
        let prop = proportional_split(&devs, layer.b).unwrap();
        let swept = optimal_split_sweep(&layer, s, &devs, g).unwrap();
        prop_assert!((prop.fractions[1] - swept.fractions[1]).abs() <= 1.0 / g as f64 + 1e-12);
        let t = simulate_makespan(&layer, s, &prop, &devs).unwrap();
        for (_, tp) in makespan_curve(&layer, s, &devs, g).unwrap() {
            prop_assert!(t <= tp * (1.0 + 1e-12));
        }
        // Both devices finish together.
        let work = convlower::cost::estimate(s, &layer).gemm_flops as f64;
        let t0 = prop.fractions[0] * work / f1;
        let t1 = prop.fractions[1] * work / f2;
        prop_assert!((t0 - t1).abs() <= 1e-9 * t0.max(t1));
    }

    #[test]
    fn makespan_falls_as_a_device_speeds_up(f1 in 1e9f64..1e12, f2 in 1e9f64..1e12, boost in 1.0f64..10.0, o1 in 0.0f64..1e-2, o2 in 0.0f64..1e-2, p in 0.0f64..=1.0) {
        let layer = LayerConfig::new(15, 3, 64, 64, 16).unwrap();
        let s = LoweringStrategy::Type1;
        let plan = SplitPlan::from_fractions(vec![1.0 - p, p], layer.b);
        let slow = simulate_makespan(&layer, s, &plan, &[device("a", f1, o1), device("b", f2, o2)]).unwrap();
        let fast = simulate_makespan(&layer, s, &plan, &[device("a", f1 * boost, o1), device("b", f2, o2)]).unwrap();
        prop_assert!(fast <= slow);
    }

    #[test]
    fn makespan_curve_is_unimodal(f1 in 1e9f64..1e13, f2 in 1e9f64..1e13, o1 in 0.0f64..1e-3, o2 in 0.0f64..1e-3) {
        let layer = LayerConfig::new(15, 3, 64, 64, 64).unwrap();
        let curve = makespan_curve(&layer, LoweringStrategy::Type1, &[device("a", f1, o1), device("b", f2, o2)], 50).unwrap();
        let t: Vec<f64> = curve.iter().map(|c| c.1).collect();
        // Skip the endpoints: an idle device drops its overhead.
        let inner = &t[1..t.len() - 1];
        let valley = inner.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        for w in inner[..=valley].windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        for w in inner[valley..].windows(2) {
            prop_assert!(w[1] >= w[0] * (1.0 - 1e-12));
        }
    }

    #[test]
    fn overhead_on_the_slow_device_pushes_work_to_the_fast_one(f_slow in 1e9f64..1e11, speedup in 2.0f64..50.0, frac in 0.01f64..0.3) {
        let layer = LayerConfig::new(15, 3, 64, 64, 64).unwrap();
        let s = LoweringStrategy::Type1;
        let work = convlower::cost::estimate(s, &layer).gemm_flops as f64;
        let f_fast = f_slow * speedup;
        let overhead = frac * work / (f_slow + f_fast);
        let plain = optimal_split_sweep(&layer, s, &[device("cpu", f_slow, 0.0), device("gpu", f_fast, 0.0)], 100).unwrap();
        let loaded = optimal_split_sweep(&layer, s, &[device("cpu", f_slow, overhead), device("gpu", f_fast, 0.0)], 100).unwrap();
        prop_assert!(loaded.fractions[1] >= plain.fractions[1]);
    }
}

#[test]
fn identical_devices_have_no_gap() {
    let layer = LayerConfig::new(15, 3, 64, 64, 64).unwrap();
    let devs = [device("a", 1e12, 1e-3), device("b", 1e12, 1e-3)];
    assert_eq!(heuristic_gap(&layer, LoweringStrategy::Type1, &devs, 100).unwrap(), 1.0);
}

#[test]
fn an_overwhelming_device_takes_everything() {
    let layer = LayerConfig::new(15, 3, 64, 64, 64).unwrap();
    let devs = [device("cpu", 1e9, 0.0), device("gpu", 1e30, 0.0)];
    let plan = optimal_split_sweep(&layer, LoweringStrategy::Type1, &devs, 100).unwrap();
    assert_eq!(plan.fractions[1], 1.0);
    assert_eq!(plan.image_counts, vec![0, 64]);
}

#[test]
fn channel_ratio_extremes_pick_the_expected_lowering() {
    let model = CostModel::default();
    let wide_in = LayerConfig::new(13, 3, 384, 3, 16).unwrap();
    let wide_out = LayerConfig::new(13, 3, 3, 384, 16).unwrap();
    assert_eq!(model.select(&wide_in).strategy, LoweringStrategy::Type3);
    assert_eq!(model.select(&wide_out).strategy, LoweringStrategy::Type1);
}

#[test]
fn balanced_layer_choice_survives_weight_perturbation() {
    let layer = LayerConfig::new(15, 3, 192, 192, 16).unwrap();
    let base = CostModel::default().select(&layer).strategy;
    for fa in [0.9, 1.0, 1.1] {
        for fb in [0.9, 1.0, 1.1] {
            let m = CostModel::new(CostWeights::default().scaled(fa, fb));
            assert_eq!(m.select(&layer).strategy, base, "alpha x{fa} beta x{fb}");
        }
    }
}

#[test]
fn crossover_exists_for_a_small_spatial_template() {
    let t = LayerConfig::new(13, 3, 64, 64, 16).unwrap();
    let r = CostModel::default().crossover_ratio(&t).ratio();
    assert!(r.is_finite() && r > 0.0, "{r}");
    let unit = LayerConfig::new(13, 1, 64, 64, 16).unwrap();
    assert!(CostModel::default().crossover_ratio(&unit).ratio().is_nan());
}

#[test]
fn alexnet_range_layer_matches_oracle() {
    let layer = LayerConfig::new(13, 3, 384, 384, 4).unwrap();
    let (batch, bank) = problem(&layer, 99);
    let oracle = direct_convolve_batch(&batch, &bank).unwrap();
    for s in ALL {
        let (out, _) = convolve_lowered(&batch, &bank, s, 1).unwrap();
        assert!(out.max_relative_error(&oracle) <= 1e-5, "{s}");
    }
}
