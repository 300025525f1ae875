//! Splitting a batch across devices of different speed.
//!
//! Each device gets a share of the batch equal to its share of the total
//! FLOP/s. The makespan simulator charges every device that receives work
//! a fixed dispatch overhead plus its share of the multiply-phase flops at
//! its rate; the slowest device sets the makespan.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::estimate;
use crate::error::{Error, Result};
use crate::gemm::{gemm_throughput_probe, GemmConfig};
use crate::lowering::LoweringStrategy;
use crate::tensor::LayerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    /// Sustained FLOP/s.
    pub flops: f64,
    /// Per-dispatch latency in seconds.
    pub fixed_overhead: f64,
}

impl DeviceProfile {
    pub fn new(name: impl Into<String>, flops: f64, fixed_overhead: f64) -> Result<Self> {
        let name = name.into();
        if !(flops > 0.0 && flops.is_finite()) {
            return Err(Error::Config(format!("device '{name}': flops must be > 0, got {flops}")));
        }
        if !(fixed_overhead >= 0.0 && fixed_overhead.is_finite()) {
            return Err(Error::Config(format!(
                "device '{name}': overhead must be >= 0, got {fixed_overhead}"
            )));
        }
        Ok(DeviceProfile { name, flops, fixed_overhead })
    }

    /// Profiles this machine with a `512³` multiply on `threads` workers.
    pub fn capture_local(name: impl Into<String>, threads: usize, reps: usize) -> Result<Self> {
        let probe = gemm_throughput_probe((512, 512, 512), &GemmConfig::with_threads(threads), reps)?;
        DeviceProfile::new(name, probe.flops_per_second, 0.0)
    }
}

/// Parses `name flops overhead` records, one per line; `#` starts a comment.
pub fn parse_profiles(text: &str, path: &str) -> Result<Vec<DeviceProfile>> {
    let mut devices = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_string(), line: idx + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 'name flops overhead', got {} fields", fields.len())));
        }
        let flops: f64 = fields[1].parse().map_err(|_| err(format!("bad flops '{}'", fields[1])))?;
        let overhead: f64 =
            fields[2].parse().map_err(|_| err(format!("bad overhead '{}'", fields[2])))?;
        let device = DeviceProfile::new(fields[0], flops, overhead).map_err(|e| err(e.to_string()))?;
        devices.push(device);
    }
    if devices.is_empty() {
        return Err(Error::Parse { path: path.to_string(), line: 0, msg: "no devices".into() });
    }
    Ok(devices)
}

pub fn load_profiles(path: &Path) -> Result<Vec<DeviceProfile>> {
    let text = std::fs::read_to_string(path)?;
    parse_profiles(&text, &path.display().to_string())
}

pub fn format_profiles(devices: &[DeviceProfile]) -> String {
    let mut s = String::from("# name flops overhead_seconds\n");
    for d in devices {
        s.push_str(&format!("{} {:e} {}\n", d.name, d.flops, d.fixed_overhead));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Share of the batch per device; sums to 1.
    pub fractions: Vec<f64>,
    /// Images per device after largest-remainder rounding; sums to `b`.
    pub image_counts: Vec<usize>,
}

impl SplitPlan {
    pub fn from_fractions(fractions: Vec<f64>, b: usize) -> Self {
        let image_counts = largest_remainder(&fractions, b);
        SplitPlan { fractions, image_counts }
    }
}

/// Rounds `fractions · total` to integers that sum to `total`.
fn largest_remainder(fractions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Each device's fraction is its share of the total FLOP/s.
pub fn proportional_split(devices: &[DeviceProfile], b: usize) -> Result<SplitPlan> {
    if devices.is_empty() {
        return Err(Error::Config("no devices to split across".into()));
    }
    let total: f64 = devices.iter().map(|d| d.flops).sum();
    let fractions = devices.iter().map(|d| d.flops / total).collect();
    Ok(SplitPlan::from_fractions(fractions, b))
}

/// Simulated completion time of `plan` on `devices`, in seconds.
pub fn simulate_makespan(
    layer: &LayerConfig,
    strategy: LoweringStrategy,
    plan: &SplitPlan,
    devices: &[DeviceProfile],
) -> Result<f64> {
    if plan.fractions.len() != devices.len() {
        return Err(Error::Config(format!(
            "plan has {} fractions for {} devices",
            plan.fractions.len(),
            devices.len()
        )));
    }
    let work = estimate(strategy, layer).gemm_flops as f64;
    Ok(makespan(work, &plan.fractions, devices))
}

fn makespan(work: f64, fractions: &[f64], devices: &[DeviceProfile]) -> f64 {
    fractions
        .iter()
        .zip(devices)
        .filter(|(&f, _)| f > 0.0)
        .map(|(&f, d)| d.fixed_overhead + f * work / d.flops)
        .fold(0.0, f64::max)
}

fn require_pair(devices: &[DeviceProfile]) -> Result<()> {
    if devices.len() != 2 {
        return Err(Error::Unsupported(format!(
            "split sweeps need exactly 2 devices, got {}",
            devices.len()
        )));
    }
    Ok(())
}

/// Makespan for every `p ∈ {0, 1/g, …, 1}`, `p` being the second device's
/// share.
pub fn makespan_curve(
    layer: &LayerConfig,
    strategy: LoweringStrategy,
    devices: &[DeviceProfile],
    granularity: usize,
) -> Result<Vec<(f64, f64)>> {
    require_pair(devices)?;
    if granularity < 10 {
        return Err(Error::Config(format!("granularity must be >= 10, got {granularity}")));
    }
    let work = estimate(strategy, layer).gemm_flops as f64;
    Ok((0..=granularity)
        .map(|i| {
            let p = i as f64 / granularity as f64;
            (p, makespan(work, &[1.0 - p, p], devices))
        })
        .collect())
}

/// Exhaustive scan of the second device's share on a `1/granularity` grid;
/// ties go to the smaller share.
pub fn optimal_split_sweep(
    layer: &LayerConfig,
    strategy: LoweringStrategy,
    devices: &[DeviceProfile],
    granularity: usize,
) -> Result<SplitPlan> {
    let curve = makespan_curve(layer, strategy, devices, granularity)?;
    let mut best = curve[0];
    for &point in &curve[1..] {
        if point.1 < best.1 {
            best = point;
        }
    }
    Ok(SplitPlan::from_fractions(vec![1.0 - best.0, best.0], layer.b))
}

/// `makespan(proportional) / makespan(best plan)`, where the best plan is the
/// better of the grid optimum and the proportional plan itself, so the gap
/// is never below 1.
pub fn heuristic_gap(
    layer: &LayerConfig,
    strategy: LoweringStrategy,
    devices: &[DeviceProfile],
    granularity: usize,
) -> Result<f64> {
    let swept = optimal_split_sweep(layer, strategy, devices, granularity)?;
    let proportional = proportional_split(devices, layer.b)?;
    let heuristic = simulate_makespan(layer, strategy, &proportional, devices)?;
    let best = simulate_makespan(layer, strategy, &swept, devices)?.min(heuristic);
    Ok(heuristic / best)
}

/// Random pair of devices with FLOP/s log-uniform in `[1e9, 1e13]` and
/// overheads uniform in `[0, max_overhead_fraction · T]`, `T` being the
/// perfectly balanced compute time of `layer`.
pub fn random_device_pair<R: Rng + ?Sized>(
    rng: &mut R,
    layer: &LayerConfig,
    strategy: LoweringStrategy,
    max_overhead_fraction: f64,
) -> [DeviceProfile; 2] {
    let work = estimate(strategy, layer).gemm_flops as f64;
    let f1 = 10f64.powf(rng.gen_range(9.0..13.0));
    let f2 = 10f64.powf(rng.gen_range(9.0..13.0));
    let balanced = work / (f1 + f2);
    let mut overhead = || rng.gen_range(0.0..=1.0) * max_overhead_fraction * balanced;
    let (o1, o2) = (overhead(), overhead());
    [
        DeviceProfile { name: "cpu".into(), flops: f1, fixed_overhead: o1 },
        DeviceProfile { name: "gpu".into(), flops: f2, fixed_overhead: o2 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const S: LoweringStrategy = LoweringStrategy::Type1;

    fn layer() -> LayerConfig {
        LayerConfig::new(15, 3, 256, 384, 256).unwrap()
    }

    fn dev(name: &str, flops: f64, overhead: f64) -> DeviceProfile {
        DeviceProfile::new(name, flops, overhead).unwrap()
    }

    #[test]
    fn proportional_examples() {
        let plan = proportional_split(&[dev("cpu", 1e12, 0.0), dev("gpu", 2e12, 0.0)], 300).unwrap();
        assert!((plan.fractions[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(plan.image_counts, vec![100, 200]);

        let single = proportional_split(&[dev("cpu", 5.0, 0.0)], 7).unwrap();
        assert_eq!(single.fractions, vec![1.0]);
        assert_eq!(single.image_counts, vec![7]);

        let twins = proportional_split(&[dev("a", 3.0, 0.0), dev("b", 3.0, 0.0)], 9).unwrap();
        assert_eq!(twins.fractions, vec![0.5, 0.5]);
        assert_eq!(twins.image_counts.iter().sum::<usize>(), 9);

        assert!(proportional_split(&[], 4).is_err());
    }

    #[test]
    fn rounding_preserves_the_total() {
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.15, 0.85], 10), vec![2, 8]);
        assert_eq!(largest_remainder(&[0.5, 0.5], 0), vec![0, 0]);
    }

    #[test]
    fn proportional_split_is_scale_invariant() {
        let a = [dev("a", 1.5e11, 0.0), dev("b", 7.0e11, 0.0), dev("c", 2.0e10, 0.0)];
        let b: Vec<_> = a.iter().map(|d| dev(&d.name, d.flops * 1234.5, 0.0)).collect();
        let pa = proportional_split(&a, 64).unwrap();
        let pb = proportional_split(&b, 64).unwrap();
        for (x, y) in pa.fractions.iter().zip(&pb.fractions) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(pa.image_counts, pb.image_counts);
    }

    #[test]
    fn everything_on_the_fast_device() {
        let devices = [dev("slow", 1e12, 0.0), dev("fast", 4e12, 0.0)];
        let plan = SplitPlan::from_fractions(vec![0.0, 1.0], 256);
        let work = estimate(S, &layer()).gemm_flops as f64;
        let t = simulate_makespan(&layer(), S, &plan, &devices).unwrap();
        assert_eq!(t, work / 4e12);
    }

    #[test]
    fn proportional_devices_finish_together() {
        let devices = [dev("cpu", 0.7e12, 0.0), dev("gpu", 2.9e12, 0.0)];
        let plan = proportional_split(&devices, 256).unwrap();
        let work = estimate(S, &layer()).gemm_flops as f64;
        let t0 = plan.fractions[0] * work / devices[0].flops;
        let t1 = plan.fractions[1] * work / devices[1].flops;
        assert!((t0 - t1).abs() <= 1e-12 * t0);
    }

    #[test]
    fn curve_is_v_shaped_with_interior_optimum() {
        let devices = [dev("cpu", 1e12, 1e-4), dev("gpu", 5e12, 1e-4)];
        let curve = makespan_curve(&layer(), S, &devices, 100).unwrap();
        let (best_idx, _) = curve
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .unwrap();
        assert!(best_idx > 0 && best_idx < 100);
        for w in curve[..=best_idx].windows(2) {
            assert!(w[1].1 <= w[0].1);
        }
        for w in curve[best_idx..].windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn sweep_matches_proportional_without_overheads() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..100 {
            let devices = random_device_pair(&mut rng, &layer(), S, 0.0);
            let g = 200;
            let swept = optimal_split_sweep(&layer(), S, &devices, g).unwrap();
            let prop = proportional_split(&devices, 256).unwrap();
            assert!((swept.fractions[1] - prop.fractions[1]).abs() <= 1.0 / g as f64);
            let gap = heuristic_gap(&layer(), S, &devices, g).unwrap();
            assert!((1.0..=1.01).contains(&gap), "{gap}");
        }
    }

    #[test]
    fn huge_device_takes_everything() {
        let devices = [dev("cpu", 1e9, 0.0), dev("gpu", 1e30, 0.0)];
        let swept = optimal_split_sweep(&layer(), S, &devices, 50).unwrap();
        assert_eq!(swept.fractions[1], 1.0);
    }

    #[test]
    fn slow_device_overhead_shifts_work_to_the_fast_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let work = estimate(S, &layer()).gemm_flops as f64;
        for _ in 0..100 {
            let f_slow = 10f64.powf(rng.gen_range(10.0..12.0));
            let f_fast = f_slow * rng.gen_range(1.5..8.0);
            let overhead = rng.gen_range(0.05..0.5) * work / (f_slow + f_fast);
            let devices = [dev("slow", f_slow, overhead), dev("fast", f_fast, 0.0)];
            let swept = optimal_split_sweep(&layer(), S, &devices, 1000).unwrap();
            let prop = proportional_split(&devices, 256).unwrap();
            assert!(swept.fractions[1] > prop.fractions[1]);
        }
    }

    #[test]
    fn identical_devices_have_no_gap() {
        let devices = [dev("a", 2e12, 1e-3), dev("b", 2e12, 1e-3)];
        for g in [10, 11, 100] {
            assert_eq!(heuristic_gap(&layer(), S, &devices, g).unwrap(), 1.0);
        }
    }

    #[test]
    fn makespan_is_monotone_in_device_speed() {
        let plan = SplitPlan::from_fractions(vec![0.4, 0.6], 256);
        let mut prev = f64::INFINITY;
        for f in [1e10, 1e11, 5e11, 1e12, 1e13] {
            let devices = [dev("cpu", f, 1e-3), dev("gpu", 1e12, 1e-3)];
            let t = simulate_makespan(&layer(), S, &plan, &devices).unwrap();
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn sweep_preconditions() {
        let one = [dev("cpu", 1e12, 0.0)];
        assert!(matches!(optimal_split_sweep(&layer(), S, &one, 10), Err(Error::Unsupported(_))));
        let two = [dev("a", 1e12, 0.0), dev("b", 1e12, 0.0)];
        assert!(matches!(optimal_split_sweep(&layer(), S, &two, 9), Err(Error::Config(_))));
        let plan = SplitPlan::from_fractions(vec![1.0], 4);
        assert!(simulate_makespan(&layer(), S, &plan, &two).is_err());
    }

    #[test]
    fn profile_file_round_trip_and_errors() {
        let text = "# devices\ncpu 1.0e12 0\n\ngpu 2e12 0.001 # k520\n";
        let devices = parse_profiles(text, "devices.txt").unwrap();
        assert_eq!(devices.len(), 2);
        assert_eq!(devices[1].fixed_overhead, 0.001);
        assert_eq!(parse_profiles(&format_profiles(&devices), "x").unwrap(), devices);

        match parse_profiles("cpu 1e12 0\ngpu fast 0\n", "d.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_profiles("cpu 1e12\n", "d.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match parse_profiles("cpu -1 0\n", "d.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(parse_profiles("# nothing\n", "d.txt").is_err());
    }
}
