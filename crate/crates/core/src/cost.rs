//! Analytical cost of the three lowerings and automatic strategy choice.
//!
//! Costs are exact operation counts derived from the lowered shapes, not
//! asymptotic bounds:
//!
//! * lowering writes every entry of `D̂` once (`b·m²·k²·d`, `b·n²·k·d`,
//!   `b·n²·d` for Types 1/2/3);
//! * lifting adds `0`, `k-1` or `k²-1` partial results per output element;
//! * the multiply phase costs `2 · rows(D̂) · cols(D̂) · cols(K̂)` flops.
//!
//! The score is `α · (lowered elements + lift adds) + β · flops`, with `α`
//! the time to move one element and `β` the time of one flop. The
//! strategy with the smallest score wins; ties go to the lower type number.
//!
//! With `d · o` held fixed, the Type1 − Type3 score difference grows
//! monotonically with `d/o`, so there is at most one crossover ratio.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gemm::{gemm_flops, gemm_throughput_probe, GemmConfig};
use crate::lowering::LoweringStrategy;
use crate::tensor::LayerConfig;

/// Seconds per moved element (`alpha`) and per flop (`beta`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for CostWeights {
    /// Uncalibrated: 1 ns per element moved, 40 GFLOP/s.
    fn default() -> Self {
        CostWeights { alpha: 1.0e-9, beta: 2.5e-11 }
    }
}

impl CostWeights {
    pub fn scaled(self, alpha_factor: f64, beta_factor: f64) -> Self {
        CostWeights { alpha: self.alpha * alpha_factor, beta: self.beta * beta_factor }
    }

    /// Measures `alpha` with a large buffer copy and `beta` with a
    /// `256³` multiply using `gemm`'s thread count.
    pub fn calibrate(gemm: &GemmConfig) -> Result<Self> {
        const LEN: usize = 1 << 23;
        let src: Vec<f32> = (0..LEN).map(|i| i as f32).collect();
        let mut dst = vec![0.0f32; LEN];
        dst.copy_from_slice(&src);
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let start = Instant::now();
            dst.copy_from_slice(std::hint::black_box(&src));
            std::hint::black_box(&mut dst);
            best = best.min(start.elapsed().as_secs_f64());
        }
        let alpha = best / LEN as f64;
        let probe = gemm_throughput_probe((256, 256, 256), gemm, 5)?;
        Ok(CostWeights { alpha, beta: 1.0 / probe.flops_per_second })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub strategy: LoweringStrategy,
    pub lower_elements_written: u64,
    pub gemm_flops: u64,
    pub lift_adds: u64,
    /// Size of `D̂` in bytes.
    pub lowered_bytes: u64,
    pub total_score: f64,
}

/// Relative GEMM efficiency per strategy (1.0 = the calibration probe's
/// throughput). Dividing flops by efficiency folds shape effects, such as a
/// very narrow `K̂`, into the score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyTable {
    pub type1: f64,
    pub type2: f64,
    pub type3: f64,
}

impl Default for EfficiencyTable {
    fn default() -> Self {
        EfficiencyTable { type1: 1.0, type2: 1.0, type3: 1.0 }
    }
}

impl EfficiencyTable {
    pub fn get(&self, s: LoweringStrategy) -> f64 {
        match s {
            LoweringStrategy::Type1 => self.type1,
            LoweringStrategy::Type2 => self.type2,
            LoweringStrategy::Type3 => self.type3,
        }
    }

    /// Probes each strategy's multiply shape for `layer` and expresses its
    /// throughput relative to `reference_flops_per_second`.
    pub fn measure(
        layer: &LayerConfig,
        gemm: &GemmConfig,
        reference_flops_per_second: f64,
        reps: usize,
    ) -> Result<Self> {
        let mut eff = [1.0; 3];
        for (slot, s) in eff.iter_mut().zip(LoweringStrategy::ALL) {
            let (rows, inner) = s.dhat_shape(layer);
            let cols = s.khat_shape(layer).1;
            let probe = gemm_throughput_probe((rows, inner, cols), gemm, reps)?;
            *slot = probe.flops_per_second / reference_flops_per_second;
        }
        Ok(EfficiencyTable { type1: eff[0], type2: eff[1], type3: eff[2] })
    }
}

/// Weights plus optional per-strategy GEMM efficiency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub weights: CostWeights,
    pub efficiency: EfficiencyTable,
}

/// Exact counts for one strategy, with real-valued `d` and `o` so the same
/// formulas serve the crossover search.
fn counts(s: LoweringStrategy, n: f64, k: f64, d: f64, o: f64, b: f64) -> (f64, f64, f64) {
    let m = n - k + 1.0;
    let (lower, lift, rows, inner, cols) = match s {
        LoweringStrategy::Type1 => (b * m * m * k * k * d, 0.0, b * m * m, k * k * d, o),
        LoweringStrategy::Type2 => {
            (b * n * n * k * d, b * m * m * (k - 1.0) * o, b * n * n, k * d, k * o)
        }
        LoweringStrategy::Type3 => {
            (b * n * n * d, b * m * m * (k * k - 1.0) * o, b * n * n, d, k * k * o)
        }
    };
    (lower, lift, 2.0 * rows * inner * cols)
}

impl CostModel {
    pub fn new(weights: CostWeights) -> Self {
        CostModel { weights, efficiency: EfficiencyTable::default() }
    }

    pub fn with_efficiency(self, efficiency: EfficiencyTable) -> Self {
        CostModel { efficiency, ..self }
    }

    fn score(&self, s: LoweringStrategy, moved: f64, flops: f64) -> f64 {
        self.weights.alpha * moved + self.weights.beta * flops / self.efficiency.get(s)
    }

    pub fn estimate(&self, strategy: LoweringStrategy, layer: &LayerConfig) -> CostEstimate {
        let LayerConfig { k, o, b, .. } = *layer;
        let m = layer.m() as u64;
        let (rows, inner) = strategy.dhat_shape(layer);
        let cols = strategy.khat_shape(layer).1;
        let lower_elements_written = (rows * inner) as u64;
        let lift_adds =
            b as u64 * m * m * o as u64 * strategy.lift_adds_per_output(k) as u64;
        let flops = gemm_flops(rows, inner, cols);
        CostEstimate {
            strategy,
            lower_elements_written,
            gemm_flops: flops,
            lift_adds,
            lowered_bytes: lower_elements_written * std::mem::size_of::<f32>() as u64,
            total_score: self.score(
                strategy,
                (lower_elements_written + lift_adds) as f64,
                flops as f64,
            ),
        }
    }

    pub fn select(&self, layer: &LayerConfig) -> StrategyChoice {
        let estimates: Vec<CostEstimate> =
            LoweringStrategy::ALL.iter().map(|&s| self.estimate(s, layer)).collect();
        let mut best = estimates[0];
        for e in &estimates[1..] {
            if e.total_score < best.total_score {
                best = *e;
            }
        }
        StrategyChoice {
            strategy: best.strategy,
            estimates,
            ratio: layer.d as f64 / layer.o as f64,
        }
    }

    /// Type1 score minus Type3 score at ratio `d/o = ratio` with
    /// `d · o = product`.
    fn type1_minus_type3(&self, template: &LayerConfig, product: f64, ratio: f64) -> f64 {
        let d = (product * ratio).sqrt();
        let o = (product / ratio).sqrt();
        let (n, k, b) = (template.n as f64, template.k as f64, template.b as f64);
        let score = |s| {
            let (lower, lift, flops) = counts(s, n, k, d, o, b);
            self.score(s, lower + lift, flops)
        };
        score(LoweringStrategy::Type1) - score(LoweringStrategy::Type3)
    }

    /// Finds the `d/o` ratio in `[1/64, 64]` where Type1 and Type3 score
    /// equally, holding `n`, `k`, `b` and `d · o` of `template` fixed.
    pub fn crossover_ratio(&self, template: &LayerConfig) -> Crossover {
        if template.k == 1 {
            return Crossover::Identical;
        }
        let product = (template.d * template.o) as f64;
        let f = |log_r: f64| self.type1_minus_type3(template, product, log_r.exp());
        let (mut lo, mut hi) = (CROSSOVER_RANGE.0.ln(), CROSSOVER_RANGE.1.ln());
        let (f_lo, f_hi) = (f(lo), f(hi));
        if f_lo > 0.0 && f_hi > 0.0 {
            return Crossover::Type3Throughout;
        }
        if f_lo <= 0.0 && f_hi <= 0.0 {
            return Crossover::Type1Throughout;
        }
        // f increases with the ratio: Type1 is cheaper below the crossing.
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        Crossover::At((0.5 * (lo + hi)).exp())
    }
}

/// Ratio range searched by [`crossover_ratio`].
pub const CROSSOVER_RANGE: (f64, f64) = (1.0 / 64.0, 64.0);

/// Outcome of the crossover search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Crossover {
    /// Type1 wins below this `d/o`, Type3 above it.
    At(f64),
    /// Type1 is no more expensive anywhere in the range.
    Type1Throughout,
    /// Type3 is cheaper everywhere in the range.
    Type3Throughout,
    /// `k = 1`: both strategies cost the same.
    Identical,
}

impl Crossover {
    /// The crossing as a number: `+∞` when Type1 wins throughout, `0` when
    /// Type3 does, `NaN` when there is nothing to cross.
    pub fn ratio(&self) -> f64 {
        match *self {
            Crossover::At(r) => r,
            Crossover::Type1Throughout => f64::INFINITY,
            Crossover::Type3Throughout => 0.0,
            Crossover::Identical => f64::NAN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyChoice {
    pub strategy: LoweringStrategy,
    /// One estimate per strategy, in type order.
    pub estimates: Vec<CostEstimate>,
    /// `d / o`.
    pub ratio: f64,
}

impl StrategyChoice {
    pub fn estimate_for(&self, s: LoweringStrategy) -> &CostEstimate {
        &self.estimates[s.number() as usize - 1]
    }
}

/// [`CostModel::estimate`] with default weights.
pub fn estimate(strategy: LoweringStrategy, layer: &LayerConfig) -> CostEstimate {
    CostModel::default().estimate(strategy, layer)
}

/// [`CostModel::select`] with default weights.
pub fn select_strategy(layer: &LayerConfig) -> StrategyChoice {
    CostModel::default().select(layer)
}

/// [`CostModel::crossover_ratio`] with default weights.
pub fn crossover_ratio(template: &LayerConfig) -> Crossover {
    CostModel::default().crossover_ratio(template)
}
