//! The `convbench` command-line harness.
//!
//! Every command produces a list of [`ResultRecord`]s, written as CSV or as
//! a JSON array with the same field names. Exit status is `0` on success,
//! [`EXIT_VERIFY_FAILED`] when a verification run exceeds its tolerance and
//! [`EXIT_CONFIG`] for bad flags or malformed input files.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{execute_partitioned, execute_per_image, plan_partitions, PartitionedRun};
use crate::cost::{CostEstimate, CostModel, CostWeights};
use crate::error::{Error, Result};
use crate::gemm::{gemm_throughput_probe, GemmConfig};
use crate::layers::{LayerFile, NamedLayer};
use crate::lowering::{convolve_lowered, LoweringStrategy, PhaseTimings};
use crate::scheduler::{
    format_profiles, heuristic_gap, load_profiles, makespan_curve, optimal_split_sweep,
    proportional_split, random_device_pair, simulate_makespan, DeviceProfile,
};
use crate::tensor::{direct_convolve_batch, DataBatch, KernelBank, LayerConfig};
use crate::timing::{Summary, DEFAULT_REPS, DEFAULT_WARMUP};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub const DEFAULT_SEED: u64 = 20150601;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "convbench", about = "Lowering-based convolution benchmarks", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Layer file (`name n k d o b` per line); the shipped set if omitted.
    #[arg(long, global = true)]
    pub layers: Option<PathBuf>,
    /// Restrict to one layer of the layer file.
    #[arg(long, global = true)]
    pub layer: Option<String>,
    #[arg(long, global = true, default_value = "auto")]
    pub strategy: StrategyArg,
    /// Global thread budget.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, default_value_t = DEFAULT_REPS)]
    pub reps: usize,
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Write results here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Calibrate the cost model on this machine instead of using defaults.
    #[arg(long, global = true)]
    pub calibrate: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every strategy against the direct convolution.
    Verify {
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Cost-model estimates and the automatic choice for each layer.
    Estimate,
    /// Vary d/o with d·o fixed; model and measured winners per point.
    SweepRatio {
        /// `LO:HI:STEPS`, bounds may be fractions such as `1/8`.
        #[arg(long, default_value = "1/8:8:7")]
        ratio_range: String,
    },
    /// Throughput for several batch sizes, whole batch in one GEMM.
    SweepBatch {
        #[arg(long, value_delimiter = ',', default_value = "1,8,64")]
        batch: Vec<usize>,
    },
    /// Throughput for several partition counts plus the per-image baseline.
    SweepPartitions {
        /// Partition counts; `none` is the per-image baseline.
        #[arg(long, value_delimiter = ',', default_value = "none,1,2,4")]
        partitions: Vec<String>,
        /// Batch size (defaults to the layer's).
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Proportional split, swept optimum, gap and makespan curve.
    Schedule {
        #[arg(long)]
        devices: PathBuf,
        #[arg(long, default_value_t = 100)]
        granularity: usize,
        /// Also audit the gap over this many random device pairs.
        #[arg(long, default_value_t = 0)]
        audit: usize,
    },
    /// Measure this machine and write a device-profile line.
    CaptureProfile {
        #[arg(long, default_value = "cpu")]
        name: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    #[value(name = "1")]
    Type1,
    #[value(name = "2")]
    Type2,
    #[value(name = "3")]
    Type3,
    Auto,
}

impl StrategyArg {
    fn fixed(self) -> Option<LoweringStrategy> {
        match self {
            StrategyArg::Type1 => Some(LoweringStrategy::Type1),
            StrategyArg::Type2 => Some(LoweringStrategy::Type2),
            StrategyArg::Type3 => Some(LoweringStrategy::Type3),
            StrategyArg::Auto => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// One output row. Fields a command does not produce are left empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub command: String,
    pub layer: String,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub o: usize,
    pub b: usize,
    pub strategy: String,
    pub partitions: Option<usize>,
    pub threads: usize,
    pub repetitions: usize,
    pub lower_median_s: Option<f64>,
    pub multiply_median_s: Option<f64>,
    pub lift_median_s: Option<f64>,
    pub total_median_s: Option<f64>,
    pub total_iqr_s: Option<f64>,
    pub images_per_s: Option<f64>,
    pub gemm_flops_per_s: Option<f64>,
    pub footprint_bytes: Option<u64>,
    pub est_lower_elements: Option<u64>,
    pub est_gemm_flops: Option<u64>,
    pub est_lift_adds: Option<u64>,
    pub est_score: Option<f64>,
    pub ratio: Option<f64>,
    pub model_winner: Option<String>,
    pub measured_winner: Option<String>,
    pub device: Option<String>,
    pub device_fraction: Option<f64>,
    pub makespan_s: Option<f64>,
    pub gap: Option<f64>,
    pub max_rel_error: Option<f64>,
    pub tolerance: Option<f64>,
    pub passed: Option<bool>,
    pub note: String,
    pub seed: u64,
    pub machine: String,
}

impl ResultRecord {
    fn new(command: &str, name: &str, layer: &LayerConfig, ctx: &Context) -> Self {
        ResultRecord {
            command: command.to_string(),
            layer: name.to_string(),
            n: layer.n,
            k: layer.k,
            d: layer.d,
            o: layer.o,
            b: layer.b,
            threads: ctx.threads,
            seed: ctx.seed,
            machine: ctx.machine.clone(),
            ..Default::default()
        }
    }

    fn with_estimate(mut self, e: &CostEstimate) -> Self {
        self.est_lower_elements = Some(e.lower_elements_written);
        self.est_gemm_flops = Some(e.gemm_flops);
        self.est_lift_adds = Some(e.lift_adds);
        self.est_score = Some(e.total_score);
        self
    }

    fn with_phases(mut self, phases: &[PhaseTimings], images: usize) -> Self {
        let pick = |f: fn(&PhaseTimings) -> f64| {
            Summary::from_samples(&phases.iter().map(f).collect::<Vec<_>>())
        };
        let total = pick(PhaseTimings::total);
        self.repetitions = phases.len();
        self.lower_median_s = Some(pick(|p| p.lower).median);
        self.multiply_median_s = Some(pick(|p| p.multiply).median);
        self.lift_median_s = Some(pick(|p| p.lift).median);
        self.total_median_s = Some(total.median);
        self.total_iqr_s = Some(total.iqr);
        self.images_per_s = Some(images as f64 / total.median);
        self
    }
}

/// Settings shared by all commands.
#[derive(Clone, Debug)]
pub struct Context {
    pub threads: usize,
    pub reps: usize,
    pub seed: u64,
    pub machine: String,
    pub model: CostModel,
}

impl Context {
    pub fn new(threads: usize, reps: usize, seed: u64) -> Self {
        Context { threads, reps, seed, machine: machine_descriptor(), model: CostModel::default() }
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

pub fn machine_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{}-{}-{}cpu", std::env::consts::ARCH, std::env::consts::OS, cpus)
}

fn random_problem(layer: &LayerConfig, rng: &mut ChaCha8Rng) -> (DataBatch, KernelBank) {
    let batch = DataBatch::random(layer.b, layer.n, layer.d, rng);
    let bank = KernelBank::random(layer.k, layer.d, layer.o, rng);
    (batch, bank)
}

/// Compares every strategy in `strategies` with the direct convolution on
/// random data. Returns the records and whether all passed.
pub fn cmd_verify(
    layers: &LayerFile,
    strategies: &[LoweringStrategy],
    tolerance: f64,
    ctx: &Context,
) -> Result<(Vec<ResultRecord>, bool)> {
    let mut rng = ctx.rng();
    let mut records = Vec::new();
    let mut all_passed = true;
    for NamedLayer { name, layer } in &layers.layers {
        let (batch, bank) = random_problem(layer, &mut rng);
        let oracle = direct_convolve_batch(&batch, &bank)?;
        for &s in strategies {
            let (out, timings) = convolve_lowered(&batch, &bank, s, ctx.threads)?;
            let err = out.max_relative_error(&oracle);
            let passed = err <= tolerance;
            all_passed &= passed;
            let mut rec = ResultRecord::new("verify", name, layer, ctx)
                .with_estimate(&ctx.model.estimate(s, layer))
                .with_phases(&[timings], layer.b);
            rec.strategy = s.to_string();
            rec.max_rel_error = Some(err);
            rec.tolerance = Some(tolerance);
            rec.passed = Some(passed);
            records.push(rec);
        }
    }
    Ok((records, all_passed))
}

pub fn cmd_estimate(layers: &LayerFile, ctx: &Context) -> Vec<ResultRecord> {
    let mut records = Vec::new();
    for NamedLayer { name, layer } in &layers.layers {
        let choice = ctx.model.select(layer);
        for e in &choice.estimates {
            let mut rec = ResultRecord::new("estimate", name, layer, ctx).with_estimate(e);
            rec.strategy = e.strategy.to_string();
            rec.ratio = Some(choice.ratio);
            rec.model_winner = Some(choice.strategy.to_string());
            rec.footprint_bytes = Some(e.lowered_bytes);
            records.push(rec);
        }
    }
    records
}

/// Parses `LO:HI:STEPS`; `LO` and `HI` accept decimals or `a/b` fractions.
pub fn parse_ratio_range(text: &str) -> Result<(f64, f64, usize)> {
    let bad = || Error::Config(format!("ratio range '{text}' is not LO:HI:STEPS"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let num = |s: &str| -> Result<f64> {
        let v = match s.split_once('/') {
            Some((a, b)) => {
                a.trim().parse::<f64>().map_err(|_| bad())? / b.trim().parse::<f64>().map_err(|_| bad())?
            }
            None => s.trim().parse::<f64>().map_err(|_| bad())?,
        };
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(bad())
        }
    };
    let (lo, hi) = (num(parts[0])?, num(parts[1])?);
    let steps: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if steps == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo, hi, steps))
}

/// Log-spaced ratios from `lo` to `hi`; a single step sits at `lo`.
pub fn ratio_points(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![lo];
    }
    (0..steps)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (steps - 1) as f64).exp())
        .collect()
}

/// The layer with `d/o ≈ ratio` and `d · o ≈ template.d · template.o`.
pub fn layer_at_ratio(template: &LayerConfig, ratio: f64) -> LayerConfig {
    let product = (template.d * template.o) as f64;
    let d = ((product * ratio).sqrt().round() as usize).max(1);
    let o = ((product / ratio).sqrt().round() as usize).max(1);
    LayerConfig { d, o, ..*template }
}

/// Median per-phase timings of `reps` lowered convolutions of one problem.
pub fn measure_strategy(
    batch: &DataBatch,
    bank: &KernelBank,
    s: LoweringStrategy,
    threads: usize,
    warmup: usize,
    reps: usize,
) -> Result<Vec<PhaseTimings>> {
    for _ in 0..warmup {
        convolve_lowered(batch, bank, s, threads)?;
    }
    (0..reps.max(1)).map(|_| convolve_lowered(batch, bank, s, threads).map(|(_, t)| t)).collect()
}

pub fn cmd_sweep_ratio(
    name: &str,
    template: &LayerConfig,
    range: (f64, f64, usize),
    strategies: &[LoweringStrategy],
    ctx: &Context,
) -> Result<Vec<ResultRecord>> {
    let mut rng = ctx.rng();
    let mut records = Vec::new();
    for ratio in ratio_points(range.0, range.1, range.2) {
        let layer = layer_at_ratio(template, ratio);
        let (batch, bank) = random_problem(&layer, &mut rng);
        let choice = ctx.model.select(&layer);
        let model_winner = strategies
            .iter()
            .min_by(|a, b| {
                let (ea, eb) = (choice.estimate_for(**a), choice.estimate_for(**b));
                ea.total_score.total_cmp(&eb.total_score)
            })
            .copied()
            .expect("at least one strategy");
        let mut point = Vec::new();
        for &s in strategies {
            let phases = measure_strategy(&batch, &bank, s, ctx.threads, DEFAULT_WARMUP, ctx.reps)?;
            let mut rec = ResultRecord::new("sweep-ratio", name, &layer, ctx)
                .with_estimate(choice.estimate_for(s))
                .with_phases(&phases, layer.b);
            rec.strategy = s.to_string();
            rec.ratio = Some(layer.d as f64 / layer.o as f64);
            rec.model_winner = Some(model_winner.to_string());
            point.push(rec);
        }
        let measured = point
            .iter()
            .min_by(|a, b| a.total_median_s.unwrap().total_cmp(&b.total_median_s.unwrap()))
            .map(|r| r.strategy.clone());
        for rec in &mut point {
            rec.measured_winner = measured.clone();
        }
        records.extend(point);
    }
    Ok(records)
}

fn run_record(
    command: &str,
    name: &str,
    layer: &LayerConfig,
    s: LoweringStrategy,
    ctx: &Context,
    runs: &[PartitionedRun],
) -> ResultRecord {
    let walls: Vec<f64> = runs.iter().map(|r| r.wall_seconds).collect();
    let wall = Summary::from_samples(&walls);
    let mut rec = ResultRecord::new(command, name, layer, ctx).with_estimate(&ctx.model.estimate(s, layer));
    rec.strategy = s.to_string();
    rec.repetitions = runs.len();
    rec.total_median_s = Some(wall.median);
    rec.total_iqr_s = Some(wall.iqr);
    rec.images_per_s = Some(layer.b as f64 / wall.median);
    rec.footprint_bytes = runs.first().map(|r| r.footprint.peak_bytes);
    rec
}

fn repeat_runs(
    reps: usize,
    mut f: impl FnMut() -> Result<PartitionedRun>,
) -> Result<Vec<PartitionedRun>> {
    for _ in 0..DEFAULT_WARMUP {
        f()?;
    }
    (0..reps.max(1)).map(|_| f()).collect()
}

fn strategy_for(layer: &LayerConfig, arg: StrategyArg, ctx: &Context) -> LoweringStrategy {
    arg.fixed().unwrap_or_else(|| ctx.model.select(layer).strategy)
}

pub fn cmd_sweep_batch(
    name: &str,
    layer: &LayerConfig,
    batches: &[usize],
    strategy: StrategyArg,
    ctx: &Context,
) -> Result<Vec<ResultRecord>> {
    let mut rng = ctx.rng();
    let mut records = Vec::new();
    for &b in batches {
        let layer = LayerConfig::new(layer.n, layer.k, layer.d, layer.o, b)?;
        let s = strategy_for(&layer, strategy, ctx);
        let (batch, bank) = random_problem(&layer, &mut rng);
        let plan = plan_partitions(b, ctx.threads, 1)?;
        let runs = repeat_runs(ctx.reps, || execute_partitioned(&batch, &bank, s, &plan))?;
        let mut rec = run_record("sweep-batch", name, &layer, s, ctx, &runs);
        rec.partitions = Some(1);
        let (rows, inner) = s.dhat_shape(&layer);
        let cols = s.khat_shape(&layer).1;
        let probe = gemm_throughput_probe(
            (rows, inner, cols),
            &GemmConfig::with_threads(ctx.threads),
            ctx.reps,
        )?;
        rec.gemm_flops_per_s = Some(probe.flops_per_second);
        records.push(rec);
    }
    Ok(records)
}

/// A `--partitions` entry: a partition count or the per-image baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionArg {
    PerImage,
    Count(usize),
}

pub fn parse_partition_arg(s: &str) -> Result<PartitionArg> {
    match s.trim().to_ascii_lowercase().as_str() {
        "none" | "baseline" => Ok(PartitionArg::PerImage),
        other => other
            .parse()
            .map(PartitionArg::Count)
            .map_err(|_| Error::Config(format!("partition entry '{s}' is neither a count nor 'none'"))),
    }
}

pub fn cmd_sweep_partitions(
    name: &str,
    layer: &LayerConfig,
    entries: &[PartitionArg],
    strategy: StrategyArg,
    ctx: &Context,
) -> Result<Vec<ResultRecord>> {
    let mut rng = ctx.rng();
    let s = strategy_for(layer, strategy, ctx);
    let (batch, bank) = random_problem(layer, &mut rng);
    let mut records = Vec::new();
    for &entry in entries {
        match entry {
            PartitionArg::PerImage => {
                let runs = repeat_runs(ctx.reps, || execute_per_image(&batch, &bank, s, ctx.threads))?;
                let mut rec = run_record("sweep-partitions", name, layer, s, ctx, &runs);
                rec.note = "per-image baseline, conv layer only".into();
                records.push(rec);
            }
            PartitionArg::Count(p) => {
                let plan = match plan_partitions(layer.b, ctx.threads, p) {
                    Ok(plan) => plan,
                    Err(e) => {
                        eprintln!("warning: skipping p={p}: {e}");
                        continue;
                    }
                };
                let runs = repeat_runs(ctx.reps, || execute_partitioned(&batch, &bank, s, &plan))?;
                let mut rec = run_record("sweep-partitions", name, layer, s, ctx, &runs);
                rec.partitions = Some(p);
                records.push(rec);
            }
        }
    }
    Ok(records)
}

/// Maximum gap over `count` random device pairs with overheads of at most
/// 5 % of the balanced compute time.
pub fn gap_audit(
    layer: &LayerConfig,
    s: LoweringStrategy,
    granularity: usize,
    count: usize,
    max_overhead_fraction: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 1.0f64;
    for _ in 0..count {
        let devices = random_device_pair(&mut rng, layer, s, max_overhead_fraction);
        worst = worst.max(heuristic_gap(layer, s, &devices, granularity)?);
    }
    Ok(worst)
}

/// Largest overhead share of the balanced compute time used by the audit.
pub const AUDIT_OVERHEAD_FRACTION: f64 = 0.05;
/// Gap bound the audit checks against.
pub const AUDIT_GAP_BOUND: f64 = 1.05;

pub fn cmd_schedule(
    name: &str,
    layer: &LayerConfig,
    devices: &[DeviceProfile],
    granularity: usize,
    audit: usize,
    strategy: StrategyArg,
    ctx: &Context,
) -> Result<Vec<ResultRecord>> {
    let s = strategy_for(layer, strategy, ctx);
    let base = || {
        let mut rec = ResultRecord::new("schedule", name, layer, ctx);
        rec.strategy = s.to_string();
        rec
    };
    let proportional = proportional_split(devices, layer.b)?;
    let prop_makespan = simulate_makespan(layer, s, &proportional, devices)?;
    let mut records = Vec::new();
    for (i, dev) in devices.iter().enumerate() {
        let mut rec = base();
        rec.note = format!("proportional images={}", proportional.image_counts[i]);
        rec.device = Some(dev.name.clone());
        rec.device_fraction = Some(proportional.fractions[i]);
        rec.makespan_s = Some(prop_makespan);
        records.push(rec);
    }

    if devices.len() == 2 {
        let swept = optimal_split_sweep(layer, s, devices, granularity)?;
        let mut rec = base();
        rec.note = "sweep optimum".into();
        rec.device = Some(devices[1].name.clone());
        rec.device_fraction = Some(swept.fractions[1]);
        rec.makespan_s = Some(simulate_makespan(layer, s, &swept, devices)?);
        rec.gap = Some(heuristic_gap(layer, s, devices, granularity)?);
        records.push(rec);
        for (p, t) in makespan_curve(layer, s, devices, granularity)? {
            let mut rec = base();
            rec.note = "curve".into();
            rec.device = Some(devices[1].name.clone());
            rec.device_fraction = Some(p);
            rec.makespan_s = Some(t);
            records.push(rec);
        }
    } else if devices.len() == 1 {
        let mut rec = base();
        rec.note = "single device".into();
        rec.device = Some(devices[0].name.clone());
        rec.device_fraction = Some(1.0);
        rec.makespan_s = Some(prop_makespan);
        rec.gap = Some(1.0);
        records.push(rec);
    } else {
        eprintln!("warning: sweep optimum needs exactly 2 devices; reporting the proportional plan only");
    }

    if audit > 0 {
        let worst = gap_audit(layer, s, granularity, audit, AUDIT_OVERHEAD_FRACTION, ctx.seed)?;
        let mut rec = base();
        rec.note = format!("gap audit over {audit} random pairs");
        rec.gap = Some(worst);
        rec.tolerance = Some(AUDIT_GAP_BOUND);
        rec.passed = Some(worst <= AUDIT_GAP_BOUND);
        records.push(rec);
    }
    Ok(records)
}

pub fn write_records<W: Write>(records: &[ResultRecord], format: Format, out: W) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            if records.is_empty() {
                w.serialize(ResultRecord::default()).ok();
            }
            for r in records {
                w.serialize(r).map_err(|e| Error::Resource(format!("csv: {e}")))?;
            }
            w.flush()?;
        }
        Format::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, records)
                .map_err(|e| Error::Resource(format!("json: {e}")))?;
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn read_records_csv(text: &str) -> Result<Vec<ResultRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("csv: {e}")))
}

pub fn read_records_json(text: &str) -> Result<Vec<ResultRecord>> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("json: {e}")))
}

fn selected_layers(common: &CommonArgs) -> Result<LayerFile> {
    let file = match &common.layers {
        Some(path) => LayerFile::load(path)?,
        None => LayerFile::defaults(),
    };
    match &common.layer {
        None => Ok(file),
        Some(name) => {
            let layer = file
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no layer named '{name}'")))?;
            Ok(LayerFile { layers: vec![layer] })
        }
    }
}

fn single_layer(common: &CommonArgs) -> Result<NamedLayer> {
    let file = selected_layers(common)?;
    if file.layers.len() > 1 && common.layer.is_none() {
        eprintln!("note: using first layer '{}'; pick another with --layer", file.layers[0].name);
    }
    Ok(file.layers[0].clone())
}

fn strategies(arg: StrategyArg) -> Vec<LoweringStrategy> {
    arg.fixed().map(|s| vec![s]).unwrap_or_else(|| LoweringStrategy::ALL.to_vec())
}

/// Outcome of one command invocation.
pub struct Outcome {
    pub records: Vec<ResultRecord>,
    pub passed: bool,
    /// Raw text output (device profiles) instead of records.
    pub text: Option<String>,
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let c = &cli.common;
    if c.threads == 0 || c.threads > crate::gemm::MAX_THREADS {
        return Err(Error::Config(format!("--threads must be in 1..={}", crate::gemm::MAX_THREADS)));
    }
    let mut ctx = Context::new(c.threads, c.reps, c.seed);
    if c.calibrate {
        ctx.model = CostModel::new(CostWeights::calibrate(&GemmConfig::with_threads(c.threads))?);
    }
    let done = |records| Outcome { records, passed: true, text: None };
    match &cli.command {
        Command::Verify { tolerance } => {
            let (records, passed) =
                cmd_verify(&selected_layers(c)?, &strategies(c.strategy), *tolerance, &ctx)?;
            Ok(Outcome { records, passed, text: None })
        }
        Command::Estimate => Ok(done(cmd_estimate(&selected_layers(c)?, &ctx))),
        Command::SweepRatio { ratio_range } => {
            let range = parse_ratio_range(ratio_range)?;
            let l = single_layer(c)?;
            Ok(done(cmd_sweep_ratio(&l.name, &l.layer, range, &strategies(c.strategy), &ctx)?))
        }
        Command::SweepBatch { batch } => {
            let l = single_layer(c)?;
            Ok(done(cmd_sweep_batch(&l.name, &l.layer, batch, c.strategy, &ctx)?))
        }
        Command::SweepPartitions { partitions, batch } => {
            let l = single_layer(c)?;
            let layer = match batch {
                Some(b) => LayerConfig::new(l.layer.n, l.layer.k, l.layer.d, l.layer.o, *b)?,
                None => l.layer,
            };
            let entries =
                partitions.iter().map(|p| parse_partition_arg(p)).collect::<Result<Vec<_>>>()?;
            Ok(done(cmd_sweep_partitions(&l.name, &layer, &entries, c.strategy, &ctx)?))
        }
        Command::Schedule { devices, granularity, audit } => {
            let l = single_layer(c)?;
            let devices = load_profiles(devices)?;
            Ok(done(cmd_schedule(&l.name, &l.layer, &devices, *granularity, *audit, c.strategy, &ctx)?))
        }
        Command::CaptureProfile { name } => {
            let dev = DeviceProfile::capture_local(name.clone(), c.threads, c.reps)?;
            Ok(Outcome { records: Vec::new(), passed: true, text: Some(format_profiles(&[dev])) })
        }
    }
}

fn emit(cli: &Cli, outcome: &Outcome) -> Result<()> {
    let mut buf = Vec::new();
    match &outcome.text {
        Some(text) => buf.extend_from_slice(text.as_bytes()),
        None => write_records(&outcome.records, cli.common.format, &mut buf)?,
    }
    match &cli.common.out {
        Some(path) => std::fs::write(path, buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            e.print().ok();
            return code;
        }
    };
    match execute(&cli).and_then(|outcome| emit(&cli, &outcome).map(|_| outcome)) {
        Ok(outcome) if outcome.passed => EXIT_OK,
        Ok(_) => {
            eprintln!("verification failed");
            EXIT_VERIFY_FAILED
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_range_parsing() {
        assert_eq!(parse_ratio_range("1/8:8:7").unwrap(), (0.125, 8.0, 7));
        assert_eq!(parse_ratio_range("1:1:1").unwrap(), (1.0, 1.0, 1));
        for bad in ["1:2", "0:1:3", "2:1:3", "a:1:2", "1:2:0", "1/0:2:2"] {
            assert!(parse_ratio_range(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn ratio_points_are_log_spaced() {
        let pts = ratio_points(0.125, 8.0, 7);
        assert_eq!(pts.len(), 7);
        assert!((pts[3] - 1.0).abs() < 1e-12);
        assert!((pts[6] - 8.0).abs() < 1e-12);
        assert_eq!(ratio_points(1.0, 4.0, 1), vec![1.0]);
    }

    #[test]
    fn layer_at_ratio_keeps_the_product() {
        let t = LayerConfig::new(13, 3, 64, 64, 2).unwrap();
        let l = layer_at_ratio(&t, 16.0);
        assert_eq!((l.d, l.o), (256, 16));
        assert_eq!(layer_at_ratio(&t, 1.0), t);
    }

    #[test]
    fn partition_entries() {
        assert_eq!(parse_partition_arg("none").unwrap(), PartitionArg::PerImage);
        assert_eq!(parse_partition_arg("4").unwrap(), PartitionArg::Count(4));
        assert!(parse_partition_arg("four").is_err());
    }

    #[test]
    fn single_ratio_step_gives_one_record_per_strategy() {
        let ctx = Context::new(1, 1, 7);
        let t = LayerConfig::new(8, 3, 4, 4, 1).unwrap();
        let recs = cmd_sweep_ratio("t", &t, (1.0, 1.0, 1), &LoweringStrategy::ALL, &ctx).unwrap();
        assert_eq!(recs.len(), 3);
        let names: Vec<_> = recs.iter().map(|r| r.strategy.as_str()).collect();
        assert_eq!(names, ["type1", "type2", "type3"]);
        assert!(recs.iter().all(|r| r.measured_winner.is_some() && r.model_winner.is_some()));
    }

    #[test]
    fn csv_and_json_carry_the_same_records() {
        let ctx = Context::new(1, 1, 9);
        let layers = LayerFile::parse("a 6 3 2 3 2\nb 7 1 3 2 1\n", "t").unwrap();
        let (mut records, passed) = cmd_verify(&layers, &LoweringStrategy::ALL, 1e-3, &ctx).unwrap();
        assert!(passed);
        records.extend(cmd_estimate(&layers, &ctx));
        let mut csv_buf = Vec::new();
        write_records(&records, Format::Csv, &mut csv_buf).unwrap();
        let mut json_buf = Vec::new();
        write_records(&records, Format::Json, &mut json_buf).unwrap();
        let from_csv = read_records_csv(std::str::from_utf8(&csv_buf).unwrap()).unwrap();
        let from_json = read_records_json(std::str::from_utf8(&json_buf).unwrap()).unwrap();
        assert_eq!(from_csv, records);
        assert_eq!(from_json, records);
    }

    #[test]
    fn zero_tolerance_fails_on_nontrivial_layers() {
        let ctx = Context::new(1, 1, 11);
        let layers = LayerFile::parse("a 9 3 16 4 2\n", "t").unwrap();
        let (_, passed) = cmd_verify(&layers, &LoweringStrategy::ALL, 0.0, &ctx).unwrap();
        assert!(!passed);
    }

    #[test]
    fn unit_kernel_layer_passes_tight_tolerance() {
        let ctx = Context::new(1, 1, 12);
        let layers = LayerFile::parse("a 13 1 64 16 2\n", "t").unwrap();
        let (_, passed) = cmd_verify(&layers, &LoweringStrategy::ALL, 1e-6, &ctx).unwrap();
        assert!(passed);
    }

    #[test]
    fn schedule_reports_proportional_fraction() {
        let ctx = Context::new(1, 1, 13);
        let layer = LayerConfig::new(13, 3, 16, 16, 30).unwrap();
        let devices = [
            DeviceProfile::new("cpu", 1.0, 0.0).unwrap(),
            DeviceProfile::new("gpu", 2.0, 0.0).unwrap(),
        ];
        let recs =
            cmd_schedule("l", &layer, &devices, 10, 50, StrategyArg::Type1, &ctx).unwrap();
        let cpu = recs.iter().find(|r| r.device.as_deref() == Some("cpu")).unwrap();
        assert!((cpu.device_fraction.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(recs.iter().filter(|r| r.note == "curve").count(), 11);
        let audit = recs.last().unwrap();
        assert_eq!(audit.passed, Some(true));

        let single = cmd_schedule("l", &layer, &devices[..1], 10, 0, StrategyArg::Type1, &ctx).unwrap();
        assert_eq!(single.last().unwrap().gap, Some(1.0));
    }
}
