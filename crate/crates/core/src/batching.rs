//! Partitioned execution of a mini-batch.
//!
//! A batch of `b` images is cut into `p` contiguous partitions. Each
//! partition is lowered, multiplied and lifted by its own worker, and its
//! multiply uses `threads_per_partition` GEMM workers, so that the total
//! number of busy threads never exceeds the thread budget. `p = 1` is one
//! lowering of the whole batch and a single GEMM with every thread; the
//! per-image baseline instead lowers images one at a time, each followed by
//! a GEMM using every thread.

use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::estimate;
use crate::error::{Error, Result};
use crate::gemm::{split_even, GemmConfig};
use crate::lowering::{convolve_images, lower_kernels, LoweringStrategy, PhaseTimings};
use crate::tensor::{DataBatch, KernelBank, LayerConfig, OutputBatch};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub total_threads: usize,
    /// Images per partition; sums to `b`, sizes differ by at most one.
    pub partition_sizes: Vec<usize>,
    /// GEMM workers per partition; sums to `total_threads`.
    pub threads_per_partition: Vec<usize>,
}

impl PartitionPlan {
    pub fn partitions(&self) -> usize {
        self.partition_sizes.len()
    }

    pub fn batch_size(&self) -> usize {
        self.partition_sizes.iter().sum()
    }

    pub fn largest_partition(&self) -> usize {
        self.partition_sizes.iter().copied().max().unwrap_or(0)
    }
}

/// Splits `b` images into `p` partitions and `total_threads` workers among
/// them. Remainders of both go to the lowest-index partitions.
pub fn plan_partitions(b: usize, total_threads: usize, p: usize) -> Result<PartitionPlan> {
    if b == 0 || total_threads == 0 {
        return Err(Error::Config(format!(
            "batch size and threads must be >= 1 (b={b}, threads={total_threads})"
        )));
    }
    if p == 0 || p > b || p > total_threads {
        return Err(Error::Config(format!(
            "partition count {p} must be in 1..={} (b={b}, threads={total_threads})",
            b.min(total_threads)
        )));
    }
    Ok(PartitionPlan {
        total_threads,
        partition_sizes: split_even(b, p).into_iter().map(|r| r.len()).collect(),
        threads_per_partition: split_even(total_threads, p).into_iter().map(|r| r.len()).collect(),
    })
}

/// Memory held by lowered data matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub strategy: LoweringStrategy,
    pub partition_size: usize,
    pub partitions: usize,
    /// `D̂` of one partition.
    pub lowered_bytes_per_partition: u64,
    /// `K̂`, lowered once and shared by all partitions.
    pub fixed_bytes: u64,
    /// `partitions * lowered_bytes_per_partition + fixed_bytes`.
    pub peak_bytes: u64,
}

/// Footprint of lowering `partition_size` images at a time, with as many
/// partitions resident as it takes to cover `layer.b`.
pub fn footprint(
    strategy: LoweringStrategy,
    layer: &LayerConfig,
    partition_size: usize,
) -> Result<FootprintReport> {
    if partition_size == 0 {
        return Err(Error::Config("partition size must be >= 1".into()));
    }
    layer.validate()?;
    Ok(footprint_with(strategy, layer, partition_size, layer.b.div_ceil(partition_size)))
}

fn footprint_with(
    strategy: LoweringStrategy,
    layer: &LayerConfig,
    partition_size: usize,
    partitions: usize,
) -> FootprintReport {
    let per_partition = estimate(strategy, &layer.with_batch(partition_size)).lowered_bytes;
    let (kr, kc) = strategy.khat_shape(layer);
    let fixed_bytes = (kr * kc * std::mem::size_of::<f32>()) as u64;
    FootprintReport {
        strategy,
        partition_size,
        partitions,
        lowered_bytes_per_partition: per_partition,
        fixed_bytes,
        peak_bytes: partitions as u64 * per_partition + fixed_bytes,
    }
}

/// Result of a partitioned run.
#[derive(Clone, Debug)]
pub struct PartitionedRun {
    pub output: OutputBatch,
    /// End-to-end wall time, seconds, including the kernel lowering.
    pub wall_seconds: f64,
    /// Phase timings reported by each partition.
    pub partition_timings: Vec<PhaseTimings>,
    pub footprint: FootprintReport,
    /// Multiply-phase flops summed over partitions.
    pub gemm_flops: u64,
}

/// Executes the convolution partition by partition, all partitions
/// concurrently.
pub fn execute_partitioned(
    batch: &DataBatch,
    bank: &KernelBank,
    strategy: LoweringStrategy,
    plan: &PartitionPlan,
) -> Result<PartitionedRun> {
    let layer = LayerConfig::of(batch, bank)?;
    if plan.batch_size() != layer.b {
        return Err(Error::Config(format!(
            "plan covers {} images but the batch has {}",
            plan.batch_size(),
            layer.b
        )));
    }
    let start = Instant::now();
    let khat = lower_kernels(bank, strategy);

    let mut jobs = Vec::with_capacity(plan.partitions());
    let mut offset = 0;
    for (&size, &threads) in plan.partition_sizes.iter().zip(&plan.threads_per_partition) {
        jobs.push((&batch.members()[offset..offset + size], GemmConfig::with_threads(threads)));
        offset += size;
    }

    let run = |(images, gemm): (&[crate::tensor::Tensor3], GemmConfig)| {
        convolve_images(images, bank, &khat, strategy, &gemm)
    };
    let last = jobs.pop().expect("plan has at least one partition");
    let results: Vec<_> = thread::scope(|s| {
        let handles: Vec<_> = jobs.into_iter().map(|job| s.spawn(move || run(job))).collect();
        let tail = run(last);
        let mut all: Vec<_> = handles
            .into_iter()
            .map(|h| h.join().expect("partition worker panicked"))
            .collect();
        all.push(tail);
        all
    });
    let wall_seconds = start.elapsed().as_secs_f64();

    let mut outputs = Vec::with_capacity(results.len());
    let mut partition_timings = Vec::with_capacity(results.len());
    for r in results {
        let (out, t) = r?;
        outputs.push(out);
        partition_timings.push(t);
    }
    let gemm_flops = plan
        .partition_sizes
        .iter()
        .map(|&size| estimate(strategy, &layer.with_batch(size)).gemm_flops)
        .sum();
    Ok(PartitionedRun {
        output: OutputBatch::concat(outputs)?,
        wall_seconds,
        partition_timings,
        footprint: footprint_with(strategy, &layer, plan.largest_partition(), plan.partitions()),
        gemm_flops,
    })
}

/// Per-image baseline: images are lowered and multiplied one after another,
/// each multiply using all `threads`.
pub fn execute_per_image(
    batch: &DataBatch,
    bank: &KernelBank,
    strategy: LoweringStrategy,
    threads: usize,
) -> Result<PartitionedRun> {
    let layer = LayerConfig::of(batch, bank)?;
    let start = Instant::now();
    let khat = lower_kernels(bank, strategy);
    let gemm = GemmConfig::with_threads(threads);
    let mut outputs = Vec::with_capacity(layer.b);
    let mut partition_timings = Vec::with_capacity(layer.b);
    for image in batch.members().chunks(1) {
        let (out, t) = convolve_images(image, bank, &khat, strategy, &gemm)?;
        outputs.push(out);
        partition_timings.push(t);
    }
    Ok(PartitionedRun {
        output: OutputBatch::concat(outputs)?,
        wall_seconds: start.elapsed().as_secs_f64(),
        partition_timings,
        footprint: footprint_with(strategy, &layer, 1, 1),
        gemm_flops: layer.b as u64 * estimate(strategy, &layer.with_batch(1)).gemm_flops,
    })
}
