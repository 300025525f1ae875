//! Splits a batch into p partitions that share the thread budget, and
//! compares with lowering one image at a time.

use convlower::batching::{execute_partitioned, execute_per_image, plan_partitions};
use convlower::{DataBatch, KernelBank, LayerConfig, LoweringStrategy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> convlower::Result<()> {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8);
    let layer = LayerConfig::new(15, 3, 64, 64, 16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = DataBatch::random(layer.b, layer.n, layer.d, &mut rng);
    let bank = KernelBank::random(layer.k, layer.d, layer.o, &mut rng);
    let s = LoweringStrategy::Type1;

    let base = execute_per_image(&batch, &bank, s, threads)?;
    println!("per-image: {:8.1} img/s", layer.b as f64 / base.wall_seconds);

    for p in [1, 2, 4, 8] {
        let Ok(plan) = plan_partitions(layer.b, threads, p) else {
            continue;
        };
        let run = execute_partitioned(&batch, &bank, s, &plan)?;
        println!(
            "p={p}: {:8.1} img/s  sizes {:?}  threads {:?}  peak {} KiB  same output {}",
            layer.b as f64 / run.wall_seconds,
            plan.partition_sizes,
            plan.threads_per_partition,
            run.footprint.peak_bytes / 1024,
            run.output == base.output
        );
    }
    Ok(())
}
