//! GEMM throughput against thread count, and a bit-identity check across
//! thread counts.
//!
//! cargo run --release --example gemm_scaling -- 512

use convlower::gemm::{gemm_throughput_probe, multiply, GemmConfig, Mat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> convlower::Result<()> {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(384);
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);

    let mut baseline = None;
    for threads in [1, 2, 4, 8].into_iter().filter(|&t| t <= cores.max(1) * 2) {
        let p = gemm_throughput_probe((size, size, size), &GemmConfig::with_threads(threads), 3)?;
        let gf = p.flops_per_second / 1e9;
        let base = *baseline.get_or_insert(gf);
        println!("threads {threads}: {gf:7.2} GFLOP/s  speedup {:.2}", gf / base);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Mat::random(size, 200, &mut rng);
    let b = Mat::random(200, size / 2, &mut rng);
    let one = multiply(&a, &b, &GemmConfig::with_threads(1))?;
    let four = multiply(&a, &b, &GemmConfig::with_threads(4))?;
    println!("1 vs 4 threads bit-identical: {}", one == four);
    Ok(())
}
