//! Runs all three lowerings on one random layer and checks them against the
//! direct convolution.
//!
//! cargo run --example verify_strategies

use convlower::tensor::direct_convolve_batch;
use convlower::{convolve_lowered, DataBatch, KernelBank, LoweringStrategy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> convlower::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, k, d, o, b) = (20, 5, 16, 32, 4);
    let batch = DataBatch::random(b, n, d, &mut rng);
    let bank = KernelBank::random(k, d, o, &mut rng);
    let oracle = direct_convolve_batch(&batch, &bank)?;

    println!("layer n={n} k={k} d={d} o={o} b={b}");
    for s in LoweringStrategy::ALL {
        let (out, t) = convolve_lowered(&batch, &bank, s, 1)?;
        println!(
            "{s}: rel err {:.2e}  lower {:.3} ms  gemm {:.3} ms  lift {:.3} ms",
            out.max_relative_error(&oracle),
            t.lower * 1e3,
            t.multiply * 1e3,
            t.lift * 1e3
        );
    }
    Ok(())
}
