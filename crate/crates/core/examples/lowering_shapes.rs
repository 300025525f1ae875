//! Shapes of the lowered matrices and the exact work each strategy does.

use convlower::lowering::{lift_counted, lower, LoweringStrategy};
use convlower::gemm::{multiply, GemmConfig};
use convlower::{DataBatch, KernelBank, LayerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> convlower::Result<()> {
    let layer = LayerConfig::new(9, 3, 4, 6, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = DataBatch::random(layer.b, layer.n, layer.d, &mut rng);
    let bank = KernelBank::random(layer.k, layer.d, layer.o, &mut rng);

    for s in LoweringStrategy::ALL {
        let lowered = lower(&batch, &bank, s)?;
        let rhat = multiply(&lowered.dhat, &lowered.khat, &GemmConfig::default())?;
        let (_, adds) = lift_counted(&rhat, s, &layer)?;
        println!(
            "{s}: D^ {:?}  K^ {:?}  R^ {:?}  written {}  lift adds {}",
            lowered.dhat.shape(),
            lowered.khat.shape(),
            rhat.shape(),
            lowered.elements_written,
            adds
        );
    }
    Ok(())
}
