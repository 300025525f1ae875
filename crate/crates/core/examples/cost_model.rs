//! Cost-model estimates, automatic strategy choice and the Type1/Type3
//! crossover in d/o.
//!
//! Pass `--calibrate` to fit the weights on this machine first.

use convlower::cost::{CostModel, CostWeights};
use convlower::gemm::GemmConfig;
use convlower::layers::LayerFile;

fn main() -> convlower::Result<()> {
    let model = if std::env::args().any(|a| a == "--calibrate") {
        let w = CostWeights::calibrate(&GemmConfig::default())?;
        println!("calibrated alpha={:.3e} s/elem beta={:.3e} s/flop", w.alpha, w.beta);
        CostModel::new(w)
    } else {
        CostModel::default()
    };

    for l in &LayerFile::defaults().layers {
        let choice = model.select(&l.layer);
        print!("{:6} d/o={:<6.3} ->{}  ", l.name, choice.ratio, choice.strategy);
        for e in &choice.estimates {
            print!(" {}={:.3e}s", e.strategy, e.total_score);
        }
        println!("  crossover d/o={:.3}", model.crossover_ratio(&l.layer).ratio());
    }
    Ok(())
}
