//! Splits a batch across two devices in proportion to their FLOP/s and
//! compares the makespan with the best split on a grid.

use convlower::scheduler::{
    heuristic_gap, makespan_curve, proportional_split, simulate_makespan, DeviceProfile,
};
use convlower::{LayerConfig, LoweringStrategy};

fn main() -> convlower::Result<()> {
    let layer = LayerConfig::new(15, 3, 256, 384, 256)?;
    let s = LoweringStrategy::Type1;
    let devices = [
        DeviceProfile::new("cpu", 0.5e12, 2e-3)?,
        DeviceProfile::new("gpu", 1.5e12, 5e-3)?,
    ];

    let plan = proportional_split(&devices, layer.b)?;
    println!(
        "proportional: fractions {:?} images {:?} makespan {:.4} s",
        plan.fractions,
        plan.image_counts,
        simulate_makespan(&layer, s, &plan, &devices)?
    );
    for (p, t) in makespan_curve(&layer, s, &devices, 10)? {
        println!("  gpu share {p:.1}: {t:.4} s");
    }
    println!("gap to grid optimum: {:.4}", heuristic_gap(&layer, s, &devices, 100)?);
    Ok(())
}
