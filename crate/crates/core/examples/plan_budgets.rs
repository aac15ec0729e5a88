//! How the planner reacts to the dataset and the memory budget. The
//! fingerprints are written by hand, so nothing touches the disk.
//!
//!     cargo run --release --example plan_budgets

use synergyseg::autoconfig::{default_plan, estimate_memory, plan_configuration, DatasetFingerprint, MemoryBudget, PlanConfig};

fn fingerprint(shape: [usize; 3]) -> DatasetFingerprint {
    DatasetFingerprint {
        median_shape: shape,
        median_spacing: [1.0, 1.0, 2.5],
        intensity_p0_5: -100.0,
        intensity_p99_5: 250.0,
        intensity_mean: 90.0,
        intensity_std: 40.0,
        foreground_fraction: 0.08,
        n_cases: 40,
    }
}

fn describe(plan: &PlanConfig) -> String {
    format!(
        "{:?} patch {:?} batch {} stages {} channels {:?} lowres {:?} ~{:.1} MB",
        plan.variant,
        plan.patch_size,
        plan.batch_size,
        plan.n_stages,
        plan.channels_per_stage,
        plan.lowres_scale,
        estimate_memory(plan) as f64 / 1e6
    )
}

fn main() -> synergyseg::Result<()> {
    for shape in [[32, 32, 16], [96, 96, 48], [256, 256, 80]] {
        let fp = fingerprint(shape);
        println!("median shape {shape:?}");
        for gb in [24.0, 8.0, 1.0, 0.1, 0.01] {
            match plan_configuration(&fp, &MemoryBudget::from_gb(gb)?) {
                Ok(plan) => println!("  {gb:>5} GB  {}", describe(&plan)),
                Err(e) => println!("  {gb:>5} GB  {e}"),
            }
        }
        println!("  default   {}", describe(&default_plan(&fp)));
    }

    let plan = plan_configuration(&fingerprint([96, 96, 48]), &MemoryBudget::from_gb(8.0)?)?;
    println!("\n{}", serde_json::to_string_pretty(&plan).unwrap());
    for (s, shape) in plan.stage_shapes(plan.patch_size).iter().enumerate() {
        println!("stage {s}: {shape:?} x {} channels", plan.channels_per_stage[s]);
    }
    Ok(())
}
