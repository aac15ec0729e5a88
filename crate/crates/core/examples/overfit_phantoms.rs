//! Overfit a handful of phantoms with an auto-configured plan and report the
//! postprocessed Dice on the training cases.
//!
//!     cargo run --release --example overfit_phantoms -- [steps] [lr]

use std::time::Instant;

use synergyseg::autoconfig::{fingerprint_dataset, plan_configuration, MemoryBudget};
use synergyseg::metrics::overlap_metrics;
use synergyseg::phantom::{generate_corpus, PhantomSpec};
use synergyseg::training::{load_prepared, postprocess, predict_case, train_prepared, TrainConfig};
use synergyseg::volume::{load_case, LoadOptions, Partition};

fn main() -> synergyseg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);

    let dir = tempfile::tempdir().expect("tempdir");
    let mut manifest = generate_corpus(5, &PhantomSpec::new([32, 32, 16], 0.3, 0.1, 0), 0, dir.path())?;
    // every case trains and validates
    for p in manifest.split.values_mut() {
        *p = Partition::Train;
    }
    let fp = fingerprint_dataset(&manifest)?;
    let plan = plan_configuration(&fp, &MemoryBudget::from_gb(8.0)?)?;
    println!("plan: {}", serde_json::to_string(&plan).unwrap());

    let cases = load_prepared(&manifest, Partition::Train, &plan)?;
    let steps_per_epoch = 10;
    let cfg = TrainConfig {
        lr_init: lr,
        lr_min: lr * 0.05,
        max_epochs: steps / steps_per_epoch,
        patience: steps / steps_per_epoch,
        steps_per_epoch,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train_prepared(&cases, &cases, &plan, &cfg, &mut |r| {
        println!(
            "epoch {:>3} loss {:.4} val dice {:.4} perplexity {:.2} ({:.0}s)",
            r.epoch,
            r.train_loss,
            r.val_dice,
            r.perplexity,
            t0.elapsed().as_secs_f64()
        )
    })?;

    let mut sum = 0.0;
    for c in &manifest.cases {
        let (v, m) = load_case(&manifest.resolve(&c.volume), c.mask.as_deref().map(|p| manifest.resolve(p)).as_deref(), LoadOptions::default())?;
        let mask = postprocess(&predict_case(&out.model, &plan, &v)?, 0.5);
        let d = overlap_metrics(&mask, &m.unwrap())?.dice;
        println!("{}: dice {d:.4}", c.id);
        sum += d;
    }
    println!("mean training dice {:.4} after {} steps", sum / manifest.cases.len() as f64, cfg.max_epochs * steps_per_epoch);
    Ok(())
}
