//! Train on mild phantoms, then apply the saved checkpoint unchanged to a
//! corpus with much more nodular boundaries and compare against the
//! in-domain test split.
//!
//!     cargo run --release --example zero_shot -- [epochs]

use std::path::Path;

use synergyseg::autoconfig::{fingerprint_dataset, plan_configuration, MemoryBudget, PlanConfig};
use synergyseg::metrics::{evaluate_dataset, render_table, MetricsReport};
use synergyseg::phantom::{generate_corpus, PhantomSpec};
use synergyseg::synergy_net::{Checkpoint, CheckpointModel};
use synergyseg::training::{postprocess, predict_case, train, TrainConfig};
use synergyseg::volume::{load_volume, save_mask, DatasetManifest, Partition};

fn predict_split(model: &CheckpointModel, plan: &PlanConfig, m: &DatasetManifest, out: &Path) -> synergyseg::Result<MetricsReport> {
    std::fs::create_dir_all(out).expect("prediction dir");
    for c in m.cases_in(Partition::Test) {
        let v = load_volume(&m.resolve(&c.volume))?;
        save_mask(&postprocess(&predict_case(model, plan, &v)?, 0.5), &out.join(format!("{}.raw3d", c.id)))?;
    }
    evaluate_dataset(out, m, Partition::Test)
}

fn main() -> synergyseg::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    let source = generate_corpus(20, &PhantomSpec::new([32, 32, 16], 0.2, 0.1, 0), 1, &root.join("source"))?;
    let target = generate_corpus(20, &PhantomSpec::new([32, 32, 16], 0.8, 0.1, 0), 2, &root.join("target"))?;

    let plan = plan_configuration(&fingerprint_dataset(&source)?, &MemoryBudget::from_gb(8.0)?)?;
    let cfg = TrainConfig {
        lr_init: 3e-3,
        lr_min: 1.5e-4,
        max_epochs: epochs,
        patience: epochs,
        steps_per_epoch: 10,
        ..TrainConfig::default()
    };
    let out = train(&source, &plan, &cfg, &mut |r| println!("epoch {:>2} val dice {:.4}", r.epoch, r.val_dice))?;

    // go through the checkpoint file, as a separate process would
    let ckpt = root.join("checkpoint.json");
    out.checkpoint.save(&ckpt)?;
    let loaded = Checkpoint::load(&ckpt)?;
    let model = loaded.model()?;

    let in_domain = predict_split(&model, &loaded.plan, &source, &root.join("pred_source"))?;
    let zero_shot = predict_split(&model, &loaded.plan, &target, &root.join("pred_target"))?;
    println!(
        "\n{}",
        render_table(&[("in-domain".to_string(), in_domain), ("zero-shot".to_string(), zero_shot)])
    );
    Ok(())
}
