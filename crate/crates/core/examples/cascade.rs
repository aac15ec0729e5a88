//! Two-network cascade: a low-resolution net segments a downsampled copy of
//! each case, and the full-resolution net refines using that prior as a
//! second input channel. The plan is written by hand so the run stays small.
//!
//!     cargo run --release --example cascade -- [epochs]

use synergyseg::autoconfig::{PlanConfig, Variant};
use synergyseg::metrics::overlap_metrics;
use synergyseg::phantom::{generate_corpus, PhantomSpec};
use synergyseg::synergy_net::{lowres_shape, CheckpointModel};
use synergyseg::training::{postprocess, predict_case, train, TrainConfig};
use synergyseg::volume::{load_case, LoadOptions, Partition};

fn main() -> synergyseg::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let dir = tempfile::tempdir().expect("tempdir");
    let manifest = generate_corpus(12, &PhantomSpec::new([32, 32, 16], 0.3, 0.1, 0), 4, dir.path())?;

    let plan = PlanConfig {
        variant: Variant::Cascade3d,
        patch_size: [16, 16, 8],
        batch_size: 2,
        n_stages: 3,
        channels_per_stage: vec![8, 16, 32],
        pooling_per_axis_per_stage: vec![[0, 0, 0], [1, 1, 1], [1, 1, 0]],
        lowres_scale: Some([2, 2, 2]),
        codebook_size: 32,
        latent_dim: 16,
        attention_heads: 4,
        target_shape: [32, 32, 16],
    };
    plan.validate()?;
    println!(
        "low-resolution grid {:?}, full-resolution grid {:?}",
        lowres_shape(plan.target_shape, plan.lowres_scale.unwrap()),
        plan.target_shape
    );

    let cfg = TrainConfig {
        lr_init: 3e-3,
        lr_min: 1.5e-4,
        max_epochs: epochs,
        patience: epochs,
        steps_per_epoch: 10,
        ..TrainConfig::default()
    };
    let out = train(&manifest, &plan, &cfg, &mut |r| {
        println!(
            "{:>8} epoch {:>2} loss {:.4} val dice {:.4}",
            r.stage.as_deref().unwrap_or(""),
            r.epoch,
            r.train_loss,
            r.val_dice
        )
    })?;
    let CheckpointModel::Cascade(c) = &out.model else {
        unreachable!("cascade plans train cascades")
    };
    println!(
        "refining net takes {} channels; best epoch {} (val dice {:.4})",
        c.fullres.config.in_channels, out.best_epoch, out.best_val_dice
    );

    for case in manifest.cases_in(Partition::Test) {
        let mask = case.mask.as_deref().map(|p| manifest.resolve(p));
        let (v, gt) = load_case(&manifest.resolve(&case.volume), mask.as_deref(), LoadOptions::default())?;
        let pred = postprocess(&predict_case(&out.model, &plan, &v)?, 0.5);
        println!("{}: test dice {:.4}", case.id, overlap_metrics(&pred, &gt.unwrap())?.dice);
    }
    Ok(())
}
