//! Whole-volume inference from a patch network: tile layout, Gaussian blending
//! weights, and a prediction on a volume larger than the patch.
//!
//!     cargo run --release --example sliding_window

use synergyseg::autoconfig::{plan_configuration, DatasetFingerprint, MemoryBudget};
use synergyseg::phantom::{generate_phantom, PhantomSpec};
use synergyseg::synergy_net::{NetOptions, SynergyUNet};
use synergyseg::training::{gaussian_weights, postprocess, sliding_window_predict, tile_origins, tile_starts, weight_normalizer};
use synergyseg::volume::{normalize_intensity, Volume};

fn main() -> synergyseg::Result<()> {
    for (len, patch) in [(32, 32), (40, 32), (70, 32), (100, 48)] {
        println!("axis {len:>3}, patch {patch}: starts {:?}", tile_starts(len, patch));
    }

    let patch = [16, 16, 8];
    let w = gaussian_weights(patch);
    println!(
        "\nweights for {patch:?}: centre {:.3}, corner {:.3}",
        w.get(8, 8, 4),
        w.get(0, 0, 0)
    );
    let shape = [40, 36, 20];
    let norm = weight_normalizer(shape, patch);
    // inference reflect-pads first, so real voxels never sit in a tile corner
    println!(
        "{} tiles over {shape:?}, summed weight {:.3} at the centre, {:.1e} at the corner",
        tile_origins(shape, patch).len(),
        norm.get(20, 18, 10),
        norm.get(0, 0, 0)
    );

    let fp = DatasetFingerprint {
        median_shape: [16, 16, 8],
        median_spacing: [1.0; 3],
        intensity_p0_5: 0.0,
        intensity_p99_5: 1.0,
        intensity_mean: 0.5,
        intensity_std: 0.2,
        foreground_fraction: 0.1,
        n_cases: 1,
    };
    let plan = plan_configuration(&fp, &MemoryBudget::from_gb(1.0)?)?;
    let net = SynergyUNet::<f32>::from_plan(&plan, 1, NetOptions::default(), 3)?;
    let (v, _) = generate_phantom(&PhantomSpec::new(shape, 0.3, 0.1, 1))?;
    let v: Volume = normalize_intensity(&v);
    let prob = sliding_window_predict(&v, &net, &plan)?;
    let mean = prob.as_slice().iter().map(|&p| p as f64).sum::<f64>() / prob.len() as f64;
    println!("untrained network, patch {:?}: mean probability {mean:.3} over {:?}", plan.patch_size, prob.shape());
    let mask = postprocess(&Volume::new(prob, v.spacing)?, 0.5);
    println!("largest component after thresholding: {} voxels", mask.foreground_count());
    Ok(())
}
