//! Reading and writing scans: NIfTI and the raw3d container, resampling to a
//! fixed grid and intensity normalization.
//!
//!     cargo run --release --example volume_io

use synergyseg::phantom::{generate_phantom, PhantomSpec};
use synergyseg::volume::{load_case, load_volume, normalize_intensity, resample_to_shape, save_mask, save_volume, LoadOptions};

fn main() -> synergyseg::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut spec = PhantomSpec::new([40, 40, 12], 0.5, 0.1, 3);
    spec.spacing = [0.8, 0.8, 3.0];
    let (v, m) = generate_phantom(&spec)?;

    for name in ["scan.nii.gz", "scan.nii", "scan.raw3d"] {
        let path = dir.path().join(name);
        save_volume(&v, &path)?;
        let back = load_volume(&path)?;
        // NIfTI keeps voxel sizes as 32-bit floats
        let ds = (0..3).map(|a| (back.spacing[a] - v.spacing[a]).abs()).fold(0.0, f64::max);
        println!(
            "{name:<12} {:>7} bytes, data identical: {}, spacing off by {ds:.1e} mm",
            std::fs::metadata(&path).unwrap().len(),
            back.data == v.data
        );
    }

    let mask_path = dir.path().join("mask.nii.gz");
    save_mask(&m, &mask_path)?;
    let (v2, m2) = load_case(&dir.path().join("scan.nii.gz"), Some(&mask_path), LoadOptions::default())?;
    let m2 = m2.unwrap();
    println!("case {:?} at {:?} mm, {} foreground voxels", v2.shape(), v2.spacing, m2.foreground_count());

    // the physical extent is kept, so spacing scales with the grid
    let r = resample_to_shape(&v2, [32, 32, 16]);
    let rm = resample_to_shape(&m2, [32, 32, 16]);
    println!("resampled to {:?} at {:?} mm, {} foreground voxels", r.shape(), r.spacing, rm.foreground_count());

    let n = normalize_intensity(&r);
    let len = n.data.len() as f64;
    let mean = n.data.as_slice().iter().map(|&x| x as f64).sum::<f64>() / len;
    let var = n.data.as_slice().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / len;
    println!("normalized intensities: mean {mean:.2e}, std {:.4}", var.sqrt());
    Ok(())
}
