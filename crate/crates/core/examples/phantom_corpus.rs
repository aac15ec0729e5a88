//! Generate a small phantom corpus, then look at what came out: split sizes,
//! foreground fraction and connected components per case.
//!
//!     cargo run --release --example phantom_corpus -- [out_dir]

use std::path::PathBuf;

use synergyseg::phantom::{generate_mixed_corpus, generate_phantom, label_components, PhantomSpec};
use synergyseg::volume::{load_case, LoadOptions, Partition};

fn main() -> synergyseg::Result<()> {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());

    // one phantom in memory, at three severities
    for severity in [0.0, 0.5, 1.0] {
        let (v, m) = generate_phantom(&PhantomSpec::new([32, 32, 16], severity, 0.1, 7))?;
        let (_, sizes) = label_components(&m.data);
        let mean = v.data.as_slice().iter().map(|&x| x as f64).sum::<f64>() / v.data.len() as f64;
        println!(
            "severity {severity:.1}: {} foreground voxels in {} component(s), mean intensity {mean:.3}",
            m.foreground_count(),
            sizes.len()
        );
    }

    let templates = [PhantomSpec::new([32, 32, 16], 0.4, 0.1, 0), PhantomSpec::new([48, 48, 24], 0.4, 0.1, 0)];
    let manifest = generate_mixed_corpus(10, &templates, 1, &out)?;
    println!("\nwrote {} cases to {}", manifest.cases.len(), out.display());
    for part in [Partition::Train, Partition::Val, Partition::Test] {
        let ids: Vec<&str> = manifest.cases_in(part).iter().map(|c| c.id.as_str()).collect();
        println!("{part:?}: {}", ids.join(" "));
    }
    for c in &manifest.cases {
        let mask = c.mask.as_deref().map(|p| manifest.resolve(p));
        let (v, m) = load_case(&manifest.resolve(&c.volume), mask.as_deref(), LoadOptions::default())?;
        let m = m.expect("phantoms carry masks");
        println!(
            "{}: grid {:?}, foreground {:.1}%",
            c.id,
            v.shape(),
            100.0 * m.foreground_count() as f64 / m.data.len() as f64
        );
    }
    Ok(())
}
