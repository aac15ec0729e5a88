//! Overlap and surface-distance metrics on synthetic ellipsoids, then a
//! comparison table with best / second-best marks.
//!
//!     cargo run --release --example surface_metrics

use std::collections::BTreeMap;

use synergyseg::metrics::{assd, case_metrics, hd95, render_csv, render_rows, render_table, surface_distances, MetricsReport, TableRow};
use synergyseg::volume::{Grid3, LabelMask};

fn ellipsoid(shape: [usize; 3], centre: [f64; 3], radii: [f64; 3], spacing: [f64; 3]) -> LabelMask {
    let g = Grid3::from_fn(shape, |x, y, z| {
        let p = [x, y, z];
        let r: f64 = (0..3).map(|a| ((p[a] as f64 - centre[a]) * spacing[a] / radii[a]).powi(2)).sum();
        u8::from(r <= 1.0)
    });
    LabelMask::new(g, spacing).unwrap()
}

fn main() -> synergyseg::Result<()> {
    let spacing = [0.8, 0.8, 2.5];
    let shape = [48, 48, 20];
    let gt = ellipsoid(shape, [24.0, 24.0, 10.0], [12.0, 10.0, 15.0], spacing);

    // shifted and shrunken predictions of the same organ
    let mut per_case = BTreeMap::new();
    for (i, (shift, shrink)) in [(0.0, 1.0), (1.0, 1.0), (3.0, 1.0), (0.0, 0.8), (2.0, 0.9)].into_iter().enumerate() {
        let pred = ellipsoid(shape, [24.0 + shift, 24.0, 10.0], [12.0 * shrink, 10.0 * shrink, 15.0 * shrink], spacing);
        let sd = surface_distances(&pred, &gt, spacing)?;
        let m = case_metrics(&pred, &gt)?;
        println!(
            "shift {shift} voxels, scale {shrink}: dice {:.4}, iou {:.4}, hd95 {:.3} mm, assd {:.3} mm ({} + {} surface voxels)",
            m.dice,
            m.iou,
            hd95(&sd)?,
            assd(&sd)?,
            sd.d_pred_to_gt.len(),
            sd.d_gt_to_pred.len()
        );
        per_case.insert(format!("case_{i}"), m);
    }

    // an empty prediction keeps its overlap scores but has no distances
    let empty = LabelMask::new(Grid3::filled(shape, 0), spacing)?;
    let m = case_metrics(&empty, &gt)?;
    println!("empty prediction: dice {:.1}, hd95 {:?}", m.dice, m.hd95_mm);
    per_case.insert("case_empty".into(), m);

    let report = MetricsReport::from_cases(per_case)?;
    println!("\nexcluded from distance means: {:?}", report.excluded_cases);

    let others = [
        TableRow { method: "baseline A".into(), miou: Some(70.1), dice: Some(81.0), hd95: Some(6.2), precision: Some(84.3), recall: Some(79.9), assd: Some(1.91) },
        TableRow { method: "baseline B".into(), miou: Some(75.4), dice: Some(85.2), hd95: Some(4.4), precision: Some(86.0), recall: Some(85.0), assd: Some(1.2) },
    ];
    let mut rows = vec![TableRow::from_report("ellipsoids", &report)];
    rows.extend(others);
    println!("\n{}", render_rows(&rows));
    println!("{}", render_csv(&rows));
    println!("{}", render_table(&[("only row".to_string(), report)]));
    Ok(())
}
