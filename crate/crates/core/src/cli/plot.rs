use std::fmt::Write;

use serde_json::Value;

use crate::training::EpochRecord;

const W: f64 = 420.0;
const H: f64 = 300.0;
const PAD: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn panel(s: &mut String, x0: f64, title: &str, ys: &[f64], range: Option<(f64, f64)>, colour: &str) {
    let (lo, hi) = range.unwrap_or_else(|| {
        let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) }
    });
    let (left, right, top, bottom) = (x0 + PAD, x0 + W - 12.0, 28.0, H - 36.0);
    let n = ys.len().max(2) - 1;
    let px = |i: usize| left + (right - left) * i as f64 / n as f64;
    let py = |v: f64| bottom - (bottom - top) * ((v - lo) / (hi - lo)).clamp(0.0, 1.0);

    writeln!(s, r#"<text x="{:.1}" y="18" font-size="13" text-anchor="middle">{title}</text>"#, (left + right) / 2.0).unwrap();
    writeln!(
        s,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#888"/>"##,
        right - left,
        bottom - top
    )
    .unwrap();
    for (v, y) in [(hi, top), (lo, bottom)] {
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.3}</text>"#, left - 4.0, y + 3.0).unwrap();
    }
    writeln!(s, r#"<text x="{left:.1}" y="{:.1}" font-size="10">0</text>"#, bottom + 14.0).unwrap();
    writeln!(s, r#"<text x="{right:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#, bottom + 14.0, ys.len().saturating_sub(1)).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">epoch</text>"#, (left + right) / 2.0, H - 8.0).unwrap();
    let pts: Vec<String> = ys
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, &v)| format!("{:.1},{:.1}", px(i), py(v)))
        .collect();
    writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).unwrap();
}

/// Loss and validation Dice per logged epoch, side by side. The provenance
/// goes into the `<metadata>` element.
pub fn training_curves_svg(history: &[EpochRecord], provenance: &Value) -> String {
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{H}" viewBox="0 0 {} {H}">"#, 2.0 * W, 2.0 * W).unwrap();
    writeln!(s, "<metadata>{}</metadata>", escape(&provenance.to_string())).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let loss: Vec<f64> = history.iter().map(|r| r.train_loss).collect();
    let dice: Vec<f64> = history.iter().map(|r| r.val_dice).collect();
    panel(&mut s, 0.0, "training loss", &loss, None, "#c0392b");
    panel(&mut s, W, "validation Dice", &dice, Some((0.0, 1.0)), "#2471a3");
    s.push_str("</svg>\n");
    s
}
