use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::MetricsReport;

/// Column title and whether larger is better.
pub const COLUMNS: [(&str, bool); 6] = [
    ("mIoU", true),
    ("Dice", true),
    ("HD95", false),
    ("Precision", true),
    ("Recall", true),
    ("ASSD", false),
];

/// One table row in display units: overlap scores in percent, distances in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRow {
    pub method: String,
    pub miou: Option<f64>,
    pub dice: Option<f64>,
    pub hd95: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub assd: Option<f64>,
}

impl TableRow {
    pub fn from_report(method: &str, r: &MetricsReport) -> Self {
        let a = &r.aggregate;
        TableRow {
            method: method.to_string(),
            miou: Some(a.iou * 100.0),
            dice: Some(a.dice * 100.0),
            hd95: a.hd95_mm,
            precision: Some(a.precision * 100.0),
            recall: Some(a.recall * 100.0),
            assd: a.assd_mm,
        }
    }

    pub fn values(&self) -> [Option<f64>; 6] {
        [self.miou, self.dice, self.hd95, self.precision, self.recall, self.assd]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    None,
    Best,
    Second,
}

/// Best and runner-up per column. Values compare at the printed precision;
/// equal values are ordered by method name.
pub fn marks(rows: &[TableRow]) -> Vec<[Mark; 6]> {
    let mut out = vec![[Mark::None; 6]; rows.len()];
    for (col, &(_, higher)) in COLUMNS.iter().enumerate() {
        let mut ranked: Vec<(i64, &str, usize)> = rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.values()[col].map(|v| (centi(v), r.method.as_str(), i)))
            .collect();
        ranked.sort_by(|a, b| {
            let by_value = if higher { b.0.cmp(&a.0) } else { a.0.cmp(&b.0) };
            by_value.then_with(|| a.1.cmp(b.1))
        });
        for (rank, &(_, _, i)) in ranked.iter().take(2).enumerate() {
            out[i][col] = if rank == 0 { Mark::Best } else { Mark::Second };
        }
    }
    out
}

fn centi(v: f64) -> i64 {
    (v * 100.0).round() as i64
}

fn cell(v: Option<f64>, m: Mark) -> String {
    match (v, m) {
        (None, _) => "n/a".into(),
        (Some(v), Mark::Best) => format!("**{v:.2}**"),
        (Some(v), Mark::Second) => format!("_{v:.2}_"),
        (Some(v), Mark::None) => format!("{v:.2}"),
    }
}

/// Markdown-style table; best values in `**bold**`, second best in `_italics_`.
pub fn render_rows(rows: &[TableRow]) -> String {
    let marks = marks(rows);
    let mut grid: Vec<Vec<String>> = vec![std::iter::once("Method".to_string())
        .chain(COLUMNS.iter().map(|c| c.0.to_string()))
        .collect()];
    for (r, m) in rows.iter().zip(&marks) {
        let mut line = vec![r.method.clone()];
        line.extend(r.values().iter().zip(m).map(|(&v, &m)| cell(v, m)));
        grid.push(line);
    }
    let widths: Vec<usize> = (0..7)
        .map(|c| grid.iter().map(|l| l[c].chars().count()).max().unwrap())
        .collect();
    let mut s = String::new();
    for (i, line) in grid.iter().enumerate() {
        s.push('|');
        for (c, v) in line.iter().enumerate() {
            if c == 0 {
                write!(s, " {v:<w$} |", w = widths[c]).unwrap();
            } else {
                write!(s, " {v:>w$} |", w = widths[c]).unwrap();
            }
        }
        s.push('\n');
        if i == 0 {
            s.push('|');
            for (c, w) in widths.iter().enumerate() {
                let dashes = "-".repeat(*w);
                if c == 0 {
                    write!(s, " {dashes} |").unwrap();
                } else {
                    write!(s, " {}: |", &dashes[1..]).unwrap();
                }
            }
            s.push('\n');
        }
    }
    s
}

pub fn render_table(reports: &[(String, MetricsReport)]) -> String {
    let rows: Vec<TableRow> = reports.iter().map(|(n, r)| TableRow::from_report(n, r)).collect();
    render_rows(&rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Plain values plus a `marks` column listing e.g. `Dice:best;HD95:second`.
pub fn render_csv(rows: &[TableRow]) -> String {
    let marks = marks(rows);
    let mut s = String::from("method,miou,dice,hd95,precision,recall,assd,marks\n");
    for (r, m) in rows.iter().zip(&marks) {
        s.push_str(&csv_field(&r.method));
        for v in r.values() {
            match v {
                Some(v) => write!(s, ",{v:.2}").unwrap(),
                None => s.push(','),
            }
        }
        let tags: Vec<String> = COLUMNS
            .iter()
            .zip(m)
            .filter_map(|(c, m)| match m {
                Mark::Best => Some(format!("{}:best", c.0)),
                Mark::Second => Some(format!("{}:second", c.0)),
                Mark::None => None,
            })
            .collect();
        writeln!(s, ",{}", tags.join(";")).unwrap();
    }
    s
}
