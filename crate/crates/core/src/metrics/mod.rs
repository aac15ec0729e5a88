//! Overlap and surface-distance metrics, per-dataset reports and tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::percentile_sorted;
use crate::volume::{load_mask, DatasetManifest, Grid3, LabelMask, LoadOptions, Partition, Shape3};

mod table;

pub use table::{marks, render_csv, render_rows, render_table, Mark, TableRow, COLUMNS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfaceDistanceSet {
    pub d_pred_to_gt: Vec<f64>,
    pub d_gt_to_pred: Vec<f64>,
}

fn check_shapes(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

pub fn confusion(pred: &LabelMask, gt: &LabelMask) -> Result<ConfusionCounts> {
    check_shapes(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.as_slice().iter().zip(gt.data.as_slice()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

// 0/0 is 1 only when both masks are empty; otherwise an empty denominator scores 0.
fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    match den {
        0 if both_empty => 1.0,
        0 => 0.0,
        _ => num as f64 / den as f64,
    }
}

impl Overlap {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let both_empty = c.tp + c.fp + c.fn_ == 0;
        Overlap {
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, both_empty),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_, both_empty),
            precision: ratio(c.tp, c.tp + c.fp, both_empty),
            recall: ratio(c.tp, c.tp + c.fn_, both_empty),
        }
    }
}

pub fn overlap_metrics(pred: &LabelMask, gt: &LabelMask) -> Result<Overlap> {
    Ok(Overlap::from_counts(&confusion(pred, gt)?))
}

/// Foreground voxels with a background 6-neighbour or lying on the volume edge.
pub fn boundary(mask: &Grid3<u8>) -> Grid3<u8> {
    let [nx, ny, nz] = mask.shape();
    Grid3::from_fn(mask.shape(), |x, y, z| {
        if mask.get(x, y, z) == 0 {
            return 0;
        }
        let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
        let hole = !edge
            && (mask.get(x - 1, y, z) == 0
                || mask.get(x + 1, y, z) == 0
                || mask.get(x, y - 1, z) == 0
                || mask.get(x, y + 1, z) == 0
                || mask.get(x, y, z - 1) == 0
                || mask.get(x, y, z + 1) == 0);
        (edge || hole) as u8
    })
}

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line,
// sample spacing `w`. Infinite entries are not sites.
fn edt_line(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, zs: &mut Vec<f64>) {
    v.clear();
    zs.clear();
    let key = |q: usize| f[q] + (q as f64 * w).powi(2);
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                zs.push(f64::NEG_INFINITY);
                break;
            };
            let s = (key(q) - key(p)) / (2.0 * w * w * (q - p) as f64);
            if s <= *zs.last().unwrap() {
                v.pop();
                zs.pop();
            } else {
                v.push(q);
                zs.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && zs[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * w;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the nearest
/// nonzero voxel of `sites`.
pub fn squared_distance_map(sites: &Grid3<u8>, spacing: [f64; 3]) -> Grid3<f64> {
    let shape = sites.shape();
    let mut d = sites.map(|s| if s != 0 { 0.0 } else { f64::INFINITY });
    let (mut v, mut zs) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = shape[axis];
        let stride = [1, shape[0], shape[0] * shape[1]][axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let data = d.as_mut_slice();
        for start in line_starts(shape, axis) {
            for (i, l) in line.iter_mut().enumerate() {
                *l = data[start + i * stride];
            }
            edt_line(&line, spacing[axis], &mut out, &mut v, &mut zs);
            for (i, o) in out.iter().enumerate() {
                data[start + i * stride] = *o;
            }
        }
    }
    d
}

fn line_starts(shape: Shape3, axis: usize) -> Vec<usize> {
    let [nx, ny, nz] = shape;
    let mut starts = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let c = [x, y, z];
                if c[axis] == 0 {
                    starts.push(x + nx * (y + ny * z));
                }
            }
        }
    }
    starts
}

fn directed(from: &Grid3<u8>, to_map: &Grid3<f64>) -> Vec<f64> {
    from.as_slice()
        .iter()
        .zip(to_map.as_slice())
        .filter(|(&b, _)| b != 0)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

pub fn surface_distances(pred: &LabelMask, gt: &LabelMask, spacing: [f64; 3]) -> Result<SurfaceDistanceSet> {
    check_shapes(pred, gt)?;
    if pred.foreground_count() == 0 {
        return Err(Error::EmptySurface("prediction"));
    }
    if gt.foreground_count() == 0 {
        return Err(Error::EmptySurface("ground truth"));
    }
    let bp = boundary(&pred.data);
    let bg = boundary(&gt.data);
    Ok(SurfaceDistanceSet {
        d_pred_to_gt: directed(&bp, &squared_distance_map(&bg, spacing)),
        d_gt_to_pred: directed(&bg, &squared_distance_map(&bp, spacing)),
    })
}

fn combined(sd: &SurfaceDistanceSet) -> Result<Vec<f64>> {
    if sd.d_pred_to_gt.is_empty() || sd.d_gt_to_pred.is_empty() {
        return Err(Error::EmptySurface("distance set"));
    }
    Ok(sd.d_pred_to_gt.iter().chain(&sd.d_gt_to_pred).copied().collect())
}

/// 95th percentile of both directed sets pooled together.
pub fn hd95(sd: &SurfaceDistanceSet) -> Result<f64> {
    let mut all = combined(sd)?;
    all.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&all, 95.0).unwrap())
}

/// Mean of both directed sets pooled; summed in sorted order so swapping
/// the masks gives the identical float.
pub fn assd(sd: &SurfaceDistanceSet) -> Result<f64> {
    let mut all = combined(sd)?;
    all.sort_by(f64::total_cmp);
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub hd95_mm: Option<f64>,
    pub assd_mm: Option<f64>,
}

/// Full metric set for one case; distances are `None` when either mask is empty.
pub fn case_metrics(pred: &LabelMask, gt: &LabelMask) -> Result<CaseMetrics> {
    let o = overlap_metrics(pred, gt)?;
    let (hd, asd) = match surface_distances(pred, gt, gt.spacing) {
        Ok(sd) => (Some(hd95(&sd)?), Some(assd(&sd)?)),
        Err(Error::EmptySurface(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(CaseMetrics {
        dice: o.dice,
        iou: o.iou,
        precision: o.precision,
        recall: o.recall,
        hd95_mm: hd,
        assd_mm: asd,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_case: BTreeMap<String, CaseMetrics>,
    pub aggregate: CaseMetrics,
    /// Cases whose distances are undefined and left out of the distance means.
    pub excluded_cases: Vec<String>,
    pub n_cases: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    pub fn from_cases(per_case: BTreeMap<String, CaseMetrics>) -> Result<Self> {
        if per_case.is_empty() {
            return Err(Error::InvalidArgument("no cases to evaluate".into()));
        }
        let m = |f: fn(&CaseMetrics) -> f64| mean(per_case.values().map(f)).unwrap();
        let aggregate = CaseMetrics {
            dice: m(|c| c.dice),
            iou: m(|c| c.iou),
            precision: m(|c| c.precision),
            recall: m(|c| c.recall),
            hd95_mm: mean(per_case.values().filter_map(|c| c.hd95_mm)),
            assd_mm: mean(per_case.values().filter_map(|c| c.assd_mm)),
        };
        let excluded_cases = per_case
            .iter()
            .filter(|(_, c)| c.hd95_mm.is_none())
            .map(|(id, _)| id.clone())
            .collect();
        Ok(MetricsReport {
            n_cases: per_case.len(),
            per_case,
            aggregate,
            excluded_cases,
            label: None,
            provenance: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Looks for `<id>.raw3d`, `<id>.nii.gz` then `<id>.nii` in `dir`.
pub fn find_prediction(dir: &Path, id: &str) -> Option<PathBuf> {
    ["raw3d", "nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

pub fn evaluate_dataset(pred_dir: &Path, manifest: &DatasetManifest, split: Partition) -> Result<MetricsReport> {
    let cases = manifest.cases_in(split);
    let scored: Vec<(String, CaseMetrics)> = cases
        .par_iter()
        .map(|case| {
            let path = find_prediction(pred_dir, &case.id).ok_or_else(|| Error::MissingPrediction {
                case_id: case.id.clone(),
            })?;
            let gt_path = case.mask.as_ref().ok_or_else(|| {
                Error::InvalidManifest(format!("case '{}' has no ground-truth mask", case.id))
            })?;
            let gt = load_mask(&manifest.resolve(gt_path), LoadOptions::default())?;
            let pred = load_mask(&path, LoadOptions { binarize: true })?;
            Ok((case.id.clone(), case_metrics(&pred, &gt)?))
        })
        .collect::<Result<_>>()?;
    MetricsReport::from_cases(scored.into_iter().collect())
}
