//! Synthetic liver-like phantoms: a perturbed ellipsoid with a known mask.
//!
//! The boundary radius in normalized ellipsoid coordinates is
//! `1 + 0.15 * severity * sin(6θ + a) * sin(5φ + b)`, so `severity` controls
//! how nodular the outline is without moving the enclosed volume much.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    make_split, save_mask, save_volume, CaseEntry, DatasetManifest, Grid3, LabelMask, Shape3,
    SplitRatios, Volume,
};

const AZIMUTH_LOBES: f64 = 6.0;
const POLAR_LOBES: f64 = 5.0;
const MAX_RELATIVE_AMPLITUDE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid_shape: Shape3,
    /// Boundary nodularity in [0, 1].
    pub severity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

impl PhantomSpec {
    pub fn new(grid_shape: Shape3, severity: f64, noise_sigma: f64, seed: u64) -> Self {
        PhantomSpec {
            grid_shape,
            severity,
            noise_sigma,
            seed,
            spacing: unit_spacing(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_shape.iter().any(|&s| s < 8) {
            return Err(Error::DegenerateGrid(format!(
                "every axis must be at least 8, got {:?}",
                self.grid_shape
            )));
        }
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::InvalidArgument(format!(
                "severity must lie in [0, 1], got {}",
                self.severity
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("bad spacing {:?}", self.spacing)));
        }
        Ok(())
    }
}

/// Geometry drawn from the seed; shared by both severities of one seed.
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    phase_azimuth: f64,
    phase_polar: f64,
}

impl Ellipsoid {
    fn draw(shape: Shape3, rng: &mut ChaCha8Rng) -> Self {
        let mut center = [0.0; 3];
        let mut radii = [0.0; 3];
        for a in 0..3 {
            let extent = shape[a] as f64;
            center[a] = (extent - 1.0) / 2.0 + rng.random_range(-0.05..0.05) * extent;
            radii[a] = extent * rng.random_range(0.28..0.34);
        }
        Ellipsoid {
            center,
            radii,
            phase_azimuth: rng.random_range(0.0..2.0 * PI),
            phase_polar: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn contains(&self, p: [f64; 3], amplitude: f64) -> bool {
        let u = [
            (p[0] - self.center[0]) / self.radii[0],
            (p[1] - self.center[1]) / self.radii[1],
            (p[2] - self.center[2]) / self.radii[2],
        ];
        let rho = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if rho < 1e-12 {
            return true;
        }
        let azimuth = u[1].atan2(u[0]);
        let polar = (u[2] / rho).clamp(-1.0, 1.0).acos();
        let bump = (AZIMUTH_LOBES * azimuth + self.phase_azimuth).sin()
            * (POLAR_LOBES * polar + self.phase_polar).sin();
        rho <= 1.0 + amplitude * bump
    }
}

/// Builds one phantom volume with its ground-truth mask.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMask)> {
    spec.validate()?;
    let shape = spec.grid_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geom = Ellipsoid::draw(shape, &mut rng);
    let amplitude = MAX_RELATIVE_AMPLITUDE * spec.severity;

    let raw = Grid3::from_fn(shape, |x, y, z| {
        u8::from(geom.contains([x as f64, y as f64, z as f64], amplitude))
    });
    let labels = keep_largest_component(&raw);

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let mut intensities = labels.map(|l| l as f32);
    if spec.noise_sigma > 0.0 {
        for v in intensities.as_mut_slice() {
            *v += noise.sample(&mut rng) as f32;
        }
    }

    let mut volume = Volume::new(intensities, spec.spacing)?;
    volume.modality_tag = "PHANTOM".into();
    let mask = LabelMask::new(labels, spec.spacing)?;
    let fraction = mask.foreground_count() as f64 / mask.data.len() as f64;
    if !(0.05..=0.40).contains(&fraction) {
        return Err(Error::DegenerateGrid(format!(
            "foreground fraction {fraction:.3} outside [0.05, 0.40] for {shape:?}"
        )));
    }
    Ok((volume, mask))
}

/// 6-connected components of the nonzero voxels, labelled 1.. in scan order.
pub fn label_components(mask: &Grid3<u8>) -> (Grid3<u32>, Vec<usize>) {
    let shape = mask.shape();
    let mut labels = Grid3::filled(shape, 0u32);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    let src = mask.as_slice();
    for start in 0..src.len() {
        if src[start] == 0 || labels.as_slice()[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        let mut count = 0usize;
        labels.as_mut_slice()[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            count += 1;
            let [x, y, z] = mask.coords(i);
            let mut visit = |j: usize| {
                if src[j] != 0 && labels.as_slice()[j] == 0 {
                    labels.as_mut_slice()[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < shape[0] {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - shape[0]);
            }
            if y + 1 < shape[1] {
                visit(i + shape[0]);
            }
            if z > 0 {
                visit(i - shape[0] * shape[1]);
            }
            if z + 1 < shape[2] {
                visit(i + shape[0] * shape[1]);
            }
        }
        sizes.push(count);
    }
    (labels, sizes)
}

/// Keeps only the largest 6-connected foreground component (first in scan
/// order on ties). An empty mask stays empty.
pub fn keep_largest_component(mask: &Grid3<u8>) -> Grid3<u8> {
    let (labels, sizes) = label_components(mask);
    let Some(best) = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u32 + 1)
    else {
        return mask.map(|_| 0);
    };
    labels.map(|l| u8::from(l == best))
}

/// Writes `n` phantoms built from `template` plus a manifest with an
/// 80:10:10 split. Returns the manifest (also saved as `manifest.json`).
pub fn generate_corpus(n: usize, template: &PhantomSpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    generate_mixed_corpus(n, std::slice::from_ref(template), seed, out_dir)
}

/// Like [`generate_corpus`], cycling through several templates (e.g. grid sizes).
pub fn generate_mixed_corpus(
    n: usize,
    templates: &[PhantomSpec],
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n < 3 {
        return Err(Error::TooFewCases { needed: 3, got: n });
    }
    if templates.is_empty() {
        return Err(Error::InvalidArgument("no phantom templates".into()));
    }
    for t in templates {
        t.validate()?;
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<(String, PhantomSpec)> = (0..n)
        .map(|i| {
            let mut s = templates[i % templates.len()].clone();
            s.seed = seeder.random();
            (format!("case_{i:04}"), s)
        })
        .collect();

    let cases: Vec<(String, Volume, LabelMask)> = specs
        .par_iter()
        .map(|(id, s)| generate_phantom(s).map(|(v, m)| (id.clone(), v, m)))
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for (id, v, m) in &cases {
        let vol_name = PathBuf::from(format!("{id}_volume.raw3d"));
        let mask_name = PathBuf::from(format!("{id}_mask.raw3d"));
        save_volume(v, &out_dir.join(&vol_name))?;
        save_mask(m, &out_dir.join(&mask_name))?;
        entries.push(CaseEntry {
            id: id.clone(),
            volume: vol_name,
            mask: Some(mask_name),
        });
    }
    let ids: Vec<String> = entries.iter().map(|c| c.id.clone()).collect();
    let split: BTreeMap<_, _> = make_split(&ids, SplitRatios::default(), seed)?;
    let manifest = DatasetManifest {
        cases: entries,
        split,
        seed,
        root: out_dir.to_path_buf(),
        provenance: None,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
