//! Dataset fingerprinting and rule-based planning of network topology,
//! patch size and batch size under a memory budget.
//!
//! Rules, applied deterministically:
//! * every case is resized to the median shape before patching;
//! * starting from the full median shape, pool an axis at a stage iff its
//!   current extent is at least 8 and at least half the largest extent; stop
//!   at 6 stages, or once all extents are <= 8 (but always at least 2 stages);
//! * stage channels are `16 * 2^stage`, capped at 256;
//! * try batch 4, then 2, then 1; if none fits, halve the longest patch axis
//!   (ties x, then y, then z) and repeat;
//! * if the final patch covers less than 25% of the median volume the plan
//!   becomes a cascade whose low-resolution pass halves every axis longer
//!   than 64.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{median_f64, median_usize, percentile};
use crate::volume::{load_case, DatasetManifest, LoadOptions, Partition, Shape3};

pub const BASE_CHANNELS: usize = 16;
pub const MAX_CHANNELS: usize = 256;
pub const MAX_STAGES: usize = 6;
pub const MIN_STAGES: usize = 2;
pub const MIN_POOL_EXTENT: usize = 8;
pub const MIN_PATCH_AXIS: usize = 8;
pub const BATCH_CANDIDATES: [usize; 3] = [4, 2, 1];
pub const CASCADE_COVERAGE: f64 = 0.25;
pub const LOWRES_AXIS_THRESHOLD: usize = 64;
pub const BYTES_PER_VALUE: u64 = 4;
/// Forward activations, their gradients and optimizer state.
pub const MEMORY_OVERHEAD: u64 = 6;
pub const DEFAULT_CODEBOOK_SIZE: usize = 256;
pub const DEFAULT_LATENT_DIM: usize = 64;
pub const DEFAULT_HEADS: usize = 4;

/// Cap on foreground intensities kept per case for percentile estimation.
const PERCENTILE_SAMPLES_PER_CASE: usize = 50_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub median_shape: Shape3,
    pub median_spacing: [f64; 3],
    pub intensity_p0_5: f64,
    pub intensity_p99_5: f64,
    pub intensity_mean: f64,
    pub intensity_std: f64,
    pub foreground_fraction: f64,
    pub n_cases: usize,
}

impl DatasetFingerprint {
    pub fn validate(&self) -> Result<()> {
        if self.median_shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!(
                "fingerprint median_shape {:?} has a zero axis",
                self.median_shape
            )));
        }
        if !(self.intensity_p0_5 <= self.intensity_p99_5) {
            return Err(Error::InvalidArgument("fingerprint percentiles out of order".into()));
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return Err(Error::InvalidArgument("foreground_fraction outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fullres3d,
    Lowres3d,
    Cascade3d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub variant: Variant,
    pub patch_size: Shape3,
    pub batch_size: usize,
    pub n_stages: usize,
    pub channels_per_stage: Vec<usize>,
    /// One 0/1 vector per stage; entry `s` pools when entering stage `s`
    /// (stage 0 is always all zeros).
    pub pooling_per_axis_per_stage: Vec<[u8; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lowres_scale: Option<[usize; 3]>,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub attention_heads: usize,
    /// Shape every case is resized to before patching.
    pub target_shape: Shape3,
}

impl PlanConfig {
    /// Product of pooling factors per axis across all stages.
    pub fn total_pooling(&self) -> [usize; 3] {
        total_pooling(&self.pooling_per_axis_per_stage)
    }

    /// Spatial extent of each stage for a given input shape.
    pub fn stage_shapes(&self, input: Shape3) -> Vec<Shape3> {
        let mut ext = input;
        self.pooling_per_axis_per_stage
            .iter()
            .map(|p| {
                for a in 0..3 {
                    if p[a] == 1 {
                        ext[a] /= 2;
                    }
                }
                ext
            })
            .collect()
    }

    /// Image channels fed to the (full-resolution) network.
    pub fn input_channels(&self) -> usize {
        match self.variant {
            Variant::Cascade3d => 2,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("invalid plan: {m}")));
        if self.n_stages == 0
            || self.channels_per_stage.len() != self.n_stages
            || self.pooling_per_axis_per_stage.len() != self.n_stages
        {
            return bad("stage lists must have n_stages entries".into());
        }
        if self.pooling_per_axis_per_stage[0] != [0, 0, 0] {
            return bad("stage 0 cannot pool".into());
        }
        if self.pooling_per_axis_per_stage.iter().flatten().any(|&p| p > 1) {
            return bad("pooling entries must be 0 or 1".into());
        }
        if self.batch_size == 0 || self.patch_size.iter().any(|&p| p == 0) {
            return bad("batch and patch must be positive".into());
        }
        let pool = self.total_pooling();
        for a in 0..3 {
            if self.patch_size[a] % pool[a] != 0 {
                return bad(format!(
                    "patch axis {a} ({}) not divisible by pooling {}",
                    self.patch_size[a], pool[a]
                ));
            }
        }
        if self.channels_per_stage.iter().any(|&c| c == 0) {
            return bad("zero channels".into());
        }
        if self.codebook_size < 2 || self.latent_dim == 0 || self.attention_heads == 0 {
            return bad("codebook_size >= 2, latent_dim and heads > 0 required".into());
        }
        if self.latent_dim % self.attention_heads != 0 {
            return bad(format!(
                "latent_dim {} not divisible by heads {}",
                self.latent_dim, self.attention_heads
            ));
        }
        if matches!(self.variant, Variant::Cascade3d | Variant::Lowres3d) && self.lowres_scale.is_none() {
            return bad("cascade/lowres plans need lowres_scale".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub bytes_available: u64,
    pub safety_factor: f64,
}

impl MemoryBudget {
    pub fn new(bytes_available: u64, safety_factor: f64) -> Result<Self> {
        if bytes_available == 0 {
            return Err(Error::InvalidArgument("bytes_available must be positive".into()));
        }
        if !(safety_factor > 0.0 && safety_factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "safety_factor must be in (0, 1], got {safety_factor}"
            )));
        }
        Ok(MemoryBudget {
            bytes_available,
            safety_factor,
        })
    }

    /// Budget from gigabytes (10^9 bytes) with safety factor 1.
    pub fn from_gb(gb: f64) -> Result<Self> {
        if !(gb > 0.0) || !gb.is_finite() {
            return Err(Error::InvalidArgument(format!("budget must be positive, got {gb} GB")));
        }
        Self::new(((gb * 1e9).floor() as u64).max(1), 1.0)
    }

    pub fn usable(&self) -> u64 {
        (self.bytes_available as f64 * self.safety_factor).floor() as u64
    }
}

/// Corpus statistics over the training split.
pub fn fingerprint_dataset(manifest: &DatasetManifest) -> Result<DatasetFingerprint> {
    let train: Vec<_> = manifest
        .cases_in(Partition::Train)
        .into_iter()
        .filter(|c| c.mask.is_some())
        .collect();
    if train.is_empty() {
        return Err(Error::NoTrainingCases);
    }

    struct CaseStats {
        shape: Shape3,
        spacing: [f64; 3],
        fg_sum: f64,
        fg_sq: f64,
        fg_count: usize,
        total: usize,
        samples: Vec<f64>,
    }

    let per_case: Vec<CaseStats> = train
        .par_iter()
        .map(|c| {
            let mask_path = manifest.resolve(c.mask.as_ref().expect("filtered"));
            let (v, m) = load_case(&manifest.resolve(&c.volume), Some(&mask_path), LoadOptions::default())?;
            let m = m.expect("mask requested");
            let fg: Vec<f64> = v
                .data
                .as_slice()
                .iter()
                .zip(m.data.as_slice())
                .filter(|(_, &l)| l != 0)
                .map(|(&x, _)| x as f64)
                .collect();
            let stride = fg.len().div_ceil(PERCENTILE_SAMPLES_PER_CASE).max(1);
            Ok(CaseStats {
                shape: v.shape(),
                spacing: v.spacing,
                fg_sum: fg.iter().sum(),
                fg_sq: fg.iter().map(|x| x * x).sum(),
                fg_count: fg.len(),
                total: v.data.len(),
                samples: fg.iter().step_by(stride).copied().collect(),
            })
        })
        .collect::<Result<_>>()?;

    let fg_count: usize = per_case.iter().map(|c| c.fg_count).sum();
    if fg_count == 0 {
        return Err(Error::NoForegroundVoxels);
    }
    let total: usize = per_case.iter().map(|c| c.total).sum();
    let sum: f64 = per_case.iter().map(|c| c.fg_sum).sum();
    let sq: f64 = per_case.iter().map(|c| c.fg_sq).sum();
    let mean = sum / fg_count as f64;
    let var = (sq / fg_count as f64 - mean * mean).max(0.0);
    let samples: Vec<f64> = per_case.iter().flat_map(|c| c.samples.iter().copied()).collect();

    let axis = |a: usize| median_usize(&per_case.iter().map(|c| c.shape[a]).collect::<Vec<_>>()).expect("nonempty");
    let spacing = |a: usize| median_f64(&per_case.iter().map(|c| c.spacing[a]).collect::<Vec<_>>()).expect("nonempty");

    Ok(DatasetFingerprint {
        median_shape: [axis(0), axis(1), axis(2)],
        median_spacing: [spacing(0), spacing(1), spacing(2)],
        intensity_p0_5: percentile(&samples, 0.5).expect("nonempty"),
        intensity_p99_5: percentile(&samples, 99.5).expect("nonempty"),
        intensity_mean: mean,
        intensity_std: var.sqrt(),
        foreground_fraction: fg_count as f64 / total as f64,
        n_cases: per_case.len(),
    })
}

fn total_pooling(pooling: &[[u8; 3]]) -> [usize; 3] {
    let mut t = [1usize; 3];
    for p in pooling {
        for a in 0..3 {
            if p[a] == 1 {
                t[a] *= 2;
            }
        }
    }
    t
}

/// Pooling schedule for a patch under the planner's pooling rule.
pub fn pooling_schedule(patch: Shape3) -> Vec<[u8; 3]> {
    let mut stages = vec![[0u8; 3]];
    let mut ext = patch;
    loop {
        let n = stages.len();
        if n >= MAX_STAGES || (n >= MIN_STAGES && ext.iter().all(|&e| e <= MIN_POOL_EXTENT)) {
            break;
        }
        let largest = *ext.iter().max().expect("3 axes");
        let mut pool = [0u8; 3];
        for a in 0..3 {
            if ext[a] >= MIN_POOL_EXTENT && 2 * ext[a] >= largest {
                pool[a] = 1;
            }
        }
        if pool == [0; 3] {
            break;
        }
        for a in 0..3 {
            if pool[a] == 1 {
                ext[a] /= 2;
            }
        }
        stages.push(pool);
    }
    stages
}

/// Rounds the patch down until it is divisible by its own pooling schedule.
fn fit_topology(mut patch: Shape3) -> (Shape3, Vec<[u8; 3]>) {
    loop {
        let schedule = pooling_schedule(patch);
        let pool = total_pooling(&schedule);
        let fitted = [
            (patch[0] / pool[0]).max(1) * pool[0],
            (patch[1] / pool[1]).max(1) * pool[1],
            (patch[2] / pool[2]).max(1) * pool[2],
        ];
        if fitted == patch {
            return (patch, schedule);
        }
        patch = fitted;
    }
}

pub fn stage_channels(n_stages: usize, base: usize) -> Vec<usize> {
    (0..n_stages).map(|s| (base << s).min(MAX_CHANNELS)).collect()
}

/// `4 bytes * batch * sum_s(stage voxels * channels) * 6`.
pub fn estimate_memory(plan: &PlanConfig) -> u64 {
    let per_sample: u64 = plan
        .stage_shapes(plan.patch_size)
        .iter()
        .zip(&plan.channels_per_stage)
        .map(|(s, &c)| (s[0] * s[1] * s[2] * c) as u64)
        .sum();
    BYTES_PER_VALUE * plan.batch_size as u64 * per_sample * MEMORY_OVERHEAD
}

fn build_plan(median: Shape3, patch: Shape3, schedule: Vec<[u8; 3]>, batch: usize) -> PlanConfig {
    let n_stages = schedule.len();
    PlanConfig {
        variant: Variant::Fullres3d,
        patch_size: patch,
        batch_size: batch,
        n_stages,
        channels_per_stage: stage_channels(n_stages, BASE_CHANNELS),
        pooling_per_axis_per_stage: schedule,
        lowres_scale: None,
        codebook_size: DEFAULT_CODEBOOK_SIZE,
        latent_dim: DEFAULT_LATENT_DIM,
        attention_heads: DEFAULT_HEADS,
        target_shape: median,
    }
}

/// Applies the planning rules to a fingerprint.
pub fn plan_configuration(fp: &DatasetFingerprint, budget: &MemoryBudget) -> Result<PlanConfig> {
    fp.validate()?;
    let median = fp.median_shape;
    let usable = budget.usable();
    let mut patch = median;
    loop {
        let (fitted, schedule) = fit_topology(patch);
        let mut smallest = None;
        for &batch in &BATCH_CANDIDATES {
            let plan = build_plan(median, fitted, schedule.clone(), batch);
            let need = estimate_memory(&plan);
            if need <= usable {
                return Ok(finalize_variant(plan, median));
            }
            smallest = Some(need);
        }
        let longest = (0..3)
            .filter(|&a| fitted[a] > MIN_PATCH_AXIS)
            .max_by(|&a, &b| fitted[a].cmp(&fitted[b]).then(b.cmp(&a)));
        match longest {
            Some(a) => {
                patch = fitted;
                patch[a] = (patch[a] / 2).max(MIN_PATCH_AXIS);
            }
            None => {
                return Err(Error::BudgetInfeasible {
                    needed: smallest.expect("tried at least one batch"),
                    available: usable,
                })
            }
        }
    }
}

fn finalize_variant(mut plan: PlanConfig, median: Shape3) -> PlanConfig {
    let patch_voxels = plan.patch_size.iter().product::<usize>() as f64;
    let median_voxels = median.iter().product::<usize>() as f64;
    if patch_voxels < CASCADE_COVERAGE * median_voxels {
        plan.variant = Variant::Cascade3d;
        plan.lowres_scale = Some(median.map(|m| if m > LOWRES_AXIS_THRESHOLD { 2 } else { 1 }));
    }
    plan
}

pub const DEFAULT_PATCH: Shape3 = [128, 128, 64];
pub const DEFAULT_BATCH: usize = 2;
pub const DEFAULT_STAGES: usize = 5;

/// The fixed "no auto-configuration" plan: only the patch depends on the
/// fingerprint (clipped to its median shape). Axes pool at each stage while
/// their extent is even.
pub fn default_plan(fp: &DatasetFingerprint) -> PlanConfig {
    let median = fp.median_shape;
    let patch = [
        DEFAULT_PATCH[0].min(median[0]).max(1),
        DEFAULT_PATCH[1].min(median[1]).max(1),
        DEFAULT_PATCH[2].min(median[2]).max(1),
    ];
    let mut schedule = vec![[0u8; 3]];
    let mut ext = patch;
    for _ in 1..DEFAULT_STAGES {
        let mut pool = [0u8; 3];
        for a in 0..3 {
            if ext[a] % 2 == 0 {
                pool[a] = 1;
                ext[a] /= 2;
            }
        }
        schedule.push(pool);
    }
    PlanConfig {
        variant: Variant::Fullres3d,
        patch_size: patch,
        batch_size: DEFAULT_BATCH,
        n_stages: DEFAULT_STAGES,
        channels_per_stage: stage_channels(DEFAULT_STAGES, BASE_CHANNELS),
        pooling_per_axis_per_stage: schedule,
        lowres_scale: None,
        codebook_size: DEFAULT_CODEBOOK_SIZE,
        latent_dim: DEFAULT_LATENT_DIM,
        attention_heads: DEFAULT_HEADS,
        target_shape: median,
    }
}
