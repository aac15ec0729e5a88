use rand::Rng;

use crate::autoconfig::PlanConfig;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::volume::{Grid3, LabelMask, Shape3, Volume};

/// Probability that a sample is centred on a foreground voxel.
pub const FOREGROUND_FRACTION: f64 = 0.5;

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Extends every axis shorter than `min` at its far end by reflection.
pub fn reflect_pad<T: Copy>(g: &Grid3<T>, min: Shape3) -> Grid3<T> {
    let s = g.shape();
    let target = [0, 1, 2].map(|a| s[a].max(min[a]));
    if target == s {
        return g.clone();
    }
    Grid3::from_fn(target, |x, y, z| g.get(reflect(x, s[0]), reflect(y, s[1]), reflect(z, s[2])))
}

pub fn crop<T: Copy>(g: &Grid3<T>, origin: Shape3, shape: Shape3) -> Grid3<T> {
    Grid3::from_fn(shape, |x, y, z| g.get(origin[0] + x, origin[1] + y, origin[2] + z))
}

/// A case prepared for patch extraction: channels and mask padded to at least
/// the patch size, plus the list of foreground voxels.
#[derive(Clone, Debug)]
pub struct PatchSource {
    pub channels: Vec<Grid3<f32>>,
    pub mask: Grid3<u8>,
    patch: Shape3,
    foreground: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    /// `[n, channels, px, py, pz]`
    pub input: Tensor<f32>,
    /// `n * px * py * pz` binary targets.
    pub target: Vec<f32>,
    pub origins: Vec<Shape3>,
    pub fg_centered: Vec<bool>,
}

impl PatchSource {
    pub fn new(channels: Vec<Grid3<f32>>, mask: Grid3<u8>, patch: Shape3) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::ShapeIncompatible("patch source needs at least one channel".into()));
        }
        if channels.iter().any(|c| c.shape() != mask.shape()) {
            return Err(Error::ShapeMismatch("channels and mask differ in shape".into()));
        }
        let channels: Vec<_> = channels.iter().map(|c| reflect_pad(c, patch)).collect();
        let mask = reflect_pad(&mask, patch);
        let foreground = mask
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
            .collect();
        Ok(PatchSource {
            channels,
            mask,
            patch,
            foreground,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.mask.shape()
    }

    pub fn has_foreground(&self) -> bool {
        !self.foreground.is_empty()
    }

    /// Patch origin; foreground-centred with probability [`FOREGROUND_FRACTION`]
    /// when the case has foreground, uniform otherwise.
    pub fn draw_origin(&self, rng: &mut impl Rng) -> (Shape3, bool) {
        let s = self.shape();
        let p = self.patch;
        let centred = rng.random_bool(FOREGROUND_FRACTION) && self.has_foreground();
        if centred {
            let v = self.foreground[rng.random_range(0..self.foreground.len())];
            let c = self.mask.coords(v);
            let origin = [0, 1, 2].map(|a| c[a].saturating_sub(p[a] / 2).min(s[a] - p[a]));
            (origin, true)
        } else {
            (
                [0, 1, 2].map(|a| rng.random_range(0..=s[a] - p[a])),
                false,
            )
        }
    }

    fn write(&self, origin: Shape3, input: &mut [f32], target: &mut [f32]) {
        let p = self.patch;
        let per = p[0] * p[1] * p[2];
        for (c, ch) in self.channels.iter().enumerate() {
            crop_into(ch, origin, p, &mut input[c * per..(c + 1) * per], |v| v);
        }
        crop_into(&self.mask, origin, p, target, |v| v as f32);
    }
}

fn crop_into<T: Copy>(g: &Grid3<T>, o: Shape3, p: Shape3, out: &mut [f32], f: impl Fn(T) -> f32) {
    let s = g.shape();
    let src = g.as_slice();
    let mut i = 0;
    for z in 0..p[2] {
        for y in 0..p[1] {
            let base = o[0] + s[0] * (o[1] + y + s[1] * (o[2] + z));
            for &v in &src[base..base + p[0]] {
                out[i] = f(v);
                i += 1;
            }
        }
    }
}

/// Draws `n` patches, each from a uniformly chosen source.
pub fn sample_from(sources: &[PatchSource], n: usize, rng: &mut impl Rng) -> PatchBatch {
    let p = sources[0].patch;
    let c = sources[0].channels.len();
    let per = p[0] * p[1] * p[2];
    let mut input = vec![0.0; n * c * per];
    let mut target = vec![0.0; n * per];
    let mut origins = Vec::with_capacity(n);
    let mut fg_centered = Vec::with_capacity(n);
    for b in 0..n {
        let src = &sources[rng.random_range(0..sources.len())];
        let (o, fg) = src.draw_origin(rng);
        src.write(
            o,
            &mut input[b * c * per..(b + 1) * c * per],
            &mut target[b * per..(b + 1) * per],
        );
        origins.push(o);
        fg_centered.push(fg);
    }
    PatchBatch {
        input: Tensor::from_vec(&[n, c, p[0], p[1], p[2]], input).expect("sized above"),
        target,
        origins,
        fg_centered,
    }
}

/// One batch (of the plan's batch size) from a single case.
pub fn sample_patches(volume: &Volume, mask: &LabelMask, plan: &PlanConfig, rng: &mut impl Rng) -> Result<PatchBatch> {
    mask.check_aligned(volume)?;
    let src = PatchSource::new(vec![volume.data.clone()], mask.data.clone(), plan.patch_size)?;
    Ok(sample_from(std::slice::from_ref(&src), plan.batch_size, rng))
}
