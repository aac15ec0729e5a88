use crate::autoconfig::{PlanConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Tensor};
use crate::phantom::keep_largest_component;
use crate::synergy_net::{forward_cascade, lowres_shape, CheckpointModel, LogitPredictor, SynergyUNet};
use crate::volume::{normalize_intensity, resample_grid, resample_volume, Grid3, LabelMask, Shape3, Volume};

use super::patches::reflect_pad;

/// Tile start positions along one axis: 50% overlap, evenly spread over
/// `[0, len - patch]`.
pub fn tile_starts(len: usize, patch: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let span = len - patch;
    let step = (patch / 2).max(1);
    let n = span.div_ceil(step) + 1;
    (0..n)
        .map(|i| ((i * span) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

pub fn tile_origins(shape: Shape3, patch: Shape3) -> Vec<Shape3> {
    let [xs, ys, zs] = [0, 1, 2].map(|a| tile_starts(shape[a], patch[a]));
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Separable Gaussian importance map with sigma = patch / 8 per axis.
pub fn gaussian_weights(patch: Shape3) -> Grid3<f64> {
    let axis = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let s = n as f64 / 8.0;
        (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp()).collect()
    };
    let (wx, wy, wz) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    Grid3::from_fn(patch, |x, y, z| wx[x] * wy[y] * wz[z])
}

/// Sum of tile weights at every voxel of a (padded) volume.
pub fn weight_normalizer(shape: Shape3, patch: Shape3) -> Grid3<f64> {
    let w = gaussian_weights(patch);
    let mut acc = Grid3::filled(shape, 0.0);
    for o in tile_origins(shape, patch) {
        add_tile(&mut acc, o, &w, |v| v);
    }
    acc
}

fn add_tile(acc: &mut Grid3<f64>, o: Shape3, tile: &Grid3<f64>, f: impl Fn(f64) -> f64) {
    let p = tile.shape();
    for z in 0..p[2] {
        for y in 0..p[1] {
            for x in 0..p[0] {
                let i = acc.index(o[0] + x, o[1] + y, o[2] + z);
                acc.as_mut_slice()[i] += f(tile.get(x, y, z));
            }
        }
    }
}

/// Applies a patch network to whole volumes by Gaussian-weighted tiling of
/// its logits.
pub struct SlidingWindow<'a> {
    pub net: &'a SynergyUNet<f32>,
    pub patch: Shape3,
}

impl LogitPredictor for SlidingWindow<'_> {
    fn input_channels(&self) -> usize {
        self.net.config.in_channels
    }

    fn predict_logits(&self, channels: &[&Grid3<f32>]) -> Result<Grid3<f32>> {
        if channels.len() != self.input_channels() {
            return Err(Error::ShapeIncompatible(format!(
                "network takes {} channels, got {}",
                self.input_channels(),
                channels.len()
            )));
        }
        let shape = channels[0].shape();
        if channels.iter().any(|c| c.shape() != shape) {
            return Err(Error::ShapeMismatch("input channels differ in shape".into()));
        }
        let p = self.patch;
        let padded: Vec<Grid3<f32>> = channels.iter().map(|c| reflect_pad(c, p)).collect();
        let ps = padded[0].shape();
        let w = gaussian_weights(p);
        let mut num = Grid3::filled(ps, 0.0f64);
        let mut den = Grid3::filled(ps, 0.0f64);
        let per = p[0] * p[1] * p[2];
        let c = padded.len();
        for o in tile_origins(ps, p) {
            let mut data = Vec::with_capacity(c * per);
            for ch in &padded {
                data.extend_from_slice(super::patches::crop(ch, o, p).as_slice());
            }
            let x = Tensor::from_vec(&[1, c, p[0], p[1], p[2]], data)?;
            let logits = self.net.predict(&x)?;
            let l = Grid3::from_vec(p, logits.into_data())?;
            for z in 0..p[2] {
                for y in 0..p[1] {
                    for xx in 0..p[0] {
                        let wi = w.get(xx, y, z);
                        let i = num.index(o[0] + xx, o[1] + y, o[2] + z);
                        num.as_mut_slice()[i] += wi * l.get(xx, y, z) as f64;
                        den.as_mut_slice()[i] += wi;
                    }
                }
            }
        }
        Ok(Grid3::from_fn(shape, |x, y, z| (num.get(x, y, z) / den.get(x, y, z)) as f32))
    }
}

/// Probability map of a normalized volume, same shape as the input.
pub fn sliding_window_predict(volume: &Volume, net: &SynergyUNet<f32>, plan: &PlanConfig) -> Result<Grid3<f32>> {
    let sw = SlidingWindow {
        net,
        patch: plan.patch_size,
    };
    Ok(sw.predict_logits(&[&volume.data])?.map(sigmoid))
}

/// Threshold (`p > threshold`) then keep the largest 6-connected component.
pub fn postprocess(prob: &Volume, threshold: f32) -> LabelMask {
    let fg = prob.data.map(|p| u8::from(p > threshold));
    LabelMask {
        data: keep_largest_component(&fg),
        spacing: prob.spacing,
        origin: prob.origin,
    }
}

/// Resizes a raw volume to `shape` and z-score normalizes it.
pub fn prepare_volume(volume: &Volume, shape: Shape3) -> Volume {
    let v = if volume.shape() == shape {
        volume.clone()
    } else {
        resample_volume(volume, shape)
    };
    normalize_intensity(&v)
}

/// Grid the (first) network runs on: the target shape, shrunk by the low
/// resolution factors for low-resolution plans. Cascades start at full size.
pub fn network_grid(plan: &PlanConfig) -> Shape3 {
    match (plan.variant, plan.lowres_scale) {
        (Variant::Lowres3d, Some(s)) => lowres_shape(plan.target_shape, s),
        _ => plan.target_shape,
    }
}

/// Full inference on a raw case: resize, normalize, predict, resize back.
/// Returns a probability volume on the input grid.
pub fn predict_case(model: &CheckpointModel, plan: &PlanConfig, volume: &Volume) -> Result<Volume> {
    volume.validate()?;
    let v = prepare_volume(volume, network_grid(plan));
    let prob = match model {
        CheckpointModel::Single(net) => sliding_window_predict(&v, net, plan)?,
        CheckpointModel::Cascade(c) => {
            let low = SlidingWindow {
                net: &c.lowres,
                patch: plan.patch_size,
            };
            let full = SlidingWindow {
                net: &c.fullres,
                patch: plan.patch_size,
            };
            forward_cascade(&low, &full, c.lowres_scale, &v.data)?.map(sigmoid)
        }
    };
    let data = if prob.shape() == volume.shape() {
        prob
    } else {
        resample_grid(&prob, volume.shape())
    };
    Ok(Volume {
        data,
        spacing: volume.spacing,
        origin: volume.origin,
        modality_tag: "PROBABILITY".into(),
    })
}
