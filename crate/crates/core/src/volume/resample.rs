use super::{Grid3, LabelMask, Shape3, Volume};

/// Output voxel centre `dst` mapped into source index space (centre-aligned).
#[inline]
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

fn scaled_spacing(spacing: [f64; 3], from: Shape3, to: Shape3) -> [f64; 3] {
    [
        spacing[0] * from[0] as f64 / to[0] as f64,
        spacing[1] * from[1] as f64 / to[1] as f64,
        spacing[2] * from[2] as f64 / to[2] as f64,
    ]
}

/// Per-axis linear interpolation taps: (lo, hi, weight of hi).
fn taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    (0..dst_len)
        .map(|d| {
            let s = source_coord(d, src_len, dst_len).clamp(0.0, (src_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Trilinear resampling of a raw grid.
pub fn resample_grid(src: &Grid3<f32>, target: Shape3) -> Grid3<f32> {
    assert!(target.iter().all(|&t| t >= 1), "target shape must be positive");
    let shape = src.shape();
    if shape == target {
        return src.clone();
    }
    let tx = taps(shape[0], target[0]);
    let ty = taps(shape[1], target[1]);
    let tz = taps(shape[2], target[2]);
    let s = src.as_slice();
    let idx = |x: usize, y: usize, z: usize| x + shape[0] * (y + shape[1] * z);
    Grid3::from_fn(target, |x, y, z| {
        let (x0, x1, wx) = tx[x];
        let (y0, y1, wy) = ty[y];
        let (z0, z1, wz) = tz[z];
        let lerp = |a: f32, b: f32, w: f64| a as f64 * (1.0 - w) + b as f64 * w;
        let c00 = lerp(s[idx(x0, y0, z0)], s[idx(x1, y0, z0)], wx);
        let c10 = lerp(s[idx(x0, y1, z0)], s[idx(x1, y1, z0)], wx);
        let c01 = lerp(s[idx(x0, y0, z1)], s[idx(x1, y0, z1)], wx);
        let c11 = lerp(s[idx(x0, y1, z1)], s[idx(x1, y1, z1)], wx);
        let c0 = c00 * (1.0 - wy) + c10 * wy;
        let c1 = c01 * (1.0 - wy) + c11 * wy;
        (c0 * (1.0 - wz) + c1 * wz) as f32
    })
}

/// Nearest-neighbour resampling, used for labels.
pub fn resample_grid_nearest<T: Copy>(src: &Grid3<T>, target: Shape3) -> Grid3<T> {
    assert!(target.iter().all(|&t| t >= 1), "target shape must be positive");
    let shape = src.shape();
    let near = |d: usize, a: usize| -> usize {
        let s = ((d as f64 + 0.5) * shape[a] as f64 / target[a] as f64).floor() as usize;
        s.min(shape[a] - 1)
    };
    let nx: Vec<usize> = (0..target[0]).map(|d| near(d, 0)).collect();
    let ny: Vec<usize> = (0..target[1]).map(|d| near(d, 1)).collect();
    let nz: Vec<usize> = (0..target[2]).map(|d| near(d, 2)).collect();
    Grid3::from_fn(target, |x, y, z| src.get(nx[x], ny[y], nz[z]))
}

pub fn resample_volume(v: &Volume, target: Shape3) -> Volume {
    Volume {
        data: resample_grid(&v.data, target),
        spacing: scaled_spacing(v.spacing, v.shape(), target),
        origin: v.origin,
        modality_tag: v.modality_tag.clone(),
    }
}

pub fn resample_mask(m: &LabelMask, target: Shape3) -> LabelMask {
    LabelMask {
        data: resample_grid_nearest(&m.data, target),
        spacing: scaled_spacing(m.spacing, m.shape(), target),
        origin: m.origin,
    }
}

/// Either kind of grid accepted by [`resample_to_shape`].
pub trait Resample: Sized {
    fn resample(&self, target: Shape3) -> Self;
}

impl Resample for Volume {
    fn resample(&self, target: Shape3) -> Self {
        resample_volume(self, target)
    }
}

impl Resample for LabelMask {
    fn resample(&self, target: Shape3) -> Self {
        resample_mask(self, target)
    }
}

/// Trilinear for volumes, nearest-neighbour for masks; physical extent is kept.
pub fn resample_to_shape<T: Resample>(v: &T, target: Shape3) -> T {
    v.resample(target)
}

/// Per-volume z-score; constant volumes become all zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let data = v.data.as_slice();
    let n = data.len() as f64;
    let mean = data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let out = if std <= 1e-12 * mean.abs().max(1.0) {
        v.data.map(|_| 0.0)
    } else {
        v.data.map(|x| ((x as f64 - mean) / std) as f32)
    };
    Volume {
        data: out,
        spacing: v.spacing,
        origin: v.origin,
        modality_tag: v.modality_tag.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(shape: Shape3, f: impl FnMut(usize, usize, usize) -> f32) -> Volume {
        Volume::new(Grid3::from_fn(shape, f), [1.0; 3]).unwrap()
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = vol([16, 16, 8], |_, _, _| 3.0);
        let r = resample_to_shape(&v, [8, 8, 4]);
        assert_eq!(r.shape(), [8, 8, 4]);
        assert!(r.data.as_slice().iter().all(|&x| (x - 3.0).abs() < 1e-6));
    }

    #[test]
    fn resize_to_fixed_grid_rescales_spacing() {
        let v = Volume::new(Grid3::filled([512, 512, 120], 0.0), [0.75, 0.75, 2.0]).unwrap();
        let r = resample_to_shape(&v, [256, 256, 80]);
        assert_eq!(r.shape(), [256, 256, 80]);
        assert!((r.spacing[0] - 1.5).abs() < 1e-12);
        assert!((r.spacing[1] - 1.5).abs() < 1e-12);
        assert!((r.spacing[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn mask_resampling_keeps_label_set() {
        let m = LabelMask::new(
            Grid3::from_fn([9, 7, 5], |x, y, z| u8::from((x + 2 * y + z) % 3 == 0)),
            [1.0; 3],
        )
        .unwrap();
        for target in [[4, 4, 4], [13, 11, 3], [9, 7, 5]] {
            let r = resample_to_shape(&m, target);
            assert!(r.data.as_slice().iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn linear_ramp_is_reproduced_on_upsampling() {
        let v = vol([4, 1, 1], |x, _, _| x as f32);
        let r = resample_to_shape(&v, [8, 1, 1]);
        // interior samples land on the ramp; ends clamp
        let expect = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for (a, b) in r.data.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn z_score_of_three_levels() {
        let v = vol([3, 1, 1], |x, _, _| (x + 1) as f32);
        let n = normalize_intensity(&v);
        let expect = [-1.2247, 0.0, 1.2247];
        for (a, b) in n.data.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn z_score_mean_and_std() {
        // values 8 and 12 in equal measure: mean 10, std 2
        let v = vol([4, 4, 2], |x, _, _| if x % 2 == 0 { 8.0 } else { 12.0 });
        let n = normalize_intensity(&v);
        let d = n.data.as_slice();
        let mean = d.iter().map(|&x| x as f64).sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!(mean.abs() < 1e-4 && (std - 1.0).abs() < 1e-4);
    }

    #[test]
    fn constant_normalizes_to_zero() {
        let n = normalize_intensity(&vol([3, 3, 3], |_, _, _| 42.0));
        assert!(n.data.as_slice().iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn identity_resampling(nx in 1usize..6, ny in 1usize..6, nz in 1usize..6, seed in 0u64..1000) {
            let v = vol([nx, ny, nz], |x, y, z| ((x * 31 + y * 17 + z * 7) as u64 ^ seed) as f32 * 0.01);
            let r = resample_to_shape(&v, [nx, ny, nz]);
            for (a, b) in r.data.as_slice().iter().zip(v.data.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn labels_never_gain_values(nx in 1usize..8, tx in 1usize..12, tz in 1usize..6, seed in 0u64..1000) {
            let m = LabelMask::new(
                Grid3::from_fn([nx, 3, 4], |x, y, z| u8::from((x as u64 + y as u64 * 3 + z as u64 + seed) % 4 == 0)),
                [1.0; 3],
            ).unwrap();
            let r = resample_to_shape(&m, [tx, 5, tz]);
            prop_assert!(r.data.as_slice().iter().all(|&v| v <= 1));
        }
    }
}
