//! Volumes, label masks and the dataset manifest.
//!
//! Voxel storage is x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`, which is also the on-disk order of RAW3D and NIfTI.

mod manifest;
mod nifti;
mod raw3d;
mod resample;

use std::path::Path;

use crate::error::{Error, Result};

pub use manifest::{make_split, CaseEntry, DatasetManifest, Partition, SplitRatios};
pub use nifti::{read_nifti, write_nifti};
pub use raw3d::{read_raw3d, write_raw3d, Raw3dHeader, Raw3dKind};
pub use resample::{
    normalize_intensity, resample_grid, resample_grid_nearest, resample_mask, resample_to_shape, resample_volume, Resample,
};

pub type Shape3 = [usize; 3];

/// Dense 3D grid, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    shape: Shape3,
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn filled(shape: Shape3, value: T) -> Self {
        Grid3 {
            shape,
            data: vec![value; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<T>) -> Result<Self> {
        let n = shape[0] * shape[1] * shape[2];
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::ShapeMismatch(format!("zero-sized axis in {shape:?}")));
        }
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Grid3 { shape, data })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Grid3 { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.shape[0];
        let r = idx / self.shape[0];
        [x, r % self.shape[1], r / self.shape[1]]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A scan: intensities plus the physical frame they live in.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Grid3<f32>,
    /// Voxel size in mm along x, y, z.
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub modality_tag: String,
}

impl Volume {
    pub fn new(data: Grid3<f32>, spacing: [f64; 3]) -> Result<Self> {
        let v = Volume {
            data,
            spacing,
            origin: [0.0; 3],
            modality_tag: String::new(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn shape(&self) -> Shape3 {
        self.data.shape()
    }

    pub fn validate(&self) -> Result<()> {
        validate_frame(self.data.shape(), self.spacing)?;
        if self.data.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData);
        }
        Ok(())
    }
}

/// Binary segmentation aligned to a [`Volume`]; 0 is background, 1 is liver.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub data: Grid3<u8>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl LabelMask {
    pub fn new(data: Grid3<u8>, spacing: [f64; 3]) -> Result<Self> {
        validate_frame(data.shape(), spacing)?;
        if let Some(&v) = data.as_slice().iter().find(|&&v| v > 1) {
            return Err(Error::NonBinaryLabels {
                path: Default::default(),
                value: v as f32,
            });
        }
        Ok(LabelMask {
            data,
            spacing,
            origin: [0.0; 3],
        })
    }

    pub fn empty_like(volume: &Volume) -> Self {
        LabelMask {
            data: Grid3::filled(volume.shape(), 0),
            spacing: volume.spacing,
            origin: volume.origin,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.data.shape()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.as_slice().iter().filter(|&&v| v != 0).count()
    }

    /// Fails unless this mask shares shape and spacing with `volume`.
    pub fn check_aligned(&self, volume: &Volume) -> Result<()> {
        if self.shape() != volume.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} vs volume {:?}",
                self.shape(),
                volume.shape()
            )));
        }
        let close = self
            .spacing
            .iter()
            .zip(volume.spacing.iter())
            .all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0));
        if !close {
            return Err(Error::ShapeMismatch(format!(
                "mask spacing {:?} vs volume spacing {:?}",
                self.spacing, volume.spacing
            )));
        }
        Ok(())
    }
}

fn validate_frame(shape: Shape3, spacing: [f64; 3]) -> Result<()> {
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::ShapeMismatch(format!("zero-sized axis in {shape:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::ShapeMismatch(format!(
            "spacing must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}

/// How mask voxel values are turned into labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Threshold mask values at 0.5 instead of rejecting anything outside {0, 1}.
    pub binarize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FileFormat {
    Raw3d,
    Nifti,
}

fn detect_format(path: &Path) -> Result<FileFormat> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".raw3d") {
        Ok(FileFormat::Raw3d)
    } else if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(FileFormat::Nifti)
    } else {
        Err(Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: "unknown extension (expected .raw3d, .nii or .nii.gz)".into(),
        })
    }
}

struct RawImage {
    data: Grid3<f32>,
    spacing: [f64; 3],
    origin: [f64; 3],
}

fn read_any(path: &Path) -> Result<RawImage> {
    if !path.exists() {
        return Err(Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: "file does not exist".into(),
        });
    }
    match detect_format(path)? {
        FileFormat::Raw3d => {
            let (header, data) = read_raw3d(path)?;
            Ok(RawImage {
                data,
                spacing: header.spacing,
                origin: header.origin,
            })
        }
        FileFormat::Nifti => {
            let img = read_nifti(path)?;
            Ok(RawImage {
                data: img.0,
                spacing: img.1,
                origin: img.2,
            })
        }
    }
}

/// Reads a scan and, optionally, its mask.
pub fn load_case(
    volume_path: &Path,
    mask_path: Option<&Path>,
    opts: LoadOptions,
) -> Result<(Volume, Option<LabelMask>)> {
    let volume = load_volume(volume_path)?;
    let mask = match mask_path {
        Some(p) => {
            let mask = load_mask(p, opts)?;
            mask.check_aligned(&volume)?;
            Some(mask)
        }
        None => None,
    };
    Ok((volume, mask))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let raw = read_any(path)?;
    let v = Volume {
        data: raw.data,
        spacing: raw.spacing,
        origin: raw.origin,
        modality_tag: String::new(),
    };
    v.validate().map_err(|e| match e {
        Error::NonFiniteData => Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: "contains NaN or infinite voxels".into(),
        },
        other => other,
    })?;
    Ok(v)
}

pub fn load_mask(path: &Path, opts: LoadOptions) -> Result<LabelMask> {
    let raw = read_any(path)?;
    let mut labels = Vec::with_capacity(raw.data.len());
    for &v in raw.data.as_slice() {
        let label = if opts.binarize {
            u8::from(v > 0.5)
        } else if v == 0.0 {
            0
        } else if v == 1.0 {
            1
        } else {
            return Err(Error::NonBinaryLabels {
                path: path.to_path_buf(),
                value: v,
            });
        };
        labels.push(label);
    }
    validate_frame(raw.data.shape(), raw.spacing)?;
    Ok(LabelMask {
        data: Grid3::from_vec(raw.data.shape(), labels)?,
        spacing: raw.spacing,
        origin: raw.origin,
    })
}

/// Writes a volume (and mask) in the format implied by each path's extension.
pub fn save_case(
    volume: &Volume,
    volume_path: &Path,
    mask: Option<(&LabelMask, &Path)>,
) -> Result<()> {
    save_volume(volume, volume_path)?;
    if let Some((m, p)) = mask {
        save_mask(m, p)?;
    }
    Ok(())
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    let header = Raw3dHeader {
        shape: volume.shape(),
        spacing: volume.spacing,
        origin: volume.origin,
        kind: Raw3dKind::Volume,
    };
    match detect_format(path)? {
        FileFormat::Raw3d => write_raw3d(path, &header, volume.data.as_slice()),
        FileFormat::Nifti => write_nifti(path, &volume.data, volume.spacing, volume.origin),
    }
}

pub fn save_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    let header = Raw3dHeader {
        shape: mask.shape(),
        spacing: mask.spacing,
        origin: mask.origin,
        kind: Raw3dKind::Mask,
    };
    let as_float = mask.data.map(|v| v as f32);
    match detect_format(path)? {
        FileFormat::Raw3d => write_raw3d(path, &header, as_float.as_slice()),
        FileFormat::Nifti => write_nifti(path, &as_float, mask.spacing, mask.origin),
    }
}
