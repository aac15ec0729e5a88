//! RAW3D: little-endian f32 voxels (x fastest, z slowest) in `name.raw3d`,
//! with geometry in a JSON sidecar `name.raw3d.json`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Grid3, Shape3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Raw3dKind {
    Volume,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Raw3dHeader {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub kind: Raw3dKind,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_raw3d(path: &Path) -> Result<(Raw3dHeader, Grid3<f32>)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::UnreadableFile {
        path: side.clone(),
        reason: e.to_string(),
    })?;
    let header: Raw3dHeader = serde_json::from_str(&text).map_err(|e| Error::UnreadableFile {
        path: side.clone(),
        reason: e.to_string(),
    })?;
    let bytes = fs::read(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes for shape {:?}, found {}", n * 4, header.shape, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let grid = Grid3::from_vec(header.shape, data)?;
    Ok((header, grid))
}

pub fn write_raw3d(path: &Path, header: &Raw3dHeader, data: &[f32]) -> Result<()> {
    let n: usize = header.shape.iter().product();
    if data.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "RAW3D shape {:?} needs {n} values, got {}",
            header.shape,
            data.len()
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}
