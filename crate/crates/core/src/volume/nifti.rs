//! Minimal NIfTI-1 support: dimensions, pixdim spacing, q-offset origin and
//! voxel data. Orientation matrices are ignored.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::Grid3;
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;

fn is_gz(path: &Path) -> bool {
    path.to_string_lossy().to_ascii_lowercase().ends_with(".gz")
}

struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }

    fn word(&self, off: usize, width: usize) -> Vec<u8> {
        let mut w = self.bytes[off..off + width].to_vec();
        if self.big_endian {
            w.reverse();
        }
        w
    }
}

/// Returns `(data, spacing, origin)`.
pub fn read_nifti(path: &Path) -> Result<(Grid3<f32>, [f64; 3], [f64; 3])> {
    let unreadable = |reason: String| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason,
    };
    let raw = fs::read(path).map_err(|e| unreadable(e.to_string()))?;
    let bytes = if is_gz(path) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| unreadable(format!("gzip: {e}")))?;
        out
    } else {
        raw
    };
    if bytes.len() < HEADER_SIZE {
        return Err(unreadable("truncated header".into()));
    }
    let le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let be = i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(unreadable("sizeof_hdr is not 348".into())),
    };
    let c = Cursor {
        bytes: &bytes,
        big_endian,
    };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(unreadable("bad NIfTI-1 magic".into()));
    }

    let ndim = c.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(unreadable(format!("dim[0] = {ndim}")));
    }
    let mut shape = [1usize; 3];
    for (a, s) in shape.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let d = c.i16(42 + 2 * a);
        if d < 1 {
            return Err(unreadable(format!("dim[{}] = {d}", a + 1)));
        }
        *s = d as usize;
    }
    for a in 3..ndim as usize {
        if c.i16(42 + 2 * a) > 1 {
            return Err(unreadable("only 3D volumes are supported".into()));
        }
    }
    let datatype = c.i16(70);
    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let p = c.f32(80 + 4 * a).abs() as f64;
        if p > 0.0 && p.is_finite() {
            *s = p;
        }
    }
    let origin = [c.f32(268) as f64, c.f32(272) as f64, c.f32(276) as f64];
    let vox_offset = c.f32(108).max(HEADER_SIZE as f32) as usize;
    let slope = c.f32(112);
    let inter = c.f32(116);

    let n = shape.iter().product::<usize>();
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 768 | 16 => 4,
        64 => 8,
        other => return Err(unreadable(format!("unsupported datatype {other}"))),
    };
    let end = vox_offset + n * width;
    if bytes.len() < end {
        return Err(unreadable(format!(
            "expected {} data bytes after offset {vox_offset}, found {}",
            n * width,
            bytes.len().saturating_sub(vox_offset)
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let w = c.word(vox_offset + i * width, width);
        // words are big-endian-reversed already, so decode as little endian
        let v = match datatype {
            2 => w[0] as f64,
            256 => w[0] as i8 as f64,
            4 => i16::from_le_bytes([w[0], w[1]]) as f64,
            512 => u16::from_le_bytes([w[0], w[1]]) as f64,
            8 => i32::from_le_bytes([w[0], w[1], w[2], w[3]]) as f64,
            768 => u32::from_le_bytes([w[0], w[1], w[2], w[3]]) as f64,
            16 => f32::from_le_bytes([w[0], w[1], w[2], w[3]]) as f64,
            64 => f64::from_le_bytes([w[0], w[1], w[2], w[3], w[4], w[5], w[6], w[7]]),
            _ => unreachable!(),
        };
        let scaled = if slope != 0.0 && slope.is_finite() {
            v * slope as f64 + inter as f64
        } else {
            v
        };
        data.push(scaled as f32);
    }
    Ok((Grid3::from_vec(shape, data)?, spacing, origin))
}

/// Writes a float32 NIfTI-1 single file, gzipped when the path ends in `.gz`.
pub fn write_nifti(path: &Path, data: &Grid3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<()> {
    let mut header = vec![0u8; HEADER_SIZE];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    header[0..4].copy_from_slice(&348i32.to_le_bytes());
    let shape = data.shape();
    put_i16(&mut header, 40, 3);
    for (a, &s) in shape.iter().enumerate() {
        let s = i16::try_from(s)
            .map_err(|_| Error::ShapeMismatch(format!("axis {a} too large for NIfTI-1: {s}")))?;
        put_i16(&mut header, 42 + 2 * a, s);
    }
    for a in 3..7 {
        put_i16(&mut header, 42 + 2 * a, 1);
    }
    put_i16(&mut header, 70, 16);
    put_i16(&mut header, 72, 32);
    put_f32(&mut header, 76, 1.0);
    for (a, &s) in spacing.iter().enumerate() {
        put_f32(&mut header, 80 + 4 * a, s as f32);
    }
    put_f32(&mut header, 108, 352.0);
    put_f32(&mut header, 112, 1.0);
    put_i16(&mut header, 252, 1);
    for (a, &o) in origin.iter().enumerate() {
        put_f32(&mut header, 268 + 4 * a, o as f32);
    }
    header[123] = 10; // xyzt_units: mm, seconds
    header[344..348].copy_from_slice(b"n+1\0");

    let mut bytes = header;
    bytes.extend_from_slice(&[0u8; 4]);
    for v in data.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    if is_gz(path) {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
        Ok(())
    } else {
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}
