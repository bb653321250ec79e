//! Raw volume files with a JSON header sidecar.
//!
//! A volume is stored as two files: `name.hdr` holds
//! `{"dims": [x, y, z], "spacing_mm": [x, y, z], "dtype": "f32" | "u8", "byte_order": "little"}`
//! and `name.raw` holds the voxels as contiguous little-endian scalars with
//! `x` varying fastest, then `y`, then `z`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Result};
use crate::volume::Grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub byte_order: String,
}

/// Scalar types a volume file can hold.
pub trait Voxel: Copy + Sized {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Voxel for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl Voxel for u8 {
    const DTYPE: &'static str = "u8";
    const SIZE: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(b: &[u8]) -> Self {
        b[0]
    }
}

/// The payload path paired with a header path.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Writes `header` (conventionally `*.hdr`) and its `.raw` payload.
pub fn write_volume<T: Voxel>(header: &Path, v: &Grid<T>) -> Result<()> {
    let [d, h, w] = v.dims();
    let hdr = VolumeHeader {
        dims: [w, h, d],
        spacing_mm: v.spacing_mm(),
        dtype: T::DTYPE.into(),
        byte_order: "little".into(),
    };
    let mut payload = Vec::with_capacity(v.numel() * T::SIZE);
    for &x in v.data() {
        x.write_le(&mut payload);
    }
    fs::write(header, serde_json::to_string_pretty(&hdr)?).map_err(io_err(header))?;
    let raw = payload_path(header);
    fs::write(&raw, payload).map_err(io_err(&raw))?;
    Ok(())
}

pub fn read_header(header: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(header).map_err(io_err(header))?;
    let hdr: VolumeHeader = serde_json::from_str(&text).map_err(|e| format_err("header", e.to_string()))?;
    if hdr.byte_order != "little" {
        return Err(format_err("byte_order", format!("only \"little\" is supported, found {:?}", hdr.byte_order)));
    }
    if !matches!(hdr.dtype.as_str(), "f32" | "u8") {
        return Err(format_err("dtype", format!("unknown dtype {:?}", hdr.dtype)));
    }
    if hdr.dims.iter().any(|&n| n == 0) {
        return Err(format_err("dims", format!("extents must be positive, found {:?}", hdr.dims)));
    }
    if hdr.spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(format_err("spacing_mm", format!("spacing must be positive, found {:?}", hdr.spacing_mm)));
    }
    Ok(hdr)
}

/// Reads a volume whose header declares dtype `T`.
pub fn read_volume<T: Voxel>(header: &Path) -> Result<Grid<T>> {
    let hdr = read_header(header)?;
    if hdr.dtype != T::DTYPE {
        return Err(format_err("dtype", format!("expected {:?}, found {:?}", T::DTYPE, hdr.dtype)));
    }
    let raw = payload_path(header);
    let bytes = fs::read(&raw).map_err(io_err(&raw))?;
    let n: usize = hdr.dims.iter().product();
    if bytes.len() != n * T::SIZE {
        return Err(format_err(
            "dims",
            format!("{:?} {} voxels need {} bytes, payload has {}", hdr.dims, hdr.dtype, n * T::SIZE, bytes.len()),
        ));
    }
    let data = bytes.chunks_exact(T::SIZE).map(T::read_le).collect();
    let [x, y, z] = hdr.dims;
    Grid::new([z, y, x], hdr.spacing_mm, data)
}
