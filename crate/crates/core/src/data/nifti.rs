//! Minimal NIfTI-1 reader/writer covering the single-volume files the
//! BraTS distribution uses, plus a raw-binary + JSON-sidecar fallback
//! format for environments where NIfTI tooling is unavailable.
//!
//! Reading supports gzip (by magic bytes, not extension), both byte
//! orders, the common scalar datatypes, and scl_slope/scl_inter scaling.
//! Writing emits little-endian f32 or u8 volumes, gzipped when the path
//! ends in `.gz`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

/// A loaded scalar volume in (z, y, x) index order with per-axis spacing
/// in millimetres, ordered to match the array axes.
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing_mm: [f64; 3],
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::FileFormat { path: path.to_path_buf(), message: msg.into() }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| format_err(path, format!("gzip decode failed: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Scalars {
    swap: bool,
}

impl Scalars {
    fn i16(&self, b: &[u8], off: usize) -> i16 {
        let a: [u8; 2] = b[off..off + 2].try_into().unwrap();
        if self.swap { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }
    }
    fn i32(&self, b: &[u8], off: usize) -> i32 {
        let a: [u8; 4] = b[off..off + 4].try_into().unwrap();
        if self.swap { i32::from_be_bytes(a) } else { i32::from_le_bytes(a) }
    }
    fn f32(&self, b: &[u8], off: usize) -> f32 {
        let a: [u8; 4] = b[off..off + 4].try_into().unwrap();
        if self.swap { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) }
    }
    fn f64v(&self, b: &[u8], off: usize) -> f64 {
        let a: [u8; 8] = b[off..off + 8].try_into().unwrap();
        if self.swap { f64::from_be_bytes(a) } else { f64::from_le_bytes(a) }
    }
}

/// Read a NIfTI-1 volume. Trailing singleton dimensions are accepted;
/// anything else beyond 3 spatial dims is an error.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(format_err(path, "file shorter than a NIfTI-1 header"));
    }
    // byte order from sizeof_hdr
    let le = Scalars { swap: false };
    let s = if le.i32(&bytes, 0) == 348 {
        le
    } else {
        let be = Scalars { swap: true };
        if be.i32(&bytes, 0) == 348 {
            be
        } else {
            return Err(format_err(path, "bad sizeof_hdr (not a NIfTI-1 file)"));
        }
    };
    if &bytes[344..347] != b"n+1" && &bytes[344..347] != b"ni1" {
        return Err(format_err(path, "missing NIfTI magic"));
    }

    let ndim = s.i16(&bytes, 40) as usize;
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate() {
        let v = s.i16(&bytes, 42 + 2 * i);
        *d = if i < ndim { v.max(1) as usize } else { 1 };
    }
    if dims[3..].iter().any(|d| *d != 1) {
        return Err(format_err(path, format!("expected a 3D volume, got dims {dims:?}")));
    }
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let datatype = s.i16(&bytes, 70);
    let sx = s.f32(&bytes, 80) as f64;
    let sy = s.f32(&bytes, 84) as f64;
    let sz = s.f32(&bytes, 88) as f64;
    let vox_offset = s.f32(&bytes, 108) as usize;
    let scl_slope = s.f32(&bytes, 112);
    let scl_inter = s.f32(&bytes, 116);

    let n = nx * ny * nz;
    let elem = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format_err(path, format!("unsupported NIfTI datatype {other}"))),
    };
    if bytes.len() < vox_offset + n * elem {
        return Err(format_err(path, "truncated voxel data"));
    }
    let body = &bytes[vox_offset..vox_offset + n * elem];
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let v = match datatype {
            DT_UINT8 => body[i] as f32,
            DT_INT8 => body[i] as i8 as f32,
            DT_INT16 => s.i16(body, 2 * i) as f32,
            DT_UINT16 => s.i16(body, 2 * i) as u16 as f32,
            DT_INT32 => s.i32(body, 4 * i) as f32,
            DT_FLOAT32 => s.f32(body, 4 * i),
            DT_FLOAT64 => s.f64v(body, 8 * i) as f32,
            _ => unreachable!(),
        };
        data.push(v);
    }
    if scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0) {
        for v in data.iter_mut() {
            *v = *v * scl_slope + scl_inter;
        }
    }

    // NIfTI stores x-fastest; reinterpreting the flat buffer as a C-order
    // (z, y, x) array preserves every element without copying
    let data = Array3::from_shape_vec((nz, ny, nx), data)
        .map_err(|e| format_err(path, format!("shape error: {e}")))?;
    let spacing = [
        if sz > 0.0 { sz } else { 1.0 },
        if sy > 0.0 { sy } else { 1.0 },
        if sx > 0.0 { sx } else { 1.0 },
    ];
    Ok(Volume { data, spacing_mm: spacing })
}

fn build_header(dims: (usize, usize, usize), spacing_mm: [f64; 3], datatype: i16, bitpix: i16) -> [u8; HEADER_SIZE] {
    let (nz, ny, nx) = dims;
    let mut h = [0u8; HEADER_SIZE];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    // dim[0] = 3, dim[1..3] = (nx, ny, nz)
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    h[42..44].copy_from_slice(&(nx as i16).to_le_bytes());
    h[44..46].copy_from_slice(&(ny as i16).to_le_bytes());
    h[46..48].copy_from_slice(&(nz as i16).to_le_bytes());
    for i in 4..8 {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    h[76..80].copy_from_slice(&1f32.to_le_bytes()); // pixdim[0]
    h[80..84].copy_from_slice(&(spacing_mm[2] as f32).to_le_bytes());
    h[84..88].copy_from_slice(&(spacing_mm[1] as f32).to_le_bytes());
    h[88..92].copy_from_slice(&(spacing_mm[0] as f32).to_le_bytes());
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1f32.to_le_bytes()); // scl_slope
    h[252..254].copy_from_slice(&1i16.to_le_bytes()); // qform_code
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_payload(path: &Path, header: &[u8], body: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let mut out: Vec<u8> = Vec::with_capacity(VOX_OFFSET + body.len());
    out.extend_from_slice(header);
    out.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_SIZE]);
    out.extend_from_slice(body);
    let file = File::create(path)?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(&out)?;
        enc.finish()?;
    } else {
        let mut f = file;
        f.write_all(&out)?;
    }
    Ok(())
}

/// Write an f32 volume (array axes are (z, y, x)).
pub fn write_nifti_f32(path: &Path, data: &Array3<f32>, spacing_mm: [f64; 3]) -> Result<()> {
    let header = build_header(data.dim(), spacing_mm, DT_FLOAT32, 32);
    let mut body = Vec::with_capacity(data.len() * 4);
    for v in data.as_slice().expect("contiguous volume") {
        body.extend_from_slice(&v.to_le_bytes());
    }
    write_payload(path, &header, &body)
}

/// Write a u8 label volume.
pub fn write_nifti_u8(path: &Path, data: &Array3<u8>, spacing_mm: [f64; 3]) -> Result<()> {
    let header = build_header(data.dim(), spacing_mm, DT_UINT8, 8);
    write_payload(path, &header, data.as_slice().expect("contiguous labels"))
}

#[derive(Serialize, Deserialize)]
struct RawSidecar {
    shape: [usize; 3],
    dtype: String,
    spacing_mm: [f64; 3],
}

/// Raw fallback: `<path>` holds little-endian scalars, `<path>.json` the
/// shape, dtype, and spacing.
pub fn write_raw_f32(path: &Path, data: &Array3<f32>, spacing_mm: [f64; 3]) -> Result<()> {
    let (d, h, w) = data.dim();
    let sidecar = RawSidecar { shape: [d, h, w], dtype: "f32".into(), spacing_mm };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    let mut body = Vec::with_capacity(data.len() * 4);
    for v in data.as_slice().unwrap() {
        body.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, body)?;
    Ok(())
}

pub fn write_raw_u8(path: &Path, data: &Array3<u8>, spacing_mm: [f64; 3]) -> Result<()> {
    let (d, h, w) = data.dim();
    let sidecar = RawSidecar { shape: [d, h, w], dtype: "u8".into(), spacing_mm };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    std::fs::write(path, data.as_slice().unwrap())?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    os.into()
}

pub fn read_raw(path: &Path) -> Result<Volume> {
    let sidecar: RawSidecar = serde_json::from_str(
        &std::fs::read_to_string(sidecar_path(path))
            .map_err(|e| format_err(path, format!("missing sidecar: {e}")))?,
    )
    .map_err(|e| format_err(path, format!("bad sidecar: {e}")))?;
    let body = std::fs::read(path)?;
    let [d, h, w] = sidecar.shape;
    let n = d * h * w;
    let data: Vec<f32> = match sidecar.dtype.as_str() {
        "f32" => {
            if body.len() != 4 * n {
                return Err(format_err(path, "raw payload length mismatch"));
            }
            body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
        }
        "u8" => {
            if body.len() != n {
                return Err(format_err(path, "raw payload length mismatch"));
            }
            body.iter().map(|b| *b as f32).collect()
        }
        other => return Err(format_err(path, format!("unsupported raw dtype {other}"))),
    };
    Ok(Volume {
        data: Array3::from_shape_vec((d, h, w), data).unwrap(),
        spacing_mm: sidecar.spacing_mm,
    })
}

/// Read either format, picking by filename.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".raw") {
        read_raw(path)
    } else {
        read_nifti(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Array3::from_shape_fn((5, 4, 3), |(z, y, x)| (z * 100 + y * 10 + x) as f32 * 0.5 - 7.25);
        for name in ["a.nii", "b.nii.gz"] {
            let path = dir.path().join(name);
            write_nifti_f32(&path, &vol, [1.0, 2.0, 3.0]).unwrap();
            let back = read_nifti(&path).unwrap();
            assert_eq!(back.data, vol);
            assert_eq!(back.spacing_mm, [1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn u8_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = Array3::from_shape_fn((4, 4, 4), |(z, y, x)| ((z + y + x) % 4) as u8);
        let path = dir.path().join("seg.nii.gz");
        write_nifti_u8(&path, &labels, [1.0; 3]).unwrap();
        let back = read_nifti(&path).unwrap();
        assert!(back.data.iter().zip(labels.iter()).all(|(a, b)| *a == *b as f32));
    }

    #[test]
    fn raw_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Array3::from_shape_fn((3, 3, 3), |(z, y, x)| (z + y * 2 + x * 4) as f32);
        let path = dir.path().join("vol.raw");
        write_raw_f32(&path, &vol, [1.0; 3]).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.data, vol);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.nii");
        std::fs::write(&path, vec![0u8; 500]).unwrap();
        assert!(read_nifti(&path).is_err());
    }
}
