//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer.
//!
//! Little-endian only. The sform rows are the authoritative affine; qform is
//! ignored on read and left empty on write. Images are written as float32,
//! label maps as int16.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::error::{CatsError, Result};
use crate::volume::{diagonal_affine, Affine, Grid3, IntensityUnits, LabelVolume, Volume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NiftiError {
    #[error("unsupported datatype code {0} (expected uint8, int16, float32 or float64)")]
    UnsupportedDatatype(i16),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("expected a 3-dimensional image, header declares {0} dimensions")]
    DimensionCount(i16),
    #[error("big-endian NIfTI files are not supported")]
    BigEndian,
    #[error("label value {value} is not an integer class in [0, {max}]")]
    LabelOutOfRange { value: f64, max: usize },
    #[error("gzip stream: {0}")]
    Gzip(String),
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

struct Header {
    dims: [usize; 3],
    datatype: i16,
    pixdim: [f32; 3],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    sform_code: i16,
    srow: [[f32; 4]; 3],
    descrip: String,
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn parse_header(b: &[u8]) -> Result<Header, NiftiError> {
    if b.len() < HEADER_SIZE {
        return Err(NiftiError::CorruptHeader(format!("{} bytes is shorter than the header", b.len())));
    }
    let sizeof_hdr = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes([b[0], b[1], b[2], b[3]]) == HEADER_SIZE as i32 {
            return Err(NiftiError::BigEndian);
        }
        return Err(NiftiError::CorruptHeader(format!("sizeof_hdr is {}", sizeof_hdr)));
    }
    if &b[344..348] != MAGIC {
        return Err(NiftiError::CorruptHeader(format!("magic {:?} is not n+1", &b[344..348])));
    }
    let ndim = i16_at(b, 40);
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::CorruptHeader(format!("dim[0] = {}", ndim)));
    }
    let dim = |i: usize| i16_at(b, 40 + 2 * i);
    // trailing singleton axes (e.g. a 4D file with one frame) are tolerated
    let effective = (1..=ndim as usize).rev().find(|&i| dim(i) != 1).unwrap_or(1).max(3);
    if ndim < 3 || effective > 3 {
        return Err(NiftiError::DimensionCount(ndim));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let v = dim(i + 1);
        if v < 1 {
            return Err(NiftiError::CorruptHeader(format!("dim[{}] = {}", i + 1, v)));
        }
        *d = v as usize;
    }
    let datatype = i16_at(b, 70);
    if ![DT_UINT8, DT_INT16, DT_FLOAT32, DT_FLOAT64].contains(&datatype) {
        return Err(NiftiError::UnsupportedDatatype(datatype));
    }
    let pixdim = [f32_at(b, 80).abs(), f32_at(b, 84).abs(), f32_at(b, 88).abs()];
    let vox_offset = f32_at(b, 108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(NiftiError::CorruptHeader(format!("vox_offset = {}", vox_offset)));
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f32_at(b, 280 + 16 * r + 4 * c);
        }
    }
    let descrip_raw = &b[148..228];
    let end = descrip_raw.iter().position(|&c| c == 0).unwrap_or(descrip_raw.len());
    Ok(Header {
        dims,
        datatype,
        pixdim,
        vox_offset: vox_offset as usize,
        scl_slope: f32_at(b, 112),
        scl_inter: f32_at(b, 116),
        sform_code: i16_at(b, 254),
        srow,
        descrip: String::from_utf8_lossy(&descrip_raw[..end]).into_owned(),
    })
}

fn bytes_per_voxel(datatype: i16) -> usize {
    match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        _ => 8,
    }
}

/// Decode voxels (file order, x fastest) into our row-major `[W, H, D]` layout.
fn decode_voxels(h: &Header, b: &[u8]) -> Result<Vec<f64>, NiftiError> {
    let n: usize = h.dims.iter().product();
    let bpv = bytes_per_voxel(h.datatype);
    let end = h.vox_offset + n * bpv;
    if b.len() < end {
        return Err(NiftiError::CorruptHeader(format!(
            "file holds {} bytes, header implies {}",
            b.len(),
            end
        )));
    }
    let raw = &b[h.vox_offset..end];
    let value = |i: usize| -> f64 {
        let s = &raw[i * bpv..(i + 1) * bpv];
        match h.datatype {
            DT_UINT8 => s[0] as f64,
            DT_INT16 => i16::from_le_bytes([s[0], s[1]]) as f64,
            DT_FLOAT32 => f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64,
            _ => f64::from_le_bytes(s.try_into().expect("8-byte slice")),
        }
    };
    let [nx, ny, nz] = h.dims;
    let mut out = Vec::with_capacity(n);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                out.push(value(x + nx * (y + ny * z)));
            }
        }
    }
    Ok(out)
}

fn affine_of(h: &Header) -> Affine {
    if h.sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..4 {
                a[r][c] = h.srow[r][c] as f64;
            }
        }
        a[3] = [0.0, 0.0, 0.0, 1.0];
        a
    } else {
        diagonal_affine(h.pixdim.map(|v| v as f64))
    }
}

fn spacing_of(h: &Header) -> Result<[f64; 3], NiftiError> {
    let s = h.pixdim.map(|v| v as f64);
    if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(NiftiError::CorruptHeader(format!("pixdim spacing {:?}", s)));
    }
    Ok(s)
}

fn units_of(descrip: &str) -> IntensityUnits {
    match descrip.strip_prefix("cats units=") {
        Some("hu") => IntensityUnits::Hounsfield,
        Some("normalized") => IntensityUnits::Normalized,
        _ => IntensityUnits::Arbitrary,
    }
}

fn load(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| CatsError::io(path, e))?;
    if is_gzip(&bytes) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| CatsError::Nifti { path: path.into(), source: NiftiError::Gzip(e.to_string()) })?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume, NiftiError> {
    let h = parse_header(bytes)?;
    let vals = decode_voxels(&h, bytes)?;
    let scale = h.scl_slope != 0.0 && !(h.scl_slope == 1.0 && h.scl_inter == 0.0);
    let data: Vec<f32> = if scale {
        let (m, b) = (h.scl_slope as f64, h.scl_inter as f64);
        vals.into_iter().map(|v| (v * m + b) as f32).collect()
    } else {
        vals.into_iter().map(|v| v as f32).collect()
    };
    let grid = Grid3::new(h.dims, data).map_err(|e| NiftiError::CorruptHeader(e.to_string()))?;
    Volume::new(grid, spacing_of(&h)?, affine_of(&h), units_of(&h.descrip))
        .map_err(|e| NiftiError::CorruptHeader(e.to_string()))
}

/// Decode a label map. `num_classes = None` infers `max(label) + 1` (at least 2).
pub fn decode_label_volume(bytes: &[u8], num_classes: Option<usize>) -> Result<LabelVolume, NiftiError> {
    let h = parse_header(bytes)?;
    let vals = decode_voxels(&h, bytes)?;
    let max_seen = vals.iter().copied().fold(0.0f64, f64::max);
    let k = num_classes.unwrap_or((max_seen as usize + 1).max(2));
    let mut labels = Vec::with_capacity(vals.len());
    for v in vals {
        if v < 0.0 || v.fract() != 0.0 || v as usize >= k {
            return Err(NiftiError::LabelOutOfRange { value: v, max: k - 1 });
        }
        labels.push(v as u16);
    }
    let grid = Grid3::new(h.dims, labels).map_err(|e| NiftiError::CorruptHeader(e.to_string()))?;
    LabelVolume::new(grid, k, spacing_of(&h)?, affine_of(&h)).map_err(|e| NiftiError::CorruptHeader(e.to_string()))
}

fn header_bytes(dims: [usize; 3], datatype: i16, spacing: [f64; 3], affine: &Affine, descrip: &str) -> Vec<u8> {
    let mut b = vec![0u8; VOX_OFFSET];
    let put_i16 = |b: &mut Vec<u8>, off: usize, v: i16| b[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |b: &mut Vec<u8>, off: usize, v: f32| b[off..off + 4].copy_from_slice(&v.to_le_bytes());
    b[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    b[38] = b'r'; // "regular"
    put_i16(&mut b, 40, 3);
    for (i, &d) in dims.iter().enumerate() {
        put_i16(&mut b, 42 + 2 * i, d as i16);
    }
    for i in 4..8 {
        put_i16(&mut b, 40 + 2 * i, 1);
    }
    put_i16(&mut b, 70, datatype);
    put_i16(&mut b, 72, (bytes_per_voxel(datatype) * 8) as i16);
    put_f32(&mut b, 76, 1.0); // qfac
    for (i, &s) in spacing.iter().enumerate() {
        put_f32(&mut b, 80 + 4 * i, s as f32);
    }
    put_f32(&mut b, 108, VOX_OFFSET as f32);
    put_f32(&mut b, 112, 1.0);
    put_f32(&mut b, 116, 0.0);
    b[123] = 2; // millimetres
    let d = descrip.as_bytes();
    b[148..148 + d.len().min(79)].copy_from_slice(&d[..d.len().min(79)]);
    put_i16(&mut b, 252, 0); // qform_code
    put_i16(&mut b, 254, 2); // sform_code: aligned
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut b, 280 + 16 * r + 4 * c, affine[r][c] as f32);
        }
    }
    b[344..348].copy_from_slice(MAGIC);
    // bytes 348..352: empty extension flag
    b
}

fn file_order<T: Copy>(grid: &Grid3<T>) -> impl Iterator<Item = T> + '_ {
    let [nx, ny, nz] = grid.dims();
    (0..nz).flat_map(move |z| (0..ny).flat_map(move |y| (0..nx).map(move |x| grid.get(x, y, z))))
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let descrip = match v.units {
        IntensityUnits::Hounsfield => "cats units=hu",
        IntensityUnits::Normalized => "cats units=normalized",
        IntensityUnits::Arbitrary => "",
    };
    let mut b = header_bytes(v.dims(), DT_FLOAT32, v.spacing(), v.affine(), descrip);
    b.reserve(v.data.len() * 4);
    for x in file_order(&v.data) {
        b.extend_from_slice(&x.to_le_bytes());
    }
    b
}

pub fn encode_label_volume(v: &LabelVolume) -> Vec<u8> {
    let mut b = header_bytes(v.dims(), DT_INT16, v.spacing(), v.affine(), "");
    b.reserve(v.data.len() * 2);
    for x in file_order(&v.data) {
        b.extend_from_slice(&(x as i16).to_le_bytes());
    }
    b
}

fn store(path: &Path, bytes: Vec<u8>) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&bytes).and_then(|_| enc.finish()).map_err(|e| CatsError::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| CatsError::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T, NiftiError>) -> Result<T> {
    r.map_err(|source| CatsError::Nifti { path: path.into(), source })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = load(path)?;
    with_path(path, decode_volume(&bytes))
}

pub fn read_label_volume(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let bytes = load(path)?;
    with_path(path, decode_label_volume(&bytes, num_classes))
}

/// Write float32 NIfTI-1; gzip-compressed when the path ends in `.gz`.
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    store(path.as_ref(), encode_volume(volume))
}

/// Write int16 NIfTI-1; gzip-compressed when the path ends in `.gz`.
pub fn write_label_volume(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    store(path.as_ref(), encode_label_volume(labels))
}
