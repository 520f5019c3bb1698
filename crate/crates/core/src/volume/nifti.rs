//! Minimal NIfTI-1 reader and writer for scalar 3-D volumes.
//!
//! Orientation matrices are read for completeness but never applied; axial
//! slicing follows the stored third axis.

use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder as _, LittleEndian};

use super::{Dims, Element, Provenance, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag of a single-file image.
const SINGLE_FILE_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    pub fn native() -> Self {
        if cfg!(target_endian = "little") {
            ByteOrder::Little
        } else {
            ByteOrder::Big
        }
    }

    fn i16(self, b: &[u8]) -> i16 {
        match self {
            ByteOrder::Little => LittleEndian::read_i16(b),
            ByteOrder::Big => BigEndian::read_i16(b),
        }
    }

    fn i32(self, b: &[u8]) -> i32 {
        match self {
            ByteOrder::Little => LittleEndian::read_i32(b),
            ByteOrder::Big => BigEndian::read_i32(b),
        }
    }

    fn f32(self, b: &[u8]) -> f32 {
        match self {
            ByteOrder::Little => LittleEndian::read_f32(b),
            ByteOrder::Big => BigEndian::read_f32(b),
        }
    }

    fn f64(self, b: &[u8]) -> f64 {
        match self {
            ByteOrder::Little => LittleEndian::read_f64(b),
            ByteOrder::Big => BigEndian::read_f64(b),
        }
    }

    fn put_i16(self, b: &mut [u8], v: i16) {
        match self {
            ByteOrder::Little => LittleEndian::write_i16(b, v),
            ByteOrder::Big => BigEndian::write_i16(b, v),
        }
    }

    fn put_i32(self, b: &mut [u8], v: i32) {
        match self {
            ByteOrder::Little => LittleEndian::write_i32(b, v),
            ByteOrder::Big => BigEndian::write_i32(b, v),
        }
    }

    fn put_f32(self, b: &mut [u8], v: f32) {
        match self {
            ByteOrder::Little => LittleEndian::write_f32(b, v),
            ByteOrder::Big => BigEndian::write_f32(b, v),
        }
    }

    fn put_f64(self, b: &mut [u8], v: f64) {
        match self {
            ByteOrder::Little => LittleEndian::write_f64(b, v),
            ByteOrder::Big => BigEndian::write_f64(b, v),
        }
    }
}

/// Header fields that matter for scalar volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiMeta {
    pub byte_order: ByteOrder,
    pub datatype: Element,
    pub pixdim: [f32; 3],
    /// Stored value; 0 means "no scaling" and is applied as 1.
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub vox_offset: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub descrip: String,
}

impl NiftiMeta {
    pub fn new(datatype: Element) -> Self {
        Self {
            byte_order: ByteOrder::native(),
            datatype,
            pixdim: [1.0; 3],
            scl_slope: 1.0,
            scl_inter: 0.0,
            vox_offset: SINGLE_FILE_OFFSET as f32,
            qform_code: 0,
            sform_code: 0,
            descrip: String::new(),
        }
    }

    fn slope(&self) -> f64 {
        if self.scl_slope == 0.0 {
            1.0
        } else {
            f64::from(self.scl_slope)
        }
    }
}

fn datatype_code(e: Element) -> i16 {
    match e {
        Element::U8 => 2,
        Element::I16 => 4,
        Element::F32 => 16,
        Element::F64 => 64,
    }
}

fn element_for(code: i16) -> Result<Element> {
    match code {
        2 => Ok(Element::U8),
        4 => Ok(Element::I16),
        16 => Ok(Element::F32),
        64 => Ok(Element::F64),
        other => Err(Error::UnsupportedDatatype(other)),
    }
}

fn nifti_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Nifti(format!("{}: {msg}", path.display()))
}

/// Reads a `.nii` file (magic `n+1`) or a `.hdr`/`.img` pair (magic `ni1`).
pub fn load_nifti(path: impl AsRef<Path>) -> Result<(Volume, NiftiMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_SIZE {
        return Err(nifti_err(path, format!("header truncated at {} bytes", bytes.len())));
    }
    let h = &bytes[..HEADER_SIZE];

    let order = [ByteOrder::Little, ByteOrder::Big]
        .into_iter()
        .find(|o| (1..=7).contains(&o.i16(&h[40..42])))
        .ok_or_else(|| nifti_err(path, "dim[0] is outside 1..=7 in either byte order"))?;
    if order.i32(&h[0..4]) != HEADER_SIZE as i32 {
        return Err(nifti_err(
            path,
            format!("sizeof_hdr is {}, expected 348", order.i32(&h[0..4])),
        ));
    }
    let single_file = match &h[344..348] {
        b"n+1\0" => true,
        b"ni1\0" => false,
        other => return Err(nifti_err(path, format!("bad magic {other:?}"))),
    };

    let rank = order.i16(&h[40..42]) as usize;
    let mut extent = [1usize; 7];
    for (i, e) in extent.iter_mut().enumerate().take(rank) {
        let d = order.i16(&h[42 + 2 * i..44 + 2 * i]);
        if d < 1 {
            return Err(nifti_err(path, format!("dim[{}] = {d}", i + 1)));
        }
        *e = d as usize;
    }
    if extent[3..].iter().any(|&d| d != 1) {
        return Err(nifti_err(
            path,
            format!("only 3-D scalar volumes are supported, dims {extent:?}"),
        ));
    }
    let dims = Dims::new(extent[0], extent[1], extent[2]);

    let datatype = element_for(order.i16(&h[70..72]))?;
    let pixdim = [order.f32(&h[80..84]), order.f32(&h[84..88]), order.f32(&h[88..92])];
    let vox_offset = order.f32(&h[108..112]);
    let meta = NiftiMeta {
        byte_order: order,
        datatype,
        pixdim,
        scl_slope: order.f32(&h[112..116]),
        scl_inter: order.f32(&h[116..120]),
        vox_offset,
        qform_code: order.i16(&h[252..254]),
        sform_code: order.i16(&h[254..256]),
        descrip: String::from_utf8_lossy(&h[148..228]).trim_end_matches('\0').to_string(),
    };
    if !(vox_offset.is_finite() && vox_offset >= 0.0) || (single_file && (vox_offset as usize) < HEADER_SIZE) {
        return Err(nifti_err(path, format!("invalid vox_offset {vox_offset}")));
    }

    let (payload_path, payload): (PathBuf, Vec<u8>) = if single_file {
        (path.to_path_buf(), bytes)
    } else {
        let img = path.with_extension("img");
        let data = std::fs::read(&img).map_err(|e| Error::io(&img, e))?;
        (img, data)
    };
    let start = vox_offset as usize;
    let needed = dims.len() * datatype.size();
    if payload.len() < start + needed {
        return Err(Error::LengthMismatch {
            path: payload_path,
            expected: (start + needed) as u64,
            actual: payload.len() as u64,
        });
    }
    let data = &payload[start..start + needed];
    let (slope, inter) = (meta.slope(), f64::from(meta.scl_inter));
    let size = datatype.size();
    let voxels: Vec<f64> = data
        .chunks_exact(size)
        .map(|c| {
            let raw = match datatype {
                Element::U8 => f64::from(c[0]),
                Element::I16 => f64::from(order.i16(c)),
                Element::F32 => f64::from(order.f32(c)),
                Element::F64 => order.f64(c),
            };
            slope * raw + inter
        })
        .collect();
    if voxels.iter().any(|v| !v.is_finite()) {
        return Err(nifti_err(path, "payload contains non-finite values"));
    }
    Ok((Volume::new(dims, voxels, Provenance::File(path.to_path_buf()))?, meta))
}

/// Writes a single-file `.nii`. Stored values are `(v − scl_inter) / slope`,
/// rounded for integer datatypes.
pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>, meta: &NiftiMeta) -> Result<()> {
    let path = path.as_ref();
    let o = meta.byte_order;
    let d = volume.dims();
    let offset = meta.vox_offset.max(SINGLE_FILE_OFFSET as f32) as usize;
    let mut out = vec![0u8; offset + d.len() * meta.datatype.size()];

    o.put_i32(&mut out[0..4], HEADER_SIZE as i32);
    for (i, v) in [3, d.x, d.y, d.z, 1, 1, 1, 1].into_iter().enumerate() {
        let v =
            i16::try_from(v).map_err(|_| Error::InvalidArgument(format!("dimension {v} exceeds NIfTI-1 limits")))?;
        o.put_i16(&mut out[40 + 2 * i..42 + 2 * i], v);
    }
    o.put_i16(&mut out[70..72], datatype_code(meta.datatype));
    o.put_i16(&mut out[72..74], (meta.datatype.size() * 8) as i16);
    o.put_f32(&mut out[76..80], 1.0);
    for (i, p) in meta.pixdim.iter().enumerate() {
        o.put_f32(&mut out[80 + 4 * i..84 + 4 * i], *p);
    }
    o.put_f32(&mut out[108..112], offset as f32);
    o.put_f32(&mut out[112..116], meta.scl_slope);
    o.put_f32(&mut out[116..120], meta.scl_inter);
    let descrip = meta.descrip.as_bytes();
    let n = descrip.len().min(79);
    out[148..148 + n].copy_from_slice(&descrip[..n]);
    o.put_i16(&mut out[252..254], meta.qform_code);
    o.put_i16(&mut out[254..256], meta.sform_code);
    out[344..348].copy_from_slice(b"n+1\0");

    let (slope, inter) = (meta.slope(), f64::from(meta.scl_inter));
    let size = meta.datatype.size();
    for (chunk, &v) in out[offset..].chunks_exact_mut(size).zip(volume.voxels()) {
        let stored = (v - inter) / slope;
        match meta.datatype {
            Element::U8 => chunk[0] = stored.round().clamp(0.0, 255.0) as u8,
            Element::I16 => o.put_i16(chunk, stored.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16),
            Element::F32 => o.put_f32(chunk, stored as f32),
            Element::F64 => o.put_f64(chunk, stored),
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
