//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Reads either byte order. Writes little-endian with the smallest lossless
//! datatype for the payload, an sform carrying the full affine, and a qform
//! whenever the affine is a scaled rotation.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{column_norms, det3, Affine, Geometry, VoxelGrid};
use crate::{Error, Result};

const HEADER_SIZE: usize = 348;
const SINGLE_FILE_OFFSET: usize = 352;

/// On-disk voxel types accepted by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Int32 => 8,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::Uint8,
            4 => Datatype::Int16,
            8 => Datatype::Int32,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Int32 | Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }

    fn represents(self, v: f64) -> bool {
        match self {
            Datatype::Uint8 => v.fract() == 0.0 && (0.0..=255.0).contains(&v),
            Datatype::Int16 => v.fract() == 0.0 && (-32768.0..=32767.0).contains(&v),
            Datatype::Int32 => v.fract() == 0.0 && (-2147483648.0..=2147483647.0).contains(&v),
            Datatype::Float32 => (v as f32) as f64 == v || v.is_nan(),
            Datatype::Float64 => true,
        }
    }

    /// Smallest type that stores every value of `data` exactly.
    pub fn smallest_lossless(data: &[f64]) -> Self {
        [Datatype::Uint8, Datatype::Int16, Datatype::Int32, Datatype::Float32]
            .into_iter()
            .find(|t| data.iter().all(|&v| t.represents(v)))
            .unwrap_or(Datatype::Float64)
    }
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Fields<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Fields<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }

    fn sample(&self, off: usize, dt: Datatype) -> f64 {
        let b = &self.bytes[off..off + dt.size()];
        macro_rules! num {
            ($t:ty) => {{
                let a = b.try_into().unwrap();
                (match self.endian {
                    Endian::Little => <$t>::from_le_bytes(a),
                    Endian::Big => <$t>::from_be_bytes(a),
                }) as f64
            }};
        }
        match dt {
            Datatype::Uint8 => b[0] as f64,
            Datatype::Int16 => num!(i16),
            Datatype::Int32 => num!(i32),
            Datatype::Float32 => num!(f32),
            Datatype::Float64 => num!(f64),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads a 3D NIfTI-1 image as a `f64` grid.
///
/// The affine comes from the sform when its code is positive and it is
/// invertible, otherwise from the qform, otherwise from `pixdim` alone (with a
/// warning). Spacing is the column norms of the chosen affine. Intensity
/// scaling (`scl_slope`, `scl_inter`) is applied when the slope is non-zero.
pub fn load_volume(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    parse(&bytes)
}

pub(crate) fn parse(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Header(format!("{} bytes, need at least {HEADER_SIZE}", bytes.len())));
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let size_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let endian = if size_le == HEADER_SIZE as i32 {
        Endian::Little
    } else if size_be == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::Header(format!("sizeof_hdr is {size_le}, expected 348")));
    };
    let f = Fields { bytes, endian };

    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(Error::Header("separate .hdr/.img pairs are not supported".into())),
        m => return Err(Error::Header(format!("bad magic {m:?}"))),
    }

    let ndim = f.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Header(format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    let dim: Vec<i16> = (0..8).map(|i| f.i16(40 + 2 * i)).collect();
    if ndim < 3 {
        return Err(Error::NotThreeD(ndim));
    }
    if (4..=ndim).any(|d| dim[d] > 1) {
        return Err(Error::NotThreeD(ndim));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let d = dim[a + 1];
        if d < 1 {
            return Err(Error::Header(format!("dim[{}] = {d}", a + 1)));
        }
        dims[a] = d as usize;
    }

    let dt = Datatype::from_code(f.i16(70))?;
    let bitpix = f.i16(72);
    if bitpix as usize != dt.size() * 8 {
        return Err(Error::Header(format!("bitpix {bitpix} inconsistent with datatype {dt:?}")));
    }

    let vox_offset = f.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32 && vox_offset.fract() == 0.0) {
        return Err(Error::Header(format!("vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::Header(format!("dimension overflow {dims:?}")))?;
    let payload = count
        .checked_mul(dt.size())
        .and_then(|v| v.checked_add(offset))
        .ok_or_else(|| Error::Header(format!("dimension overflow {dims:?}")))?;
    if bytes.len() < payload {
        return Err(Error::Header(format!(
            "file holds {} bytes, header implies {payload}",
            bytes.len()
        )));
    }

    let slope = f.f32(112) as f64;
    let inter = f.f32(116) as f64;
    let scale = slope != 0.0 && slope.is_finite() && inter.is_finite() && !(slope == 1.0 && inter == 0.0);

    let data: Vec<f64> = (0..count)
        .map(|n| {
            let v = f.sample(offset + n * dt.size(), dt);
            if scale {
                v * slope + inter
            } else {
                v
            }
        })
        .collect();

    let geometry = header_geometry(&f, dims)?;
    VoxelGrid::new(geometry, data)
}

fn header_geometry(f: &Fields, dims: [usize; 3]) -> Result<Geometry> {
    let pixdim: Vec<f64> = (0..8).map(|i| f.f32(76 + 4 * i) as f64).collect();
    let qform_code = f.i16(252);
    let sform_code = f.i16(254);

    if sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f.f32(280 + 16 * r + 4 * c) as f64;
            }
        }
        a[3][3] = 1.0;
        if let Ok(g) = Geometry::from_affine(dims, a) {
            return Ok(g);
        }
        log::warn!("sform present but not invertible; falling back");
    }
    if qform_code > 0 {
        let quat = [f.f32(256) as f64, f.f32(260) as f64, f.f32(264) as f64];
        let offset = [f.f32(268) as f64, f.f32(272) as f64, f.f32(276) as f64];
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
        let a = quaternion_affine(quat, offset, spacing, qfac);
        if let Ok(g) = Geometry::from_affine(dims, a) {
            return Ok(g);
        }
        log::warn!("qform present but invalid; falling back");
    }
    let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
    log::warn!("no valid sform or qform; using pixdim {spacing:?} with zero origin");
    Geometry::from_spacing(dims, spacing)
}

fn quaternion_affine(q: [f64; 3], offset: [f64; 3], spacing: [f64; 3], qfac: f64) -> Affine {
    let [b, c, d] = q;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ];
    let s = [spacing[0], spacing[1], spacing[2] * qfac];
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[i][j] * s[j];
        }
        out[i][3] = offset[i];
    }
    out[3][3] = 1.0;
    out
}

/// Quaternion `(b, c, d)` and `qfac` for a scaled-rotation affine, or `None`
/// when the columns are not orthogonal.
fn affine_quaternion(a: &Affine) -> Option<([f64; 3], f64)> {
    let s = column_norms(a);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[i][j] / s[j];
        }
    }
    for (x, y) in [(0, 1), (0, 2), (1, 2)] {
        let dot: f64 = (0..3).map(|i| r[i][x] * r[i][y]).sum();
        if dot.abs() > 1e-6 {
            return None;
        }
    }
    let qfac = if det3(a) < 0.0 { -1.0 } else { 1.0 };
    if qfac < 0.0 {
        for row in r.iter_mut() {
            row[2] = -row[2];
        }
    }
    let trace = r[0][0] + r[1][1] + r[2][2];
    let (qa, qb, qc, qd);
    if trace > 0.0 {
        let t = 0.5 / (trace + 1.0).sqrt();
        qa = 0.25 / t;
        qb = (r[2][1] - r[1][2]) * t;
        qc = (r[0][2] - r[2][0]) * t;
        qd = (r[1][0] - r[0][1]) * t;
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let t = 2.0 * (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt();
        qa = (r[2][1] - r[1][2]) / t;
        qb = 0.25 * t;
        qc = (r[0][1] + r[1][0]) / t;
        qd = (r[0][2] + r[2][0]) / t;
    } else if r[1][1] > r[2][2] {
        let t = 2.0 * (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt();
        qa = (r[0][2] - r[2][0]) / t;
        qb = (r[0][1] + r[1][0]) / t;
        qc = 0.25 * t;
        qd = (r[1][2] + r[2][1]) / t;
    } else {
        let t = 2.0 * (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt();
        qa = (r[1][0] - r[0][1]) / t;
        qb = (r[0][2] + r[2][0]) / t;
        qc = (r[1][2] + r[2][1]) / t;
        qd = 0.25 * t;
    }
    // qa is implied; keep it non-negative
    let sign = if qa < 0.0 { -1.0 } else { 1.0 };
    Some(([qb * sign, qc * sign, qd * sign], qfac))
}

/// Saves `grid` using the smallest datatype that holds every value exactly.
/// A path ending in `.gz` is gzip-compressed.
pub fn save_volume(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    save_volume_as(grid, path, Datatype::smallest_lossless(grid.data()))
}

/// Saves `grid` with an explicit datatype; fails if any value would change.
pub fn save_volume_as(grid: &VoxelGrid, path: impl AsRef<Path>, dt: Datatype) -> Result<()> {
    let path = path.as_ref();
    if grid.dims().iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidGrid(format!("dims {:?} exceed the NIfTI-1 limit", grid.dims())));
    }
    if let Some((idx, v)) = grid.data().iter().enumerate().find(|(_, &v)| !dt.represents(v)) {
        return Err(Error::ValueOutOfRange(format!(
            "value {v} at linear index {idx} is not representable as {dt:?}"
        )));
    }
    let bytes = encode(grid, dt);
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode(grid: &VoxelGrid, dt: Datatype) -> Vec<u8> {
    let g = grid.geometry();
    let mut h = vec![0u8; SINGLE_FILE_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r'; // regular
    let dims = g.dims();
    let dim = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, dt.code());
    put_i16(&mut h, 72, (dt.size() * 8) as i16);

    let affine = g.affine();
    let quat = affine_quaternion(affine);
    let spacing = g.spacing();
    let pixdim = [quat.map_or(1.0, |(_, qfac)| qfac), spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p as f32);
    }
    put_f32(&mut h, 108, SINGLE_FILE_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // mm
    let descrip = b"csvd";
    h[148..148 + descrip.len()].copy_from_slice(descrip);

    if let Some((q, _)) = quat {
        put_i16(&mut h, 252, 1);
        for (i, v) in q.iter().enumerate() {
            put_f32(&mut h, 256 + 4 * i, *v as f32);
        }
        for i in 0..3 {
            put_f32(&mut h, 268 + 4 * i, affine[i][3] as f32);
        }
    }
    put_i16(&mut h, 254, 2);
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut h, 280 + 16 * r + 4 * c, affine[r][c] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");

    h.reserve(grid.data().len() * dt.size());
    for &v in grid.data() {
        match dt {
            Datatype::Uint8 => h.push(v as u8),
            Datatype::Int16 => h.extend_from_slice(&(v as i16).to_le_bytes()),
            Datatype::Int32 => h.extend_from_slice(&(v as i32).to_le_bytes()),
            Datatype::Float32 => h.extend_from_slice(&(v as f32).to_le_bytes()),
            Datatype::Float64 => h.extend_from_slice(&v.to_le_bytes()),
        }
    }
    h
}
