use std::io::{Read, Write};
use std::path::Path;

use crate::volume::{Geometry, VoxelGrid};
use crate::{Error, Result};

/// Channel-first dense tensor `(C, D, H, W)`, W fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4D {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4D {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero extent in {shape:?}")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| Error::ShapeMismatch(format!("shape {shape:?} overflows")))?;
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// `D * H * W`.
    pub fn spatial_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        w + self.shape[3] * (h + self.shape[2] * (d + self.shape[1] * c))
    }

    pub fn same_shape(&self, other: &Tensor4D, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Fails unless every element is in `[0, 1]`.
    pub fn check_unit_range(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            Some(i) => Err(Error::ValueOutOfRange(format!("{what}[{i}] = {} not in [0, 1]", self.data[i]))),
            None => Ok(()),
        }
    }

    /// Single-channel tensor from a volume: `(1, nz, ny, nx)`.
    pub fn from_grid(grid: &VoxelGrid) -> Self {
        let [nx, ny, nz] = grid.dims();
        Self { shape: [1, nz, ny, nx], data: grid.data().to_vec() }
    }

    /// Inverse of [`Tensor4D::from_grid`] for single-channel tensors.
    pub fn to_grid(&self, geometry: &Geometry) -> Result<VoxelGrid> {
        let [nx, ny, nz] = geometry.dims();
        if self.shape != [1, nz, ny, nx] {
            return Err(Error::ShapeMismatch(format!(
                "tensor {:?} does not fit a {nx}x{ny}x{nz} grid",
                self.shape
            )));
        }
        VoxelGrid::new(geometry.clone(), self.data.clone())
    }

    /// Raw blob: four little-endian `u64` extents `(C, D, H, W)` followed by
    /// little-endian `f64` values.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(32 + 8 * self.data.len());
        for s in self.shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 32 {
            return Err(Error::ShapeMismatch("raw tensor shorter than its 32-byte shape prefix".into()));
        }
        let mut shape = [0usize; 4];
        for (i, s) in shape.iter_mut().enumerate() {
            let v = u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
            *s = usize::try_from(v).map_err(|_| Error::ShapeMismatch(format!("extent {v} too large")))?;
        }
        let payload = &bytes[32..];
        if payload.len() % 8 != 0 {
            return Err(Error::ShapeMismatch("raw payload is not a whole number of f64".into()));
        }
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(shape, data)
    }
}
