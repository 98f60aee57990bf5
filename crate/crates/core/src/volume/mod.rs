//! Voxel grids and their geometry.
//!
//! All volumes share one linearization: `i + nx * (j + ny * k)`, i.e. x varies
//! fastest. Scalar fields are stored as `f64`; labels as exact `u32`; masks as
//! `bool`.

mod nifti;

pub use nifti::{load_volume, save_volume, save_volume_as, Datatype};

use crate::{Error, Result};

/// Affine tolerance used by [`assert_same_geometry`], in mm per element.
pub const GEOMETRY_TOLERANCE_MM: f64 = 1e-4;

/// Slack allowed when constructing probability volumes; values within it are clamped.
pub const PROB_SLACK: f64 = 1e-9;

/// Row-major 4x4 index-to-world matrix.
pub type Affine = [[f64; 4]; 4];

/// Dimensions, spacing and index-to-world map of a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Affine,
}

impl Geometry {
    /// Validated geometry. The spacing must equal the column norms of the
    /// upper-left 3x3 block of `affine` to 1e-6 relative.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: Affine) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("zero dimension in {dims:?}")));
        }
        dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::InvalidGrid(format!("dimension overflow in {dims:?}")))?;
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid(format!("non-positive spacing {spacing:?}")));
        }
        if affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite affine".into()));
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidGrid(format!(
                "affine bottom row must be [0, 0, 0, 1], got {:?}",
                affine[3]
            )));
        }
        let norms = column_norms(&affine);
        for axis in 0..3 {
            if (norms[axis] - spacing[axis]).abs() > 1e-6 * spacing[axis] {
                return Err(Error::InvalidGrid(format!(
                    "affine column {axis} has norm {} but spacing is {}",
                    norms[axis], spacing[axis]
                )));
            }
        }
        let det = det3(&affine);
        if det.abs() <= 1e-12 * spacing.iter().product::<f64>() {
            return Err(Error::InvalidGrid("affine is singular".into()));
        }
        Ok(Self { dims, spacing, affine })
    }

    /// Axis-aligned geometry whose affine is `diag(spacing)` with zero origin.
    pub fn from_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, diagonal_affine(spacing, [0.0; 3]))
    }

    /// Geometry with spacing taken from the affine's column norms.
    pub fn from_affine(dims: [usize; 3], affine: Affine) -> Result<Self> {
        Self::new(dims, column_norms(&affine), affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    /// Total voxel count.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn linear(&self, [i, j, k]: [usize; 3]) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unlinear(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn contains(&self, [i, j, k]: [usize; 3]) -> bool {
        i < self.dims[0] && j < self.dims[1] && k < self.dims[2]
    }

    /// World coordinates (mm) of a voxel center.
    pub fn index_to_world(&self, index: [usize; 3]) -> Result<[f64; 3]> {
        if !self.contains(index) {
            return Err(Error::IndexOutOfRange(index[0], index[1], index[2]));
        }
        Ok(self.world_of([index[0] as f64, index[1] as f64, index[2] as f64]))
    }

    /// Affine applied to a continuous index; no range check.
    #[inline]
    pub fn world_of(&self, p: [f64; 3]) -> [f64; 3] {
        let a = &self.affine;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + a[r][3];
        }
        out
    }

    /// Same spacing and orientation, `dims` voxels starting at `origin` of this grid.
    pub fn crop(&self, origin: [usize; 3], dims: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if dims[a] == 0 || origin[a] + dims[a] > self.dims[a] {
                return Err(Error::IndexOutOfRange(origin[0], origin[1], origin[2]));
            }
        }
        let shift = self.world_of([origin[0] as f64, origin[1] as f64, origin[2] as f64]);
        let mut affine = self.affine;
        for (r, s) in shift.iter().enumerate() {
            affine[r][3] = *s;
        }
        Ok(Self { dims, spacing: self.spacing, affine })
    }
}

/// `diag(spacing)` with translation `origin`.
pub fn diagonal_affine(spacing: [f64; 3], origin: [f64; 3]) -> Affine {
    [
        [spacing[0], 0.0, 0.0, origin[0]],
        [0.0, spacing[1], 0.0, origin[1]],
        [0.0, 0.0, spacing[2], origin[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub(crate) fn column_norms(a: &Affine) -> [f64; 3] {
    let mut n = [0.0; 3];
    for (c, v) in n.iter_mut().enumerate() {
        *v = (a[0][c] * a[0][c] + a[1][c] * a[1][c] + a[2][c] * a[2][c]).sqrt();
    }
    n
}

pub(crate) fn det3(a: &Affine) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Passes iff dims are equal and affines agree within [`GEOMETRY_TOLERANCE_MM`] per element.
pub fn assert_same_geometry(a: &Geometry, b: &Geometry) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::GeometryMismatch(format!("dims {:?} vs {:?}", a.dims, b.dims)));
    }
    for r in 0..4 {
        for c in 0..4 {
            let d = (a.affine[r][c] - b.affine[r][c]).abs();
            if d > GEOMETRY_TOLERANCE_MM {
                return Err(Error::GeometryMismatch(format!(
                    "affine element ({r}, {c}) differs by {d:e} mm"
                )));
            }
        }
    }
    Ok(())
}

/// A scalar field on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    geometry: Geometry,
    data: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(geometry: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match {} voxels",
                data.len(),
                geometry.len()
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f64) -> Self {
        let n = geometry.len();
        Self { geometry, data: vec![value; n] }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn get(&self, index: [usize; 3]) -> f64 {
        self.data[self.geometry.linear(index)]
    }

    pub fn index_to_world(&self, index: [usize; 3]) -> Result<[f64; 3]> {
        self.geometry.index_to_world(index)
    }
}

/// `affine · (i, j, k, 1)` for an in-range index.
pub fn index_to_world(grid: &VoxelGrid, index: [usize; 3]) -> Result<[f64; 3]> {
    grid.index_to_world(index)
}

/// Foreground probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume(VoxelGrid);

impl ProbVolume {
    /// Rejects values outside `[0, 1]` by more than [`PROB_SLACK`] (and NaN);
    /// values inside the slack are clamped.
    pub fn new(mut grid: VoxelGrid) -> Result<Self> {
        for (idx, v) in grid.data.iter_mut().enumerate() {
            if !(*v >= -PROB_SLACK && *v <= 1.0 + PROB_SLACK) {
                return Err(Error::ValueOutOfRange(format!(
                    "probability {v} at linear index {idx}"
                )));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.0
    }

    pub fn geometry(&self) -> &Geometry {
        &self.0.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }
}

/// Non-negative integer labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::InvalidGrid(format!(
                "label length {} does not match {} voxels",
                labels.len(),
                geometry.len()
            )));
        }
        Ok(Self { geometry, labels })
    }

    /// Converts a scalar grid, rejecting non-integer or negative values.
    pub fn from_grid(grid: VoxelGrid) -> Result<Self> {
        let labels = grid
            .data
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                if v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0 {
                    Ok(v as u32)
                } else {
                    Err(Error::ValueOutOfRange(format!("label {v} at linear index {idx}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { geometry: grid.geometry, labels })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn to_grid(&self) -> VoxelGrid {
        VoxelGrid {
            geometry: self.geometry.clone(),
            data: self.labels.iter().map(|&l| l as f64).collect(),
        }
    }
}

/// Strictly binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    geometry: Geometry,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(geometry: Geometry, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != geometry.len() {
            return Err(Error::InvalidGrid(format!(
                "mask length {} does not match {} voxels",
                bits.len(),
                geometry.len()
            )));
        }
        Ok(Self { geometry, bits })
    }

    pub fn empty(geometry: Geometry) -> Self {
        let n = geometry.len();
        Self { geometry, bits: vec![false; n] }
    }

    /// Converts a scalar grid whose values must be exactly 0 or 1.
    pub fn from_grid(grid: VoxelGrid) -> Result<Self> {
        let bits = grid
            .data
            .iter()
            .enumerate()
            .map(|(idx, &v)| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                v => Err(Error::ValueOutOfRange(format!(
                    "mask value {v} at linear index {idx} is not 0 or 1"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { geometry: grid.geometry, bits })
    }

    /// Mask from a list of voxel indices.
    pub fn from_indices(geometry: Geometry, indices: &[[usize; 3]]) -> Result<Self> {
        let mut mask = Self::empty(geometry);
        for &ix in indices {
            if !mask.geometry.contains(ix) {
                return Err(Error::IndexOutOfRange(ix[0], ix[1], ix[2]));
            }
            let l = mask.geometry.linear(ix);
            mask.bits[l] = true;
        }
        Ok(mask)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, index: [usize; 3]) -> bool {
        self.bits[self.geometry.linear(index)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_grid(&self) -> VoxelGrid {
        VoxelGrid {
            geometry: self.geometry.clone(),
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}
