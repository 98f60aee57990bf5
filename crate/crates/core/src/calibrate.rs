//! Spatially adaptive binarization and lesion extraction.
//!
//! Inside Zone 1 a voxel is foreground when `p >= base`. Elsewhere the bar is
//! raised to `base + lambda * tanh(gamma * D)`, where `D` is the truncated
//! distance to Zone 1. Foreground voxels are then grouped into lesions by
//! connected-component analysis.

use serde::{Deserialize, Serialize};

use crate::anatomy::{self, Zone, ZoneConfig, ZoneMap, DEFAULT_DISTANCE_CAP_MM};
use crate::anatomy::DistanceField;
use crate::par::{self, Exec};
use crate::volume::{assert_same_geometry, BinaryMask, Geometry, LabelVolume, ProbVolume, VoxelGrid};
use crate::{Error, Result};

/// Voxel neighborhood used for connected components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Faces = 6,
    Edges = 18,
    Corners = 26,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Faces),
            18 => Ok(Connectivity::Edges),
            26 => Ok(Connectivity::Corners),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        c as u8
    }
}

impl Connectivity {
    /// Neighbor offsets, in `(dk, dj, di)` lexicographic order.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_l1 = match self {
            Connectivity::Faces => 1,
            Connectivity::Edges => 2,
            Connectivity::Corners => 3,
        };
        let mut out = Vec::new();
        for dk in -1isize..=1 {
            for dj in -1isize..=1 {
                for di in -1isize..=1 {
                    let l1 = di.abs() + dj.abs() + dk.abs();
                    if l1 > 0 && l1 <= max_l1 {
                        out.push([di, dj, dk]);
                    }
                }
            }
        }
        out
    }

    /// Offsets of neighbors that precede a voxel in x-fastest scan order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        self.offsets()
            .into_iter()
            .filter(|&[di, dj, dk]| (dk, dj, di) < (0, 0, 0))
            .collect()
    }
}

/// Threshold and component parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationParams {
    /// Threshold inside Zone 1.
    pub base: f64,
    /// Penalty magnitude.
    pub lambda: f64,
    /// Penalty steepness, per mm.
    pub gamma: f64,
    pub connectivity: Connectivity,
    /// Components smaller than this are dropped.
    pub min_voxels: usize,
    /// Truncation of the distance field, mm.
    pub distance_cap_mm: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            base: 0.5,
            lambda: 0.5,
            gamma: 0.5,
            connectivity: Connectivity::Corners,
            min_voxels: 1,
            distance_cap_mm: DEFAULT_DISTANCE_CAP_MM,
        }
    }
}

impl CalibrationParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base > 0.0 && self.base < 1.0) {
            return bad(format!("base threshold {} not in (0, 1)", self.base));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} is negative", self.lambda));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be positive", self.gamma));
        }
        if !(self.base + self.lambda <= 1.0) {
            return bad(format!("base + lambda = {} exceeds 1", self.base + self.lambda));
        }
        if self.min_voxels == 0 {
            return bad("min_voxels must be at least 1".into());
        }
        if !(self.distance_cap_mm > 0.0) {
            return bad(format!("distance cap {} must be positive", self.distance_cap_mm));
        }
        Ok(())
    }

    /// Threshold for a voxel at distance `d` outside Zone 1.
    #[inline]
    pub fn threshold_at(&self, d: f64) -> f64 {
        self.base + self.lambda * (self.gamma * d).tanh()
    }
}

/// A connected set of foreground voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    /// 1-based rank in the sorted lesion list.
    pub id: usize,
    /// Voxel indices in x-fastest scan order.
    pub voxels: Vec<[usize; 3]>,
    pub centroid_mm: [f64; 3],
    pub voxel_count: usize,
    pub volume_mm3: f64,
    /// Tier at the centroid; `None` until zones are assigned.
    pub zone_tier: Option<Zone>,
}

#[inline]
fn scan_key(ix: &[usize; 3]) -> (usize, usize, usize) {
    (ix[2], ix[1], ix[0])
}

impl Lesion {
    pub fn contains(&self, ix: [usize; 3]) -> bool {
        self.voxels.binary_search_by_key(&scan_key(&ix), scan_key).is_ok()
    }

    /// Mean voxel index.
    pub fn centroid_index(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for v in &self.voxels {
            for a in 0..3 {
                c[a] += v[a] as f64;
            }
        }
        c.map(|s| s / self.voxels.len() as f64)
    }

    /// Number of voxels shared with `other`.
    pub fn overlap(&self, other: &Lesion) -> usize {
        let (mut a, mut b, mut n) = (0, 0, 0);
        while a < self.voxels.len() && b < other.voxels.len() {
            match scan_key(&self.voxels[a]).cmp(&scan_key(&other.voxels[b])) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    a += 1;
                    b += 1;
                }
            }
        }
        n
    }

    /// Inclusive bounding box `(min, max)`.
    pub fn bounds(&self) -> ([usize; 3], [usize; 3]) {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        for v in &self.voxels {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    pub fn record(&self) -> LesionRecord {
        LesionRecord {
            id: self.id,
            voxel_count: self.voxel_count,
            volume_mm3: self.volume_mm3,
            centroid_mm: self.centroid_mm,
            zone_tier: self.zone_tier,
        }
    }
}

/// JSON form of a lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub id: usize,
    pub voxel_count: usize,
    pub volume_mm3: f64,
    pub centroid_mm: [f64; 3],
    pub zone_tier: Option<Zone>,
}

/// `T(x) = base` on Zone 1, `base + lambda * tanh(gamma * D(x))` elsewhere.
pub fn adaptive_threshold(
    distance: &DistanceField,
    zones: &ZoneMap,
    params: &CalibrationParams,
) -> Result<VoxelGrid> {
    adaptive_threshold_with(distance, zones, params, Exec::default())
}

pub fn adaptive_threshold_with(
    distance: &DistanceField,
    zones: &ZoneMap,
    params: &CalibrationParams,
    exec: Exec,
) -> Result<VoxelGrid> {
    assert_same_geometry(distance.geometry(), zones.geometry())?;
    let t = par::zip_map(exec, distance.values(), zones.zones(), |&d, &z| {
        if z == Zone::Allowed {
            params.base
        } else {
            params.threshold_at(d)
        }
    });
    VoxelGrid::new(distance.geometry().clone(), t)
}

/// `M(x) = 1` iff `p(x) >= T(x)`.
pub fn binarize(p: &ProbVolume, threshold: &VoxelGrid) -> Result<BinaryMask> {
    binarize_with(p, threshold, Exec::default())
}

pub fn binarize_with(p: &ProbVolume, threshold: &VoxelGrid, exec: Exec) -> Result<BinaryMask> {
    assert_same_geometry(p.geometry(), threshold.geometry())?;
    let bits = par::zip_map(exec, p.data(), threshold.data(), |&p, &t| p >= t);
    BinaryMask::new(p.geometry().clone(), bits)
}

/// `M(x) = 1` iff `p(x) >= base`, the uncalibrated rule.
pub fn binarize_flat(p: &ProbVolume, base: f64) -> BinaryMask {
    let bits = p.data().iter().map(|&v| v >= base).collect();
    BinaryMask::new(p.geometry().clone(), bits).expect("lengths agree")
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let up = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = up;
            x = up;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Maximal connected foreground sets, largest first.
///
/// Components below `params.min_voxels` are dropped. Ties in size are broken
/// by the smallest voxel in x-fastest scan order. Ids are assigned 1..=n in
/// the returned order; `zone_tier` is left unset.
pub fn connected_components(mask: &BinaryMask, params: &CalibrationParams) -> Vec<Lesion> {
    let geometry = mask.geometry();
    let [nx, ny, nz] = geometry.dims();
    let bits = mask.bits();
    let back = params.connectivity.backward_offsets();

    // two-pass labeling with union-find over provisional labels
    const NONE: u32 = u32::MAX;
    let mut label = vec![NONE; bits.len()];
    let mut sets = DisjointSet { parent: Vec::new() };
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                if !bits[idx] {
                    continue;
                }
                let mut current = NONE;
                for &[di, dj, dk] in &back {
                    let (ni, nj, nk) = (i as isize + di, j as isize + dj, k as isize + dk);
                    if ni < 0 || nj < 0 || nk < 0 || ni >= nx as isize || nj >= ny as isize {
                        continue;
                    }
                    let n = ni as usize + nx * (nj as usize + ny * nk as usize);
                    let l = label[n];
                    if l == NONE {
                        continue;
                    }
                    current = if current == NONE { sets.find(l) } else { sets.union(current, l) };
                }
                label[idx] = if current == NONE { sets.make() } else { current };
            }
        }
    }

    let mut slot = vec![usize::MAX; sets.parent.len()];
    let mut groups: Vec<Vec<[usize; 3]>> = Vec::new();
    for (idx, &l) in label.iter().enumerate() {
        if l == NONE {
            continue;
        }
        let root = sets.find(l) as usize;
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[root]].push(geometry.unlinear(idx));
    }

    // groups are already in order of their first voxel; a stable sort keeps that as the tiebreak
    groups.retain(|g| g.len() >= params.min_voxels);
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));

    groups
        .into_iter()
        .enumerate()
        .map(|(n, voxels)| make_lesion(n + 1, voxels, geometry))
        .collect()
}

pub(crate) fn make_lesion(id: usize, voxels: Vec<[usize; 3]>, geometry: &Geometry) -> Lesion {
    let count = voxels.len();
    let mut lesion = Lesion {
        id,
        voxels,
        centroid_mm: [0.0; 3],
        voxel_count: count,
        volume_mm3: count as f64 * geometry.voxel_volume(),
        zone_tier: None,
    };
    lesion.centroid_mm = geometry.world_of(lesion.centroid_index());
    lesion
}

/// Sets each lesion's tier from the voxel nearest its centroid, or from its
/// first voxel when that voxel lies outside the lesion.
pub fn assign_zone_tiers(lesions: &mut [Lesion], zones: &ZoneMap) {
    let dims = zones.geometry().dims();
    for lesion in lesions.iter_mut() {
        let c = lesion.centroid_index();
        let rounded = [0, 1, 2].map(|a| (c[a].round() as usize).min(dims[a] - 1));
        let at = if lesion.contains(rounded) { rounded } else { lesion.voxels[0] };
        lesion.zone_tier = Some(zones.get(at));
    }
}

/// Output of the calibrated detection pipeline.
#[derive(Debug, Clone)]
pub struct Detection {
    pub mask: BinaryMask,
    pub lesions: Vec<Lesion>,
}

/// Zones → distance field → adaptive threshold → binarization → components.
pub fn calibrated_detect(
    p: &ProbVolume,
    anatomy: &LabelVolume,
    cfg: &ZoneConfig,
    params: &CalibrationParams,
) -> Result<Detection> {
    calibrated_detect_with(p, anatomy, cfg, params, Exec::default())
}

pub fn calibrated_detect_with(
    p: &ProbVolume,
    anatomy: &LabelVolume,
    cfg: &ZoneConfig,
    params: &CalibrationParams,
    exec: Exec,
) -> Result<Detection> {
    params.validate()?;
    cfg.validate()?;
    assert_same_geometry(p.geometry(), anatomy.geometry())?;
    let zones = anatomy::build_zone_map(anatomy, cfg);
    let distance = anatomy::distance_field_with(&zones, params.distance_cap_mm, exec)?;
    let threshold = adaptive_threshold_with(&distance, &zones, params, exec)?;
    let mask = binarize_with(p, &threshold, exec)?;
    let mut lesions = connected_components(&mask, params);
    assign_zone_tiers(&mut lesions, &zones);
    Ok(Detection { mask, lesions })
}
