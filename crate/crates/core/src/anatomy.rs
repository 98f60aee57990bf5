//! Reliability zones from a brain parcellation and the truncated one-sided
//! distance to the allowed zone.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::edt;
use crate::par::Exec;
use crate::volume::{Geometry, LabelVolume, VoxelGrid};
use crate::{Error, Result};

/// Default truncation of the distance field, in mm.
pub const DEFAULT_DISTANCE_CAP_MM: f64 = 10.0;

/// Reliability tier of a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Zone {
    /// White matter, deep grey nuclei, brainstem.
    Allowed = 1,
    /// Hippocampus, cerebellar white matter.
    Transition = 2,
    /// Cortex, ventricles, extra-cerebral tissue.
    Exclusion = 3,
}

impl TryFrom<u8> for Zone {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Zone::Allowed),
            2 => Ok(Zone::Transition),
            3 => Ok(Zone::Exclusion),
            other => Err(format!("zone tier must be 1, 2 or 3, got {other}")),
        }
    }
}

impl From<Zone> for u8 {
    fn from(z: Zone) -> u8 {
        z as u8
    }
}

/// Parcellation label → zone mapping.
///
/// Serialized as TOML:
///
/// ```toml
/// unlisted = 3
/// zone1 = [2, 41, 10, 49]
/// zone2 = [17, 53]
/// zone3 = [3, 42]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneConfig {
    pub zone1: BTreeSet<u32>,
    pub zone2: BTreeSet<u32>,
    pub zone3: BTreeSet<u32>,
    #[serde(default = "default_unlisted")]
    pub unlisted: Zone,
}

fn default_unlisted() -> Zone {
    Zone::Exclusion
}

// FreeSurfer / FastSurfer aseg+DKT label IDs.
const WHITE_MATTER: &[u32] = &[2, 41, 77, 251, 252, 253, 254, 255];
const DEEP_GREY: &[u32] = &[10, 11, 12, 13, 26, 28, 49, 50, 51, 52, 58, 60];
const BRAINSTEM: &[u32] = &[16];
const HIPPOCAMPUS: &[u32] = &[17, 53];
const CEREBELLAR_WM: &[u32] = &[7, 46];
const VENTRICLES_CSF: &[u32] = &[4, 5, 14, 15, 24, 31, 43, 44, 63];
const CORTEX: &[u32] = &[3, 42];

impl Default for ZoneConfig {
    /// Mapping for FreeSurfer-style whole-brain parcellations (aseg plus
    /// DKT cortical parcels 1000-1035 / 2000-2035). Unlisted labels, including
    /// background and amygdala, fall into Zone 3.
    fn default() -> Self {
        let zone1 = [WHITE_MATTER, DEEP_GREY, BRAINSTEM].concat().into_iter().collect();
        let zone2 = [HIPPOCAMPUS, CEREBELLAR_WM].concat().into_iter().collect();
        let zone3 = CORTEX
            .iter()
            .chain(VENTRICLES_CSF)
            .copied()
            .chain(1000..=1035)
            .chain(2000..=2035)
            .collect();
        Self { zone1, zone2, zone3, unlisted: Zone::Exclusion }
    }
}

impl ZoneConfig {
    pub fn validate(&self) -> Result<()> {
        for (a, b, name) in [
            (&self.zone1, &self.zone2, "zone1/zone2"),
            (&self.zone1, &self.zone3, "zone1/zone3"),
            (&self.zone2, &self.zone3, "zone2/zone3"),
        ] {
            if let Some(l) = a.intersection(b).next() {
                return Err(Error::Config(format!("label {l} listed in both {name}")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("zone config serializes")
    }

    pub fn zone_of(&self, label: u32) -> Zone {
        if self.zone1.contains(&label) {
            Zone::Allowed
        } else if self.zone2.contains(&label) {
            Zone::Transition
        } else if self.zone3.contains(&label) {
            Zone::Exclusion
        } else {
            self.unlisted
        }
    }
}

/// Per-voxel tier.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneMap {
    geometry: Geometry,
    zones: Vec<Zone>,
}

impl ZoneMap {
    pub fn new(geometry: Geometry, zones: Vec<Zone>) -> Result<Self> {
        if zones.len() != geometry.len() {
            return Err(Error::InvalidGrid(format!(
                "zone length {} does not match {} voxels",
                zones.len(),
                geometry.len()
            )));
        }
        Ok(Self { geometry, zones })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn get(&self, index: [usize; 3]) -> Zone {
        self.zones[self.geometry.linear(index)]
    }

    pub fn to_grid(&self) -> VoxelGrid {
        VoxelGrid::new(self.geometry.clone(), self.zones.iter().map(|&z| z as u8 as f64).collect())
            .expect("lengths agree")
    }
}

/// Tier of every voxel from its parcellation label.
pub fn build_zone_map(labels: &LabelVolume, cfg: &ZoneConfig) -> ZoneMap {
    ZoneMap {
        geometry: labels.geometry().clone(),
        zones: labels.labels().iter().map(|&l| cfg.zone_of(l)).collect(),
    }
}

/// Truncated distance to Zone 1, in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    grid: VoxelGrid,
    cap: f64,
}

impl DistanceField {
    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn geometry(&self) -> &Geometry {
        self.grid.geometry()
    }

    pub fn values(&self) -> &[f64] {
        self.grid.data()
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }
}

/// `D(x) = min(cap, distance from x to the nearest Zone-1 voxel center)`.
///
/// `cap` may be `+inf` for an untruncated field.
pub fn distance_field(zones: &ZoneMap, cap: f64) -> Result<DistanceField> {
    distance_field_with(zones, cap, Exec::default())
}

pub fn distance_field_with(zones: &ZoneMap, cap: f64, exec: Exec) -> Result<DistanceField> {
    if !(cap > 0.0) {
        return Err(Error::Config(format!("distance cap must be positive, got {cap}")));
    }
    let seeds: Vec<bool> = zones.zones.iter().map(|&z| z == Zone::Allowed).collect();
    if !seeds.iter().any(|&s| s) {
        return Err(Error::NoAllowedZone);
    }
    let mut d = edt::distance_to_seeds(&zones.geometry, &seeds, exec);
    for v in d.iter_mut() {
        *v = v.min(cap);
    }
    Ok(DistanceField {
        grid: VoxelGrid::new(zones.geometry.clone(), d)?,
        cap,
    })
}
