//! Pipeline configuration.
//!
//! One TOML file holds every tunable constant. Missing keys take the built-in
//! defaults, and each `--set dotted.key=value` flag overrides one key after
//! the file is read. The resolved configuration is embedded in every report
//! together with its SHA-256.
//!
//! ```toml
//! nsd_tolerance_mm = 1.0
//!
//! [calibration]
//! base = 0.5
//! lambda = 0.5
//! gamma = 0.5
//! connectivity = 26
//! min_voxels = 1
//! distance_cap_mm = 10.0
//!
//! [matching.lacune]
//! kind = "centroid_distance"
//! threshold = 5.0
//!
//! [bootstrap]
//! iters = 2000
//! seed = 0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use csvd_core::anatomy::ZoneConfig;
use csvd_core::calibrate::CalibrationParams;
use csvd_core::cohort::DEFAULT_BOOTSTRAP_ITERS;
use csvd_core::kernels::{
    TverskyParams, DEFAULT_DEEP_SUPERVISION_WEIGHTS, DEFAULT_EPSILON, DEFAULT_LAMBDA_EXCL,
    DEFAULT_SKELETON_ITERATIONS,
};
use csvd_core::match_eval::{MatchRule, DEFAULT_NSD_TOLERANCE_MM};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingConfig {
    pub lacune: MatchRule,
    pub epvs: MatchRule,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self { lacune: MatchRule::LACUNE, epvs: MatchRule::EPVS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub iters: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { iters: DEFAULT_BOOTSTRAP_ITERS, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// Tversky false-positive weight.
    pub alpha: f64,
    /// Tversky false-negative weight.
    pub beta: f64,
    pub epsilon: f64,
    pub lambda_excl: f64,
    pub skeleton_iterations: usize,
    pub deep_supervision_weights: Vec<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        let t = TverskyParams::default();
        Self {
            alpha: t.alpha,
            beta: t.beta,
            epsilon: DEFAULT_EPSILON,
            lambda_excl: DEFAULT_LAMBDA_EXCL,
            skeleton_iterations: DEFAULT_SKELETON_ITERATIONS,
            deep_supervision_weights: DEFAULT_DEEP_SUPERVISION_WEIGHTS.to_vec(),
        }
    }
}

impl KernelConfig {
    pub fn tversky(&self) -> TverskyParams {
        TverskyParams { alpha: self.alpha, beta: self.beta, epsilon: self.epsilon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Label-to-zone mapping file; the built-in FreeSurfer mapping when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zone_config_path: Option<PathBuf>,
    pub nsd_tolerance_mm: f64,
    pub calibration: CalibrationParams,
    pub matching: MatchingConfig,
    pub bootstrap: BootstrapConfig,
    pub kernels: KernelConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            zone_config_path: None,
            nsd_tolerance_mm: DEFAULT_NSD_TOLERANCE_MM,
            calibration: CalibrationParams::default(),
            matching: MatchingConfig::default(),
            bootstrap: BootstrapConfig::default(),
            kernels: KernelConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Defaults, then the file at `path` if any, then `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = toml::Table::try_from(Self::default()).expect("defaults serialize");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
            let file: toml::Table = text
                .parse()
                .map_err(|e| CliError::input(format!("config {}: {e}", path.display())))?;
            merge(&mut table, file);
            // relative zone paths are relative to the config file
            if let Some(toml::Value::String(z)) = table.get("zone_config_path") {
                let z = PathBuf::from(z);
                if z.is_relative() {
                    let base = path.parent().unwrap_or(Path::new(""));
                    table.insert(
                        "zone_config_path".into(),
                        toml::Value::String(base.join(z).to_string_lossy().into_owned()),
                    );
                }
            }
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::input(format!("invalid configuration: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.calibration.validate()?;
        self.matching.lacune.validate()?;
        self.matching.epvs.validate()?;
        self.kernels.tversky().validate()?;
        let bad = |m: String| Err(CliError::Input(format!("invalid configuration: {m}")));
        if !(self.nsd_tolerance_mm >= 0.0 && self.nsd_tolerance_mm.is_finite()) {
            return bad(format!("nsd_tolerance_mm {} must be non-negative", self.nsd_tolerance_mm));
        }
        if self.bootstrap.iters == 0 {
            return bad("bootstrap.iters must be at least 1".into());
        }
        let k = &self.kernels;
        if !(k.lambda_excl >= 0.0 && k.lambda_excl.is_finite()) {
            return bad(format!("kernels.lambda_excl {} must be non-negative", k.lambda_excl));
        }
        let w = &k.deep_supervision_weights;
        if w.is_empty() || w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !(w.iter().sum::<f64>() > 0.0) {
            return bad(format!("kernels.deep_supervision_weights {w:?} must be non-negative with a positive sum"));
        }
        Ok(())
    }

    pub fn zone_config(&self) -> CliResult<ZoneConfig> {
        match &self.zone_config_path {
            Some(p) => ZoneConfig::load(p).map_err(|e| CliError::input(format!("zone config: {e}"))),
            None => Ok(ZoneConfig::default()),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal and taken as a
/// bare string when that fails, so `--set matching.epvs.kind=iou` works.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::input(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::input(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        node = match node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default())) {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::input(format!("override key `{key}`: `{p}` is not a table"))),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
