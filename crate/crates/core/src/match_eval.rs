//! Instance matching and per-case segmentation metrics.
//!
//! Matching is one-to-one and greedy: every (pred, gt) pair that satisfies
//! the rule is a candidate, candidates are visited best-first, and a pair is
//! accepted when neither side is already taken. Several predictions near one
//! ground-truth lesion therefore count as one true positive plus false
//! positives.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::calibrate::Lesion;
use crate::edt;
use crate::par::Exec;
use crate::volume::{assert_same_geometry, BinaryMask, Geometry};
use crate::{Error, Result};

/// Default NSD tolerance, mm.
pub const DEFAULT_NSD_TOLERANCE_MM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    /// Centroid distance `<= threshold` mm.
    CentroidDistance,
    /// Intersection over union `> threshold`.
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchRule {
    pub kind: MatchKind,
    pub threshold: f64,
}

impl MatchRule {
    /// Lacune rule: centroids within 5 mm.
    pub const LACUNE: MatchRule = MatchRule { kind: MatchKind::CentroidDistance, threshold: 5.0 };
    /// EPVS rule: IoU above 10 %.
    pub const EPVS: MatchRule = MatchRule { kind: MatchKind::Iou, threshold: 0.10 };

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config(format!("match threshold {} must be positive", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    /// Centroid distance (mm) or IoU, depending on the rule.
    pub score: f64,
}

/// One-to-one assignment between predicted and reference lesions, by id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionResult {
    pub matches: Vec<Match>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

impl DetectionResult {
    pub fn tp(&self) -> usize {
        self.matches.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_pred.len()
    }

    pub fn fn_count(&self) -> usize {
        self.unmatched_gt.len()
    }
}

fn centroid_distance(a: &Lesion, b: &Lesion) -> f64 {
    let d: f64 = (0..3).map(|i| (a.centroid_mm[i] - b.centroid_mm[i]).powi(2)).sum();
    d.sqrt()
}

/// Role-independent total order on lesions: centroid, then voxel list.
fn lesion_order(a: &Lesion, b: &Lesion) -> Ordering {
    (0..3)
        .map(|i| a.centroid_mm[i].total_cmp(&b.centroid_mm[i]))
        .fold(Ordering::Equal, Ordering::then)
        .then_with(|| a.voxels.cmp(&b.voxels))
}

/// Intersection counts for every overlapping (pred index, gt index) pair.
fn overlaps(pred: &[Lesion], gt: &[Lesion]) -> HashMap<(usize, usize), usize> {
    // lesions from one mask are disjoint, but callers may pass overlapping ones
    let mut owners: HashMap<[usize; 3], Vec<usize>> = HashMap::new();
    for (g, lesion) in gt.iter().enumerate() {
        for v in &lesion.voxels {
            owners.entry(*v).or_default().push(g);
        }
    }
    let mut out = HashMap::new();
    for (p, lesion) in pred.iter().enumerate() {
        for v in &lesion.voxels {
            for &g in owners.get(v).into_iter().flatten() {
                *out.entry((p, g)).or_insert(0) += 1;
            }
        }
    }
    out
}

/// Greedy best-first one-to-one matching.
///
/// Candidates satisfy the rule (distance `<=` threshold, or IoU strictly `>`
/// threshold) and are ordered by score (smallest distance or largest IoU).
/// Equal scores are ordered by the geometry of the two lesions taken as an
/// unordered pair (centroids, then voxel lists), so the same pairs are
/// accepted when prediction and reference swap roles. Pred id, then gt id,
/// break any remaining tie.
pub fn match_instances(pred: &[Lesion], gt: &[Lesion], rule: &MatchRule) -> DetectionResult {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    match rule.kind {
        MatchKind::CentroidDistance => {
            for (p, a) in pred.iter().enumerate() {
                for (g, b) in gt.iter().enumerate() {
                    let d = centroid_distance(a, b);
                    if d <= rule.threshold {
                        candidates.push((d, p, g));
                    }
                }
            }
        }
        MatchKind::Iou => {
            for ((p, g), inter) in overlaps(pred, gt) {
                let union = pred[p].voxel_count + gt[g].voxel_count - inter;
                let iou = inter as f64 / union as f64;
                if iou > rule.threshold {
                    // negate so that ascending order is best-first
                    candidates.push((-iou, p, g));
                }
            }
        }
    }
    let pair_key = |p: usize, g: usize| {
        let (a, b) = (&pred[p], &gt[g]);
        if lesion_order(a, b).is_le() {
            (a, b)
        } else {
            (b, a)
        }
    };
    candidates.sort_by(|a, b| {
        let (ka, kb) = (pair_key(a.1, a.2), pair_key(b.1, b.2));
        a.0.total_cmp(&b.0)
            .then_with(|| lesion_order(ka.0, kb.0))
            .then_with(|| lesion_order(ka.1, kb.1))
            .then(pred[a.1].id.cmp(&pred[b.1].id))
            .then(gt[a.2].id.cmp(&gt[b.2].id))
    });

    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut matches = Vec::new();
    for (s, p, g) in candidates {
        if pred_used[p] || gt_used[g] {
            continue;
        }
        pred_used[p] = true;
        gt_used[g] = true;
        let score = match rule.kind {
            MatchKind::CentroidDistance => s,
            MatchKind::Iou => -s,
        };
        matches.push(Match { pred: pred[p].id, gt: gt[g].id, score });
    }
    DetectionResult {
        matches,
        unmatched_pred: pred.iter().zip(&pred_used).filter(|(_, &u)| !u).map(|(l, _)| l.id).collect(),
        unmatched_gt: gt.iter().zip(&gt_used).filter(|(_, &u)| !u).map(|(l, _)| l.id).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp_count: usize,
    pub fn_count: usize,
}

/// Precision, recall, F1 and false-positive count.
///
/// With no predictions and no reference lesions every ratio is 1. Otherwise
/// an undefined ratio (empty denominator) is 0, so P and R swap exactly when
/// prediction and reference swap.
pub fn detection_metrics(result: &DetectionResult) -> DetectionMetrics {
    let (tp, fp, fneg) = (result.tp(), result.fp(), result.fn_count());
    let (precision, recall) = if tp + fp == 0 && tp + fneg == 0 {
        (1.0, 1.0)
    } else {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        (ratio(tp, tp + fp), ratio(tp, tp + fneg))
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    DetectionMetrics { precision, recall, f1, tp, fp_count: fp, fn_count: fneg }
}

/// Dice similarity `2|P∩G| / (|P| + |G|)`; 1 when both are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    assert_same_geometry(pred.geometry(), gt.geometry())?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 })
}

/// Foreground voxels with at least one background face neighbor. Out-of-bounds
/// neighbors count as background.
pub fn surface_voxels(mask: &BinaryMask) -> Vec<bool> {
    let g = mask.geometry();
    let [nx, ny, nz] = g.dims();
    let bits = mask.bits();
    let mut out = vec![false; bits.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                if !bits[idx] {
                    continue;
                }
                let interior = i > 0
                    && i + 1 < nx
                    && j > 0
                    && j + 1 < ny
                    && k > 0
                    && k + 1 < nz
                    && bits[idx - 1]
                    && bits[idx + 1]
                    && bits[idx - nx]
                    && bits[idx + nx]
                    && bits[idx - nx * ny]
                    && bits[idx + nx * ny];
                out[idx] = !interior;
            }
        }
    }
    out
}

/// Normalized surface distance at tolerance `tolerance_mm`.
///
/// The fraction of surface voxels of either mask lying within the tolerance
/// of the other mask's surface (center-to-center, mm). Both empty gives 1;
/// exactly one empty gives 0.
pub fn nsd(pred: &BinaryMask, gt: &BinaryMask, tolerance_mm: f64) -> Result<f64> {
    nsd_with(pred, gt, tolerance_mm, Exec::default())
}

pub fn nsd_with(pred: &BinaryMask, gt: &BinaryMask, tolerance_mm: f64, exec: Exec) -> Result<f64> {
    assert_same_geometry(pred.geometry(), gt.geometry())?;
    if !(tolerance_mm > 0.0) {
        return Err(Error::Config(format!("NSD tolerance {tolerance_mm} must be positive")));
    }
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    let (np, ng) = (count(&sp), count(&sg));
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let geometry = pred.geometry();
    let to_gt = edt::distance_to_seeds(geometry, &sg, exec);
    let to_pred = edt::distance_to_seeds(geometry, &sp, exec);
    let within = |surface: &[bool], dist: &[f64]| {
        surface.iter().zip(dist).filter(|(&s, &d)| s && d <= tolerance_mm).count()
    };
    let hits = within(&sp, &to_gt) + within(&sg, &to_pred);
    Ok(hits as f64 / (np + ng) as f64)
}

fn count(bits: &[bool]) -> usize {
    bits.iter().filter(|&&b| b).count()
}

/// Per-case metric block. `dsc` and `nsd` average over matched pairs and are
/// absent when nothing matched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp_count: usize,
    pub fn_count: usize,
    pub dsc: Option<f64>,
    pub nsd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub pred: usize,
    pub gt: usize,
    pub dsc: f64,
    pub nsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub detection: DetectionResult,
    pub pairs: Vec<PairScores>,
    pub metrics: CaseMetrics,
}

/// Masks of two lesions on their joint bounding box padded by one voxel.
fn pair_masks(a: &Lesion, b: &Lesion, geometry: &Geometry) -> Result<(BinaryMask, BinaryMask)> {
    let dims = geometry.dims();
    let (alo, ahi) = a.bounds();
    let (blo, bhi) = b.bounds();
    let mut lo = [0; 3];
    let mut size = [0; 3];
    for ax in 0..3 {
        lo[ax] = alo[ax].min(blo[ax]).saturating_sub(1);
        let hi = (ahi[ax].max(bhi[ax]) + 1).min(dims[ax] - 1);
        size[ax] = hi - lo[ax] + 1;
    }
    let crop = geometry.crop(lo, size)?;
    let shift = |v: &[usize; 3]| [v[0] - lo[0], v[1] - lo[1], v[2] - lo[2]];
    let ma = BinaryMask::from_indices(crop.clone(), &a.voxels.iter().map(shift).collect::<Vec<_>>())?;
    let mb = BinaryMask::from_indices(crop, &b.voxels.iter().map(shift).collect::<Vec<_>>())?;
    Ok((ma, mb))
}

/// Detection metrics over instances plus DSC / NSD per matched pair,
/// each computed on the two lesions in isolation and then averaged.
pub fn evaluate_case(
    pred_lesions: &[Lesion],
    gt_lesions: &[Lesion],
    pred_mask: &BinaryMask,
    gt_mask: &BinaryMask,
    rule: &MatchRule,
    nsd_tolerance_mm: f64,
) -> Result<CaseEvaluation> {
    rule.validate()?;
    assert_same_geometry(pred_mask.geometry(), gt_mask.geometry())?;
    let geometry = pred_mask.geometry();
    let detection = match_instances(pred_lesions, gt_lesions, rule);
    let dm = detection_metrics(&detection);

    let by_id = |ls: &[Lesion], id: usize| ls.iter().find(|l| l.id == id).cloned();
    let mut pairs = Vec::with_capacity(detection.matches.len());
    for m in &detection.matches {
        let p = by_id(pred_lesions, m.pred).expect("matched id exists");
        let g = by_id(gt_lesions, m.gt).expect("matched id exists");
        let (mp, mg) = pair_masks(&p, &g, geometry)?;
        pairs.push(PairScores {
            pred: m.pred,
            gt: m.gt,
            dsc: dice(&mp, &mg)?,
            nsd: nsd_with(&mp, &mg, nsd_tolerance_mm, Exec::Sequential)?,
        });
    }
    let mean = |f: fn(&PairScores) -> f64| {
        (!pairs.is_empty()).then(|| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64)
    };
    let metrics = CaseMetrics {
        precision: dm.precision,
        recall: dm.recall,
        f1: dm.f1,
        tp: dm.tp,
        fp_count: dm.fp_count,
        fn_count: dm.fn_count,
        dsc: mean(|p| p.dsc),
        nsd: mean(|p| p.nsd),
    };
    Ok(CaseEvaluation { detection, pairs, metrics })
}
