//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use csvd_core::anatomy::ZoneConfig;
use csvd_core::calibrate::{calibrated_detect_with, connected_components, LesionRecord};
use csvd_core::cohort::{wilcoxon_signed_rank, WilcoxonMethod, WilcoxonResult};
use csvd_core::kernels::{
    cldice_loss, exclusion_loss, gated_attention_forward, soft_skeleton, tversky_loss, AttentionWeights, Tensor4D,
};
use csvd_core::match_eval::{evaluate_case, CaseEvaluation, CaseMetrics, MatchRule};
use csvd_core::par::{self, Exec};
use csvd_core::volume::{
    assert_same_geometry, load_volume, save_volume, BinaryMask, Geometry, LabelVolume, ProbVolume,
};

use crate::checks::run_kernel_checks;
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{read_manifest, read_pairs};
use crate::population::{cohort_statistics, group_subjects, statistics_csv, CohortStatistics, Spread, Subject};
use crate::report::{file_name, sha256_file, sha256_hex, write_text, Report};

/// Name of the mask written by `calibrate`.
pub const MASK_FILE: &str = "mask.nii.gz";
/// Name of the report written by `calibrate`.
pub const LESIONS_FILE: &str = "lesions.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lacune,
    Epvs,
}

impl Task {
    pub fn rule(self, cfg: &PipelineConfig) -> MatchRule {
        match self {
            Task::Lacune => cfg.matching.lacune,
            Task::Epvs => cfg.matching.epvs,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub file: String,
    pub sha256: String,
}

impl InputFile {
    fn of(path: &Path) -> CliResult<Self> {
        Ok(Self { file: file_name(path), sha256: sha256_file(path)? })
    }
}

fn load_mask(path: &Path) -> CliResult<BinaryMask> {
    BinaryMask::from_grid(load_volume(path)?).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

// ---- calibrate -------------------------------------------------------------

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Foreground probability map (NIfTI-1).
    #[arg(long)]
    pub prob: PathBuf,
    /// Parcellation label volume on the same grid (NIfTI-1).
    #[arg(long)]
    pub anatomy: PathBuf,
    /// Output directory for the mask and the lesion report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct MaskSummary {
    pub file: &'static str,
    pub sha256: String,
    pub foreground_voxels: usize,
}

#[derive(Debug, Serialize)]
pub struct CalibrateResult {
    pub prob: InputFile,
    pub anatomy: InputFile,
    pub zones: ZoneConfig,
    pub mask: MaskSummary,
    pub lesion_count: usize,
    pub lesions: Vec<LesionRecord>,
}

pub fn calibrate(args: &CalibrateArgs, cfg: &PipelineConfig, exec: Exec) -> CliResult<()> {
    let zones = cfg.zone_config()?;
    let prob = ProbVolume::new(load_volume(&args.prob)?)
        .map_err(|e| CliError::input(format!("{}: {e}", args.prob.display())))?;
    let anatomy = LabelVolume::from_grid(load_volume(&args.anatomy)?)
        .map_err(|e| CliError::input(format!("{}: {e}", args.anatomy.display())))?;
    let det = calibrated_detect_with(&prob, &anatomy, &zones, &cfg.calibration, exec)?;
    log::info!("{} lesions, {} foreground voxels", det.lesions.len(), det.mask.count());

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", args.out.display())))?;
    let mask_path = args.out.join(MASK_FILE);
    save_volume(&det.mask.to_grid(), &mask_path)?;
    let result = CalibrateResult {
        prob: InputFile::of(&args.prob)?,
        anatomy: InputFile::of(&args.anatomy)?,
        zones,
        mask: MaskSummary { file: MASK_FILE, sha256: sha256_file(&mask_path)?, foreground_voxels: det.mask.count() },
        lesion_count: det.lesions.len(),
        lesions: det.lesions.iter().map(|l| l.record()).collect(),
    };
    Report::new("calibrate", cfg, result).emit(Some(&args.out.join(LESIONS_FILE)))
}

// ---- eval-case -------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvalCaseArgs {
    /// Predicted binary mask (NIfTI-1).
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference binary mask (NIfTI-1).
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum)]
    pub task: Task,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct EvalCaseResult {
    pub task: Task,
    pub rule: MatchRule,
    pub nsd_tolerance_mm: f64,
    pub pred: InputFile,
    pub gt: InputFile,
    pub pred_lesions: Vec<LesionRecord>,
    pub gt_lesions: Vec<LesionRecord>,
    pub evaluation: CaseEvaluation,
}

fn evaluate_masks(pred: &Path, gt: &Path, task: Task, cfg: &PipelineConfig) -> CliResult<EvalCaseResult> {
    let pm = load_mask(pred)?;
    let gm = load_mask(gt)?;
    assert_same_geometry(pm.geometry(), gm.geometry())?;
    let pl = connected_components(&pm, &cfg.calibration);
    let gl = connected_components(&gm, &cfg.calibration);
    let rule = task.rule(cfg);
    let evaluation = evaluate_case(&pl, &gl, &pm, &gm, &rule, cfg.nsd_tolerance_mm)?;
    Ok(EvalCaseResult {
        task,
        rule,
        nsd_tolerance_mm: cfg.nsd_tolerance_mm,
        pred: InputFile::of(pred)?,
        gt: InputFile::of(gt)?,
        pred_lesions: pl.iter().map(|l| l.record()).collect(),
        gt_lesions: gl.iter().map(|l| l.record()).collect(),
        evaluation,
    })
}

pub fn eval_case(args: &EvalCaseArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let result = evaluate_masks(&args.pred, &args.gt, args.task, cfg)?;
    Report::new("eval-case", cfg, result).emit(args.out.as_deref())
}

// ---- eval-cohort -----------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvalCohortArgs {
    /// Cohort manifest (CSV).
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV summary path; defaults to the report path with a `.csv` extension.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Matching rule for rows that reference masks.
    #[arg(long, value_enum, default_value = "lacune")]
    pub task: Task,
}

#[derive(Debug, Serialize)]
pub struct CaseLine {
    pub line: u64,
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    pub pred: InputFile,
    pub gt: InputFile,
    pub metrics: CaseMetrics,
}

#[derive(Debug, Serialize)]
pub struct CaseSummary {
    pub task: Task,
    pub cases: usize,
    pub precision: Option<Spread>,
    pub recall: Option<Spread>,
    pub f1: Option<Spread>,
    pub dsc: Option<Spread>,
    pub nsd: Option<Spread>,
}

#[derive(Debug, Serialize)]
pub struct EvalCohortResult {
    pub manifest: InputFile,
    pub statistics: CohortStatistics,
    pub subjects: Vec<Subject>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case_summary: Option<CaseSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub cases: Vec<CaseLine>,
}

pub fn eval_cohort(args: &EvalCohortArgs, cfg: &PipelineConfig, exec: Exec) -> CliResult<()> {
    let rows = read_manifest(&args.manifest)?;
    let records: Vec<_> = rows.iter().map(|r| r.record.clone()).collect();

    // per-subject mask evaluation, in manifest order whatever the schedule
    let with_masks: Vec<_> = rows.iter().filter(|r| r.pred_mask.is_some()).collect();
    let evaluated: Vec<CliResult<CaseLine>> = par::map_range(exec, with_masks.len(), |i| {
        let row = with_masks[i];
        let (pred, gt) = (row.pred_mask.as_ref().expect("filtered"), row.gt_mask.as_ref().expect("paired"));
        let r = evaluate_masks(pred, gt, args.task, cfg)
            .map_err(|e| CliError::input(format!("manifest line {}: {e}", row.line)))?;
        Ok(CaseLine {
            line: row.line,
            id: row.record.id.clone(),
            region: row.record.region.clone(),
            pred: r.pred,
            gt: r.gt,
            metrics: r.evaluation.metrics,
        })
    });
    let cases = evaluated.into_iter().collect::<CliResult<Vec<_>>>()?;
    let case_summary = (!cases.is_empty()).then(|| {
        let col = |f: fn(&CaseMetrics) -> Option<f64>| {
            Spread::of(&cases.iter().filter_map(|c| f(&c.metrics)).collect::<Vec<_>>())
        };
        CaseSummary {
            task: args.task,
            cases: cases.len(),
            precision: col(|m| Some(m.precision)),
            recall: col(|m| Some(m.recall)),
            f1: col(|m| Some(m.f1)),
            dsc: col(|m| m.dsc),
            nsd: col(|m| m.nsd),
        }
    });

    let statistics = cohort_statistics(&records, &cfg.bootstrap, exec);
    let csv_path = args.csv.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    write_text(Some(&csv_path), &statistics_csv(&statistics))?;
    let result = EvalCohortResult {
        manifest: InputFile::of(&args.manifest)?,
        statistics,
        subjects: group_subjects(&records),
        case_summary,
        cases,
    };
    Report::new("eval-cohort", cfg, result).emit(Some(&args.out))
}

// ---- stats -----------------------------------------------------------------

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// CSV of paired per-case scores.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Column holding the first method's scores.
    #[arg(long, default_value = "a")]
    pub a_column: String,
    /// Column holding the second method's scores.
    #[arg(long, default_value = "b")]
    pub b_column: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct StatsResult {
    pub pairs: InputFile,
    pub columns: [String; 2],
    pub n_pairs: usize,
    pub wilcoxon: WilcoxonResult,
    pub normal_approximation: bool,
    /// Mean and sample SD of `a - b` over all pairs.
    pub difference: Option<Spread>,
}

pub fn stats(args: &StatsArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let (a, b) = read_pairs(&args.pairs, &args.a_column, &args.b_column)?;
    let wilcoxon = wilcoxon_signed_rank(&a, &b)?;
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let result = StatsResult {
        pairs: InputFile::of(&args.pairs)?,
        columns: [args.a_column.clone(), args.b_column.clone()],
        n_pairs: a.len(),
        normal_approximation: wilcoxon.method == WilcoxonMethod::NormalApproximation,
        wilcoxon,
        difference: Spread::of(&diffs),
    };
    Report::new("stats", cfg, result).emit(args.out.as_deref())
}

// ---- check-kernels ---------------------------------------------------------

#[derive(Debug, Args)]
pub struct CheckKernelsArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scale the analytic gradient of the named check, to test the harness.
    #[arg(long, hide = true)]
    pub perturb_gradient: Option<String>,
}

pub fn check_kernels(args: &CheckKernelsArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let report = run_kernel_checks(args.seed, args.perturb_gradient.as_deref(), &cfg.kernels)?;
    let failures = report.failures();
    Report::new("check-kernels", cfg, &report).emit(args.out.as_deref())?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("failed checks: {}", failures.join(", "))))
    }
}

// ---- tensors ---------------------------------------------------------------

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

struct LoadedTensor {
    tensor: Tensor4D,
    geometry: Option<Geometry>,
    source: InputFile,
}

/// NIfTI-1 volumes load as `(1, nz, ny, nx)`; anything else is read as a raw
/// shape-prefixed blob.
fn load_tensor(path: &Path) -> CliResult<LoadedTensor> {
    let source = InputFile::of(path)?;
    if is_nifti(path) {
        let grid = load_volume(path)?;
        Ok(LoadedTensor { tensor: Tensor4D::from_grid(&grid), geometry: Some(grid.geometry().clone()), source })
    } else {
        Ok(LoadedTensor { tensor: Tensor4D::read_raw(path)?, geometry: None, source })
    }
}

fn save_tensor(t: &Tensor4D, path: &Path, geometry: Option<&Geometry>) -> CliResult<String> {
    if is_nifti(path) {
        let [c, d, h, w] = t.shape();
        if c != 1 {
            return Err(CliError::input(format!(
                "{}: a {c}-channel tensor cannot be written as a 3D volume",
                path.display()
            )));
        }
        let geometry = match geometry {
            Some(g) => g.clone(),
            None => Geometry::from_spacing([w, h, d], [1.0; 3])?,
        };
        save_volume(&t.to_grid(&geometry)?, path)?;
    } else {
        t.write_raw(path)?;
    }
    sha256_file(path)
}

#[derive(Debug, Serialize)]
pub struct TensorSummary {
    pub shape: [usize; 4],
    pub sum: f64,
    pub min: f64,
    pub max: f64,
    pub l2_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

impl TensorSummary {
    fn of(t: &Tensor4D) -> Self {
        let d = t.data();
        Self {
            shape: t.shape(),
            sum: csvd_core::par::pairwise_sum(d),
            min: d.iter().copied().fold(f64::INFINITY, f64::min),
            max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            l2_norm: csvd_core::par::pairwise_sum_by(d.len(), |i| d[i] * d[i]).sqrt(),
            file: None,
            sha256: None,
        }
    }

    fn saved(t: &Tensor4D, path: Option<&Path>, geometry: Option<&Geometry>) -> CliResult<Self> {
        let mut s = Self::of(t);
        if let Some(p) = path {
            s.sha256 = Some(save_tensor(t, p, geometry)?);
            s.file = Some(file_name(p));
        }
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct SkeletonizeArgs {
    /// Probability map: NIfTI-1 or raw tensor blob.
    #[arg(long)]
    pub input: PathBuf,
    /// Skeleton output; NIfTI-1 when the name ends in `.nii` or `.nii.gz`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `kernels.skeleton_iterations`.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Summary report path; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct SkeletonizeResult {
    pub input: InputFile,
    pub iterations: usize,
    pub skeleton: TensorSummary,
}

pub fn skeletonize(args: &SkeletonizeArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let input = load_tensor(&args.input)?;
    let iterations = args.iterations.unwrap_or(cfg.kernels.skeleton_iterations);
    let skel = soft_skeleton(&input.tensor, iterations)?;
    let result = SkeletonizeResult {
        input: input.source,
        iterations,
        skeleton: TensorSummary::saved(&skel, Some(&args.out), input.geometry.as_ref())?,
    };
    Report::new("skeletonize", cfg, result).emit(args.report.as_deref())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// Tversky loss of `--pred` against binary `--target`, optional `--valid`.
    Tversky,
    /// Centerline Dice loss of `--pred` against `--target`.
    Cldice,
    /// Exclusion loss; `--pred` is the EPVS map, `--target` the lacune map.
    Exclusion,
    /// Soft skeleton of `--pred`.
    Skeleton,
    /// Gated attention; `--pred` is F_lac, `--target` F_epvs, `--weights` JSON.
    Attention,
}

#[derive(Debug, Args)]
pub struct EvalKernelArgs {
    #[arg(long, value_enum)]
    pub kernel: Kernel,
    /// First operand: NIfTI-1 or raw tensor blob.
    #[arg(long)]
    pub pred: PathBuf,
    /// Second operand, where the kernel takes one.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Validity mask for the Tversky loss.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Attention weights: `{"channels", "reduction", "wq", "wk", "wv"}`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Where to write the gradient with respect to `--pred`.
    #[arg(long)]
    pub grad_out: Option<PathBuf>,
    /// Where to write the kernel's tensor output (skeleton, attention).
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct EvalKernelResult {
    pub kernel: Kernel,
    pub inputs: Vec<InputFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradient: Option<TensorSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<TensorSummary>,
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str, kernel: Kernel) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::input(format!("kernel {kernel:?} needs --{flag}")))
}

pub fn eval_kernel(args: &EvalKernelArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let k = &cfg.kernels;
    let pred = load_tensor(&args.pred)?;
    let geometry = pred.geometry.clone();
    let mut inputs = vec![pred.source];
    let p = pred.tensor;
    let mut second = |flag: &str| -> CliResult<Tensor4D> {
        let path = match flag {
            "target" => required(&args.target, flag, args.kernel)?,
            _ => required(&args.valid, flag, args.kernel)?,
        };
        let t = load_tensor(path)?;
        inputs.push(t.source);
        Ok(t.tensor)
    };
    let g = geometry.as_ref();
    let grad_path = args.grad_out.as_deref();
    let (value, gradient, output) = match args.kernel {
        Kernel::Tversky => {
            let target = second("target")?;
            let valid = if args.valid.is_some() { Some(second("valid")?) } else { None };
            let (v, grad) = tversky_loss(&p, &target, valid.as_ref(), &k.tversky())?;
            (Some(v), Some(TensorSummary::saved(&grad, grad_path, g)?), None)
        }
        Kernel::Cldice => {
            let target = second("target")?;
            let (v, grad) = cldice_loss(&p, &target, k.skeleton_iterations, k.epsilon)?;
            (Some(v), Some(TensorSummary::saved(&grad, grad_path, g)?), None)
        }
        Kernel::Exclusion => {
            let lac = second("target")?;
            let r = exclusion_loss(&p, &lac)?;
            (Some(r.value), Some(TensorSummary::saved(&r.grad_epvs, grad_path, g)?), None)
        }
        Kernel::Skeleton => {
            let s = soft_skeleton(&p, k.skeleton_iterations)?;
            (None, None, Some(TensorSummary::saved(&s, args.output.as_deref(), g)?))
        }
        Kernel::Attention => {
            let f_epvs = second("target")?;
            let wpath = required(&args.weights, "weights", args.kernel)?;
            let text = std::fs::read_to_string(wpath)
                .map_err(|e| CliError::input(format!("cannot read {}: {e}", wpath.display())))?;
            let raw: AttentionWeights = serde_json::from_str(&text)
                .map_err(|e| CliError::input(format!("{}: {e}", wpath.display())))?;
            // re-validate: deserialization does not check shapes
            let w = AttentionWeights::new(
                raw.channels(),
                raw.reduction(),
                raw.wq().to_vec(),
                raw.wk().to_vec(),
                raw.wv().to_vec(),
            )?;
            inputs.push(InputFile { file: file_name(wpath), sha256: sha256_hex(text.as_bytes()) });
            let out = gated_attention_forward(&p, &f_epvs, &w)?;
            (None, None, Some(TensorSummary::saved(&out.f_hat, args.output.as_deref(), g)?))
        }
    };
    let result = EvalKernelResult { kernel: args.kernel, inputs, value, gradient, output };
    Report::new("eval-kernel", cfg, result).emit(args.out.as_deref())
}
