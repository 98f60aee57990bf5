//! Cohort-level statistics over a validated manifest.
//!
//! Rows are grouped by subject id in manifest order. Presence, counts and
//! the global correlation use per-subject totals (counts summed over
//! regions, presence true if any row says so). Spearman's rho is computed
//! per region over rows; rows without a region fall under `all`.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use csvd_core::cohort::{
    balanced_accuracy, bootstrap_by, mae, pearson_r, spearman_rho, Resampling, StatResult, SubjectRecord,
};
use csvd_core::par::Exec;

use crate::config::BootstrapConfig;

/// Region key for rows that carry none.
pub const ALL_REGIONS: &str = "all";

/// A bootstrapped statistic, or the reason it is undefined on this cohort.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Stat {
    Value(StatResult),
    Undefined { error: String },
}

impl From<csvd_core::Result<StatResult>> for Stat {
    fn from(r: csvd_core::Result<StatResult>) -> Self {
        match r {
            Ok(v) => Stat::Value(v),
            Err(e) => Stat::Undefined { error: e.to_string() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Subject {
    pub id: String,
    pub rows: usize,
    pub pred_count: f64,
    pub true_count: f64,
    pub presence_pred: bool,
    pub presence_true: bool,
}

/// Mean and sample standard deviation over cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub sd: Option<f64>,
    pub n: usize,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Self { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortStatistics {
    pub subjects: usize,
    pub rows: usize,
    pub balanced_accuracy: Stat,
    pub mae: Stat,
    /// Cross-subject spread of `|pred_count - true_count|`, reported next
    /// to the bootstrap interval of the MAE.
    pub abs_error: Option<Spread>,
    pub pearson_r: Stat,
    pub spearman_rho: BTreeMap<String, Stat>,
}

pub fn group_subjects(records: &[SubjectRecord]) -> Vec<Subject> {
    let mut order: Vec<Subject> = Vec::new();
    let mut at: HashMap<&str, usize> = HashMap::new();
    for r in records {
        let i = *at.entry(r.id.as_str()).or_insert_with(|| {
            order.push(Subject {
                id: r.id.clone(),
                rows: 0,
                pred_count: 0.0,
                true_count: 0.0,
                presence_pred: false,
                presence_true: false,
            });
            order.len() - 1
        });
        let s = &mut order[i];
        s.rows += 1;
        s.pred_count += r.pred_count;
        s.true_count += r.true_count;
        s.presence_pred |= r.presence_pred;
        s.presence_true |= r.presence_true;
    }
    order
}

pub fn cohort_statistics(records: &[SubjectRecord], boot: &BootstrapConfig, exec: Exec) -> CohortStatistics {
    let plan = Resampling::Random { iters: boot.iters, seed: boot.seed };
    let subjects = group_subjects(records);

    let bacc = bootstrap_by(
        &subjects,
        |s| {
            let pred: Vec<bool> = s.iter().map(|x| x.presence_pred).collect();
            let truth: Vec<bool> = s.iter().map(|x| x.presence_true).collect();
            balanced_accuracy(&pred, &truth)
        },
        plan,
        exec,
    );
    let counts = |s: &[Subject]| -> (Vec<f64>, Vec<f64>) {
        (s.iter().map(|x| x.pred_count).collect(), s.iter().map(|x| x.true_count).collect())
    };
    let mae_stat = bootstrap_by(
        &subjects,
        |s| {
            let (p, t) = counts(s);
            mae(&p, &t)
        },
        plan,
        exec,
    );
    let pearson = bootstrap_by(
        &subjects,
        |s| {
            let (p, t) = counts(s);
            pearson_r(&p, &t)
        },
        plan,
        exec,
    );
    let abs_err: Vec<f64> = subjects.iter().map(|s| (s.pred_count - s.true_count).abs()).collect();

    let mut by_region: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        let key = r.region.clone().unwrap_or_else(|| ALL_REGIONS.to_string());
        by_region.entry(key).or_default().push((r.pred_count, r.true_count));
    }
    let spearman = by_region
        .into_iter()
        .map(|(region, pairs)| {
            let stat = bootstrap_by(
                &pairs,
                |s| {
                    let (p, t): (Vec<f64>, Vec<f64>) = s.iter().copied().unzip();
                    spearman_rho(&p, &t)
                },
                plan,
                exec,
            );
            (region, stat.into())
        })
        .collect();

    CohortStatistics {
        subjects: subjects.len(),
        rows: records.len(),
        balanced_accuracy: bacc.into(),
        mae: mae_stat.into(),
        abs_error: Spread::of(&abs_err),
        pearson_r: pearson.into(),
        spearman_rho: spearman,
    }
}

/// Flat table of the statistics, one line per statistic and scope.
pub fn statistics_csv(stats: &CohortStatistics) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "statistic", "scope", "point", "ci_low", "ci_high", "bootstrap_se", "n", "resamples", "skipped", "seed",
        "error",
    ])
    .expect("in-memory write");
    let mut row = |name: &str, scope: &str, s: &Stat| {
        let rec: Vec<String> = match s {
            Stat::Value(v) => vec![
                name.into(),
                scope.into(),
                v.point.to_string(),
                v.ci_low.to_string(),
                v.ci_high.to_string(),
                v.bootstrap_se.to_string(),
                v.n.to_string(),
                v.resamples.to_string(),
                v.skipped.to_string(),
                v.seed.to_string(),
                String::new(),
            ],
            Stat::Undefined { error } => {
                let mut r = vec![name.to_string(), scope.to_string()];
                r.extend(std::iter::repeat_n(String::new(), 8));
                r.push(error.clone());
                r
            }
        };
        w.write_record(&rec).expect("in-memory write");
    };
    row("balanced_accuracy", "subjects", &stats.balanced_accuracy);
    row("mae", "subjects", &stats.mae);
    row("pearson_r", "subjects", &stats.pearson_r);
    for (region, s) in &stats.spearman_rho {
        row("spearman_rho", region, s);
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
