//! Population-level statistics: presence accuracy, count error,
//! correlations, percentile bootstrap intervals and the paired Wilcoxon
//! signed-rank test.
//!
//! Bootstrap resamples are drawn with ChaCha8, seeded once per run; resample
//! `i` uses stream `i` of that seed, so intervals do not depend on thread
//! count or scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::par::{self, Exec};
use crate::{Error, Result};

/// Default number of bootstrap resamples.
pub const DEFAULT_BOOTSTRAP_ITERS: usize = 2000;

/// Largest sample (after dropping zero differences) handled by the exact
/// Wilcoxon null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// One subject of a cohort manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub pred_count: f64,
    /// Reference count or ordinal rating.
    pub true_count: f64,
    pub presence_pred: bool,
    pub presence_true: bool,
    #[serde(default)]
    pub region: Option<String>,
}

/// Point estimate with a percentile bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Standard deviation of the bootstrap distribution.
    pub bootstrap_se: f64,
    /// Number of subjects.
    pub n: usize,
    /// Resamples on which the statistic was defined.
    pub resamples: usize,
    /// Resamples on which it was not (e.g. zero variance) and that were skipped.
    pub skipped: usize,
    pub seed: u64,
}

fn check_paired(a: usize, b: usize, min: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("paired inputs of length {a} and {b}")));
    }
    if a < min {
        return Err(Error::Undefined(format!("need at least {min} observations, got {a}")));
    }
    Ok(())
}

/// `(sensitivity + specificity) / 2`.
pub fn balanced_accuracy(pred: &[bool], truth: &[bool]) -> Result<f64> {
    check_paired(pred.len(), truth.len(), 1)?;
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        if t {
            pos += 1;
            tp += p as usize;
        } else {
            neg += 1;
            tn += !p as usize;
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined(
            "balanced accuracy needs both positive and negative reference cases".into(),
        ));
    }
    Ok((tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0)
}

/// Mean absolute error.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_paired(pred.len(), truth.len(), 1)?;
    let abs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    Ok(par::pairwise_sum(&abs) / abs.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    check_paired(x.len(), y.len(), 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &o in &order[start..end] {
            ranks[o] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average-tie ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    check_paired(x.len(), y.len(), 2)?;
    pearson_r(&average_ranks(x), &average_ranks(y))
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// How resamples are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    /// `iters` random resamples with replacement.
    Random { iters: usize, seed: u64 },
    /// Every one of the `n^n` ordered resamples; for tiny `n` only.
    Exhaustive,
}

/// Largest `n` accepted by [`Resampling::Exhaustive`].
pub const EXHAUSTIVE_MAX_N: usize = 6;

fn resample_indices(n: usize, plan: Resampling, r: usize, buf: &mut [usize]) {
    match plan {
        Resampling::Random { seed, .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            for b in buf.iter_mut() {
                *b = rng.gen_range(0..n);
            }
        }
        Resampling::Exhaustive => {
            let mut x = r;
            for b in buf.iter_mut() {
                *b = x % n;
                x /= n;
            }
        }
    }
}

/// Percentile bootstrap of an arbitrary statistic over subjects.
///
/// The interval is the 2.5th / 97.5th percentile of the resampled statistic.
/// Resamples on which the statistic is undefined are skipped and counted;
/// the point estimate on the full sample must be defined.
pub fn bootstrap_by<T, F>(items: &[T], statistic: F, plan: Resampling, exec: Exec) -> Result<StatResult>
where
    T: Clone + Send + Sync,
    F: Fn(&[T]) -> Result<f64> + Sync + Send,
{
    let n = items.len();
    if n == 0 {
        return Err(Error::Undefined("bootstrap of an empty sample".into()));
    }
    let point = statistic(items)?;
    let (count, seed) = match plan {
        Resampling::Random { iters, seed } => {
            if iters == 0 {
                return Err(Error::Config("bootstrap needs at least one iteration".into()));
            }
            (iters, seed)
        }
        Resampling::Exhaustive => {
            if n > EXHAUSTIVE_MAX_N {
                return Err(Error::Config(format!(
                    "exhaustive bootstrap limited to n <= {EXHAUSTIVE_MAX_N}, got {n}"
                )));
            }
            (n.pow(n as u32), 0)
        }
    };
    let stats: Vec<Option<f64>> = par::map_range(exec, count, |r| {
        let mut idx = vec![0; n];
        resample_indices(n, plan, r, &mut idx);
        let sample: Vec<T> = idx.iter().map(|&i| items[i].clone()).collect();
        statistic(&sample).ok().filter(|v| v.is_finite())
    });
    let mut ok: Vec<f64> = stats.into_iter().flatten().collect();
    let skipped = count - ok.len();
    if ok.is_empty() {
        return Err(Error::Undefined("statistic undefined on every resample".into()));
    }
    ok.sort_by(f64::total_cmp);
    let mean = par::pairwise_sum(&ok) / ok.len() as f64;
    let var = par::pairwise_sum(&ok.iter().map(|v| (v - mean).powi(2)).collect::<Vec<_>>())
        / (ok.len().max(2) - 1) as f64;
    Ok(StatResult {
        point,
        ci_low: percentile_sorted(&ok, 0.025),
        ci_high: percentile_sorted(&ok, 0.975),
        bootstrap_se: var.sqrt(),
        n,
        resamples: ok.len(),
        skipped,
        seed,
    })
}

/// Aggregators for [`bootstrap_ci`] over plain per-subject values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Mean,
    Median,
}

impl Aggregator {
    pub fn apply(self, v: &[f64]) -> f64 {
        match self {
            Aggregator::Mean => par::pairwise_sum(v) / v.len() as f64,
            Aggregator::Median => {
                let mut s = v.to_vec();
                s.sort_by(f64::total_cmp);
                percentile_sorted(&s, 0.5)
            }
        }
    }
}

/// Percentile bootstrap of a named aggregator over per-subject values.
pub fn bootstrap_ci(values: &[f64], statistic: Aggregator, iters: usize, seed: u64) -> Result<StatResult> {
    bootstrap_ci_with(values, statistic, Resampling::Random { iters, seed }, Exec::default())
}

pub fn bootstrap_ci_with(
    values: &[f64],
    statistic: Aggregator,
    plan: Resampling,
    exec: Exec,
) -> Result<StatResult> {
    bootstrap_by(values, |v| Ok(statistic.apply(v)), plan, exec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Two-sided p-value.
    pub p_value: f64,
    /// Sum of ranks of positive differences.
    pub statistic: f64,
    /// Pairs remaining after dropping zero differences.
    pub n: usize,
    pub zeros_dropped: usize,
    pub method: WilcoxonMethod,
}

/// Paired two-sided Wilcoxon signed-rank test of `a - b`.
///
/// Zero differences are dropped and ties share average ranks. Up to
/// [`WILCOXON_EXACT_MAX_N`] pairs the null distribution is exact: the number
/// of sign assignments reaching each rank sum is counted by dynamic
/// programming over doubled (integer) ranks. Larger samples use the normal
/// approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    check_paired(a.len(), b.len(), 1)?;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let zeros_dropped = a.len() - diffs.len();
    let n = diffs.len();
    if n == 0 {
        return Err(Error::Undefined("all paired differences are zero".into()));
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();

    if n <= WILCOXON_EXACT_MAX_N {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let w2 = (2.0 * w_plus).round() as usize;
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0u64; total + 1];
        counts[0] = 1;
        let mut reach = 0;
        for &r in &doubled {
            reach += r;
            for s in (r..=reach).rev() {
                counts[s] += counts[s - r];
            }
        }
        let le: u64 = counts[..=w2].iter().sum();
        let ge: u64 = counts[w2..].iter().sum();
        let p = (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0);
        return Ok(WilcoxonResult {
            p_value: p,
            statistic: w_plus,
            n,
            zeros_dropped,
            method: WilcoxonMethod::Exact,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut abs_sorted: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    abs_sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && abs_sorted[j] == abs_sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    let p = (2.0 * normal.sf(z)).min(1.0);
    Ok(WilcoxonResult {
        p_value: p,
        statistic: w_plus,
        n,
        zeros_dropped,
        method: WilcoxonMethod::NormalApproximation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_cases() {
        let truth = [true, true, false, false];
        assert_eq!(balanced_accuracy(&truth, &truth).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[true; 4], &truth).unwrap(), 0.5);
        // 5 positives with 4 hits, 5 negatives with 3 correct rejections
        let truth = [true, true, true, true, true, false, false, false, false, false];
        let pred = [true, true, true, true, false, false, false, false, true, true];
        assert!((balanced_accuracy(&pred, &truth).unwrap() - 0.7).abs() < 1e-15);
        assert!(matches!(balanced_accuracy(&[true, false], &[true, true]), Err(Error::Undefined(_))));
        assert!(balanced_accuracy(&[true], &[true, false]).is_err());
    }

    #[test]
    fn mae_cases() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[3.0, 4.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(), 2.0);
        let p: [f64; 4] = [0.3, 7.0, 2.5, 1.0];
        let t = [1.0, 5.0, 2.5, 4.0];
        let mut acc = 0.0;
        for i in 0..4 {
            acc += (p[i] - t[i]).abs();
        }
        assert!((mae(&p, &t).unwrap() - acc / 4.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((pearson_r(&x, &x.map(|v| 2.0 * v)).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_r(&x, &x.map(|v| -v)).unwrap() + 1.0).abs() < 1e-15);
        // y = [2, 4, 5, 4, 5]: mean 4, Sxy = 6, Sxx = 10, Syy = 6
        let y = [2.0, 4.0, 5.0, 4.0, 5.0];
        let expect = 6.0 / (10.0f64.sqrt() * 6.0f64.sqrt());
        assert!((pearson_r(&x, &y).unwrap() - expect).abs() < 1e-15);
        assert!(matches!(pearson_r(&x, &[1.0; 5]), Err(Error::Undefined(_))));
        assert!(pearson_r(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 30.0]), vec![1.0, 2.5, 2.5, 4.0]);
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman_rho(&x, &x.map(|v| v * v * v)).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_rho(&x, &x.map(|v| -v)).unwrap() + 1.0).abs() < 1e-15);
        // ranks [1, 2.5, 2.5, 4] vs [1, 2, 3.5, 3.5]
        // dx = [-1.5, 0, 0, 1.5], dy = [-1.5, -0.5, 1, 1]: Sxy = 3.75, Sxx = 4.5, Syy = 4.5
        let rho = spearman_rho(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 3.0]).unwrap();
        assert!((rho - 3.75 / 4.5).abs() < 1e-15);
        assert!(spearman_rho(&[2.0; 3], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn percentiles() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&s, 0.0), 1.0);
        assert_eq!(percentile_sorted(&s, 1.0), 5.0);
        assert_eq!(percentile_sorted(&s, 0.5), 3.0);
        assert_eq!(percentile_sorted(&s, 0.1), 1.4);
    }

    #[test]
    fn bootstrap_constant_and_determinism() {
        let c = bootstrap_ci(&[3.0; 10], Aggregator::Mean, 500, 1).unwrap();
        assert_eq!((c.point, c.ci_low, c.ci_high), (3.0, 3.0, 3.0));
        let v: Vec<f64> = (0..30).map(|i| (i as f64 * 1.7).sin()).collect();
        let a = bootstrap_ci(&v, Aggregator::Mean, 2000, 42).unwrap();
        let b = bootstrap_ci(&v, Aggregator::Mean, 2000, 42).unwrap();
        assert_eq!(a, b);
        let seq = bootstrap_ci_with(&v, Aggregator::Mean, Resampling::Random { iters: 2000, seed: 42 }, Exec::Sequential)
            .unwrap();
        assert_eq!(a, seq);
        let other = bootstrap_ci(&v, Aggregator::Mean, 2000, 43).unwrap();
        assert_ne!(a.ci_low, other.ci_low);
        assert!(a.ci_low <= a.point && a.point <= a.ci_high);
        assert!(bootstrap_ci(&[], Aggregator::Mean, 10, 0).is_err());
    }

    #[test]
    fn bootstrap_skips_undefined_resamples() {
        let x = [(1.0, 1.0), (2.0, 2.5), (3.0, 2.0), (4.0, 5.0)];
        let r = bootstrap_by(
            &x,
            |s: &[(f64, f64)]| {
                let (a, b): (Vec<f64>, Vec<f64>) = s.iter().copied().unzip();
                pearson_r(&a, &b)
            },
            Resampling::Random { iters: 500, seed: 9 },
            Exec::Parallel,
        )
        .unwrap();
        assert!(r.skipped > 0);
        assert_eq!(r.resamples + r.skipped, 500);
    }

    #[test]
    fn wilcoxon_all_positive_five() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.p_value, 0.0625);
        assert_eq!(r.statistic, 15.0);
        assert_eq!(r.method, WilcoxonMethod::Exact);
    }

    #[test]
    fn wilcoxon_zero_handling() {
        assert!(matches!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Undefined(_))));
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 5.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((r.n, r.zeros_dropped), (2, 1));
    }

    #[test]
    fn wilcoxon_large_sample_uses_normal_approximation() {
        let a: Vec<f64> = (0..30).map(|i| i as f64 + 0.5 * ((i * 7) % 5) as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| i as f64 + 0.3).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, WilcoxonMethod::NormalApproximation);
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }
}
