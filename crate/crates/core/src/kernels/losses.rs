use serde::{Deserialize, Serialize};

use super::Tensor4D;
use crate::par::{pairwise_sum, pairwise_sum_by};
use crate::{Error, Result};

/// Smoothing term for Tversky and clDice.
pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Weight of the mutual-exclusion term.
pub const DEFAULT_LAMBDA_EXCL: f64 = 1.0;
/// Deep-supervision weights, full resolution first.
pub const DEFAULT_DEEP_SUPERVISION_WEIGHTS: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TverskyParams {
    /// False-positive weight.
    pub alpha: f64,
    /// False-negative weight.
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.9, epsilon: DEFAULT_EPSILON }
    }
}

impl TverskyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid Tversky parameters {self:?}")));
        }
        Ok(())
    }
}

fn check_binary(t: &Tensor4D, what: &str) -> Result<()> {
    match t.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(Error::ValueOutOfRange(format!("{what}[{i}] = {} is not binary", t.data()[i]))),
        None => Ok(()),
    }
}

/// Tversky loss over valid voxels and its gradient with respect to `p`.
///
/// `TP = Σ v·p·g`, `FP = Σ v·p·(1-g)`, `FN = Σ v·(1-p)·g`, and
/// `loss = 1 - (TP + ε) / (TP + α·FP + β·FN + ε)`. The gradient is exactly
/// zero wherever `valid` is 0. `valid = None` means every voxel counts.
pub fn tversky_loss(
    p: &Tensor4D,
    g: &Tensor4D,
    valid: Option<&Tensor4D>,
    params: &TverskyParams,
) -> Result<(f64, Tensor4D)> {
    params.validate()?;
    p.same_shape(g, "prediction/target")?;
    p.check_unit_range("prediction")?;
    check_binary(g, "target")?;
    if let Some(v) = valid {
        p.same_shape(v, "prediction/validity")?;
        check_binary(v, "validity")?;
    }
    let (pd, gd) = (p.data(), g.data());
    let vd = |i: usize| valid.map_or(1.0, |v| v.data()[i]);
    let n = pd.len();

    let tp = pairwise_sum_by(n, |i| vd(i) * pd[i] * gd[i]);
    let fp = pairwise_sum_by(n, |i| vd(i) * pd[i] * (1.0 - gd[i]));
    let fneg = pairwise_sum_by(n, |i| vd(i) * (1.0 - pd[i]) * gd[i]);
    let TverskyParams { alpha, beta, epsilon } = *params;

    let num = tp + epsilon;
    let den = tp + alpha * fp + beta * fneg + epsilon;
    let loss = 1.0 - num / den;

    // d/dp of num and den per voxel, then the quotient rule
    let grad = (0..n)
        .map(|i| {
            let v = vd(i);
            if v == 0.0 {
                return 0.0;
            }
            let dnum = v * gd[i];
            let dden = v * (gd[i] + alpha * (1.0 - gd[i]) - beta * gd[i]);
            -(dnum * den - num * dden) / (den * den)
        })
        .collect();
    Ok((loss, Tensor4D::new(p.shape(), grad)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExclusionLoss {
    pub value: f64,
    pub grad_epvs: Tensor4D,
    pub grad_lac: Tensor4D,
}

/// Mean voxelwise product `(1/|Ω|) Σ p_epvs·p_lac`, with `|Ω|` the number of
/// elements.
pub fn exclusion_loss(p_epvs: &Tensor4D, p_lac: &Tensor4D) -> Result<ExclusionLoss> {
    p_epvs.same_shape(p_lac, "EPVS/lacune probabilities")?;
    p_epvs.check_unit_range("EPVS probability")?;
    p_lac.check_unit_range("lacune probability")?;
    let (a, b) = (p_epvs.data(), p_lac.data());
    let n = a.len() as f64;
    let value = pairwise_sum_by(a.len(), |i| a[i] * b[i]) / n;
    Ok(ExclusionLoss {
        value,
        grad_epvs: Tensor4D::new(p_epvs.shape(), b.iter().map(|v| v / n).collect())?,
        grad_lac: Tensor4D::new(p_lac.shape(), a.iter().map(|v| v / n).collect())?,
    })
}

/// Learnable log-variances and the exclusion weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyState {
    pub s_epvs: f64,
    pub s_lac: f64,
    pub lambda_excl: f64,
}

impl Default for UncertaintyState {
    fn default() -> Self {
        Self { s_epvs: 0.0, s_lac: 0.0, lambda_excl: DEFAULT_LAMBDA_EXCL }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalLoss {
    pub value: f64,
    pub d_s_epvs: f64,
    pub d_s_lac: f64,
    pub d_l_epvs: f64,
    pub d_l_lac: f64,
    pub d_l_excl: f64,
}

/// `Σ_t (e^{-s_t}·L_t + s_t) + λ_excl·L_excl` over t ∈ {EPVS, lacune}.
pub fn total_loss(l_epvs: f64, l_lac: f64, l_excl: f64, state: &UncertaintyState) -> Result<TotalLoss> {
    let inputs = [l_epvs, l_lac, l_excl, state.s_epvs, state.s_lac, state.lambda_excl];
    if let Some(i) = inputs.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    if state.lambda_excl < 0.0 {
        return Err(Error::Config(format!("lambda_excl {} is negative", state.lambda_excl)));
    }
    let we = (-state.s_epvs).exp();
    let wl = (-state.s_lac).exp();
    let value = (we * l_epvs + state.s_epvs) + (wl * l_lac + state.s_lac) + state.lambda_excl * l_excl;
    Ok(TotalLoss {
        value,
        d_s_epvs: 1.0 - we * l_epvs,
        d_s_lac: 1.0 - wl * l_lac,
        d_l_epvs: we,
        d_l_lac: wl,
        d_l_excl: state.lambda_excl,
    })
}

/// Weighted mean of per-scale losses.
pub fn deep_supervision_aggregate(scale_losses: &[f64], weights: &[f64]) -> Result<f64> {
    if scale_losses.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scale losses but {} weights",
            scale_losses.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config("deep-supervision weights must be non-negative".into()));
    }
    let total = pairwise_sum(weights);
    if !(total > 0.0) {
        return Err(Error::Config("deep-supervision weights sum to zero".into()));
    }
    let weighted: Vec<f64> = scale_losses.iter().zip(weights).map(|(l, w)| l * w).collect();
    Ok(pairwise_sum(&weighted) / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f64>) -> Tensor4D {
        let n = data.len();
        Tensor4D::new([1, 1, 1, n], data).unwrap()
    }

    #[test]
    fn tversky_perfect_prediction_is_zero() {
        let g = t(vec![1.0, 0.0, 1.0, 0.0]);
        let (l, _) = tversky_loss(&g, &g, None, &TverskyParams::default()).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn tversky_inverted_prediction_is_near_one() {
        let g = t(vec![1.0, 0.0, 1.0, 0.0]);
        let p = t(vec![0.0, 1.0, 0.0, 1.0]);
        let prm = TverskyParams::default();
        let (l, _) = tversky_loss(&p, &g, None, &prm).unwrap();
        let expect = 1.0 - prm.epsilon / (0.1 * 2.0 + 0.9 * 2.0 + prm.epsilon);
        assert!((l - expect).abs() < 1e-15);
        assert!(l > 0.9999);
    }

    #[test]
    fn tversky_input_validation() {
        let g = t(vec![1.0, 0.0]);
        assert!(tversky_loss(&t(vec![1.5, 0.0]), &g, None, &TverskyParams::default()).is_err());
        assert!(tversky_loss(&t(vec![0.5, 0.0]), &t(vec![0.5, 0.0]), None, &TverskyParams::default()).is_err());
        assert!(tversky_loss(&t(vec![0.5]), &g, None, &TverskyParams::default()).is_err());
        let bad = TverskyParams { epsilon: 0.0, ..Default::default() };
        assert!(tversky_loss(&t(vec![0.5, 0.0]), &g, None, &bad).is_err());
    }

    #[test]
    fn tversky_masked_voxels_have_zero_gradient() {
        let p = t(vec![0.3, 0.6, 0.9, 0.1]);
        let g = t(vec![1.0, 0.0, 1.0, 0.0]);
        let v = t(vec![1.0, 0.0, 1.0, 0.0]);
        let (_, grad) = tversky_loss(&p, &g, Some(&v), &TverskyParams::default()).unwrap();
        assert_eq!(grad.data()[1].to_bits(), 0.0f64.to_bits());
        assert_eq!(grad.data()[3].to_bits(), 0.0f64.to_bits());
        assert!(grad.data()[0] != 0.0);
    }

    #[test]
    fn exclusion_anchor_values() {
        let z = t(vec![0.0; 8]);
        let h = t(vec![0.5; 8]);
        assert_eq!(exclusion_loss(&z, &h).unwrap().value, 0.0);
        assert_eq!(exclusion_loss(&h, &h).unwrap().value, 0.25);
        assert!(exclusion_loss(&h, &t(vec![0.5; 4])).is_err());
    }

    #[test]
    fn total_loss_reduces_to_sum() {
        let s = UncertaintyState { s_epvs: 0.0, s_lac: 0.0, lambda_excl: 0.0 };
        let r = total_loss(0.37, 0.81, 0.4, &s).unwrap();
        assert_eq!(r.value, 0.37 + 0.81);
        let r = total_loss(1.0, 1.0, 0.0, &s).unwrap();
        assert_eq!((r.d_s_epvs, r.d_s_lac), (0.0, 0.0));
        assert!(total_loss(f64::NAN, 1.0, 0.0, &s).is_err());
    }

    #[test]
    fn deep_supervision_cases() {
        assert_eq!(deep_supervision_aggregate(&[0.42], &[1.0]).unwrap(), 0.42);
        assert!((deep_supervision_aggregate(&[0.3, 0.6, 0.9], &[1.0; 3]).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(deep_supervision_aggregate(&[0.2, 100.0], &[1.0, 0.0]).unwrap(), 0.2);
        assert!(deep_supervision_aggregate(&[0.2], &[1.0, 1.0]).is_err());
        assert!(deep_supervision_aggregate(&[0.2], &[0.0]).is_err());
        assert!(deep_supervision_aggregate(&[0.2], &[-1.0]).is_err());
    }
}
