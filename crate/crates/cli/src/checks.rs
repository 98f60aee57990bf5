//! Self-checks of the loss and attention kernels.
//!
//! Each check draws its own random instances from `(seed, check index)` and
//! records the worst error seen. Gradients are compared with central finite
//! differences; forward values with direct evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use csvd_core::kernels::{
    cldice_loss, exclusion_loss, finite_difference_check, finite_difference_check_filtered,
    gated_attention_backward, gated_attention_forward, total_loss, tversky_loss, AttentionWeights, FdScheme,
    SkeletonTape, Tensor4D, UncertaintyState,
};
use csvd_core::Result as CoreResult;

use crate::config::KernelConfig;
use crate::error::{CliError, CliResult};

/// Names accepted by `--perturb-gradient`.
pub const GRADIENT_CHECKS: [&str; 5] =
    ["tversky_gradient", "exclusion_gradient", "total_loss_gradient", "cldice_gradient", "attention_gradient"];

/// Relative factor applied to a perturbed analytic gradient.
const PERTURBATION: f64 = 1e-3;

/// Smallest clDice gradient component held to the relative bound. Central
/// differences of a loss of order one cannot resolve smaller components to
/// 1e-5 relative, so those are held to an absolute bound instead.
const CLDICE_RESOLVABLE: f64 = 1e-7;

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// What `value` measures.
    pub metric: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub instances: usize,
}

impl CheckOutcome {
    fn new(name: &'static str, metric: &'static str, value: f64, threshold: f64, instances: usize) -> Self {
        // a NaN value fails
        Self { name, passed: value < threshold, metric, value, threshold, instances }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub seed: u64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturbed: Option<String>,
    pub checks: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor4D {
    let n = shape.iter().product();
    Tensor4D::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

fn binary(rng: &mut ChaCha8Rng, shape: [usize; 4], p: f64) -> Tensor4D {
    let n = shape.iter().product();
    Tensor4D::new(shape, (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect()).expect("valid shape")
}

fn weights(rng: &mut ChaCha8Rng, c: usize, r: usize, zero_value: bool) -> AttentionWeights {
    let ci = c / r;
    let mut w = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (wq, wk) = (w(ci * c), w(ci * c));
    let wv = if zero_value { vec![0.0; c * c] } else { w(c * c) };
    AttentionWeights::new(c, r, wq, wk, wv).expect("valid weights")
}

/// Smooth field in (0.01, 0.99) from a few Gaussian bumps.
fn smooth_field(rng: &mut ChaCha8Rng, n: usize) -> Tensor4D {
    let bumps: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let c = [0, 1, 2].map(|_| rng.gen_range(0.0..n as f64));
            (c, rng.gen_range(0.8..2.0), rng.gen_range(0.5..1.5))
        })
        .collect();
    let mut data = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [z as f64, y as f64, x as f64];
                let s: f64 = bumps
                    .iter()
                    .map(|(c, w, a)| {
                        let d2: f64 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum();
                        a * (-d2 / (2.0 * w * w)).exp()
                    })
                    .sum::<f64>()
                    - 0.5
                    + rng.gen_range(-0.05..0.05);
                data.push(0.01 + 0.98 / (1.0 + (-2.0 * s).exp()));
            }
        }
    }
    Tensor4D::new([1, n, n, n], data).expect("valid shape")
}

/// Straight-line evaluation of the gated attention formula, one voxel at a time.
pub fn attention_reference(f_lac: &Tensor4D, f_epvs: &Tensor4D, w: &AttentionWeights) -> Vec<f64> {
    let [c, d, h, wd] = f_lac.shape();
    let ci = w.inner_channels();
    let mut out = f_lac.data().to_vec();
    for z in 0..d {
        for y in 0..h {
            for x in 0..wd {
                let at = |t: &Tensor4D, ch: usize| t.data()[t.index(ch, z, y, x)];
                let mut s = 0.0;
                for j in 0..ci {
                    let (mut q, mut k) = (0.0, 0.0);
                    for ch in 0..c {
                        q += w.wq()[j * c + ch] * at(f_lac, ch);
                        k += w.wk()[j * c + ch] * at(f_epvs, ch);
                    }
                    s += q * k;
                }
                let g = 1.0 / (1.0 + (-s / (ci as f64).sqrt()).exp());
                for o in 0..c {
                    let v: f64 = (0..c).map(|ch| w.wv()[o * c + ch] * at(f_epvs, ch)).sum();
                    out[f_lac.index(o, z, y, x)] += g * v;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Suite<'a> {
    seed: u64,
    perturb: Option<&'a str>,
    kernels: &'a KernelConfig,
}

impl Suite<'_> {
    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Wraps a value-and-gradient function, scaling the gradient when this
    /// check is the perturbation target.
    fn maybe_perturb<'f, F>(&self, name: &str, f: F) -> impl Fn(&Tensor4D) -> CoreResult<(f64, Tensor4D)> + 'f
    where
        F: Fn(&Tensor4D) -> CoreResult<(f64, Tensor4D)> + 'f,
    {
        let on = self.perturb == Some(name);
        move |x| {
            let (v, mut g) = f(x)?;
            if on {
                g.data_mut().iter_mut().for_each(|d| *d *= 1.0 + PERTURBATION);
            }
            Ok((v, g))
        }
    }

    fn zero_init_identity(&self) -> CheckOutcome {
        let mut rng = self.rng(0);
        let mut mismatches = 0usize;
        for _ in 0..50 {
            let shape = [8, 4, 4, 4];
            let f_lac = uniform(&mut rng, shape, -3.0, 3.0);
            let f_epvs = uniform(&mut rng, shape, -3.0, 3.0);
            let w = weights(&mut rng, 8, 4, true);
            let out = gated_attention_forward(&f_lac, &f_epvs, &w).expect("shapes agree");
            mismatches +=
                out.f_hat.data().iter().zip(f_lac.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        }
        CheckOutcome::new("attention_zero_init_identity", "mismatched_elements", mismatches as f64, 0.5, 50)
    }

    fn attention_oracle(&self) -> CheckOutcome {
        let mut rng = self.rng(1);
        let mut worst = 0.0f64;
        for case in 0..20 {
            let (c, r) = [(4, 4), (8, 4), (4, 2), (6, 3)][case % 4];
            let shape = [c, rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
            let f_lac = uniform(&mut rng, shape, -2.0, 2.0);
            let f_epvs = uniform(&mut rng, shape, -2.0, 2.0);
            let w = weights(&mut rng, c, r, false);
            let out = gated_attention_forward(&f_lac, &f_epvs, &w).expect("shapes agree");
            worst = worst.max(max_abs_diff(out.f_hat.data(), &attention_reference(&f_lac, &f_epvs, &w)));
        }
        CheckOutcome::new("attention_oracle", "max_abs_error", worst, 1e-12, 20)
    }

    fn attention_gradient(&self) -> CliResult<CheckOutcome> {
        let mut rng = self.rng(2);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let shape = [4, 2, 3, 2];
            let f_lac = uniform(&mut rng, shape, -1.0, 1.0);
            let f_epvs = uniform(&mut rng, shape, -1.0, 1.0);
            let upstream = uniform(&mut rng, shape, -1.0, 1.0);
            let w = weights(&mut rng, 4, 2, false);
            let dot = |t: &Tensor4D| t.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum::<f64>();
            let wrt_lac = self.maybe_perturb("attention_gradient", |x: &Tensor4D| {
                let v = dot(&gated_attention_forward(x, &f_epvs, &w)?.f_hat);
                Ok((v, gated_attention_backward(x, &f_epvs, &w, &upstream)?.f_lac))
            });
            let wrt_epvs = self.maybe_perturb("attention_gradient", |x: &Tensor4D| {
                let v = dot(&gated_attention_forward(&f_lac, x, &w)?.f_hat);
                Ok((v, gated_attention_backward(&f_lac, x, &w, &upstream)?.f_epvs))
            });
            worst = worst
                .max(finite_difference_check(wrt_lac, &f_lac, 1e-6)?.max_rel_error)
                .max(finite_difference_check(wrt_epvs, &f_epvs, 1e-6)?.max_rel_error);
        }
        Ok(CheckOutcome::new("attention_gradient", "max_rel_error", worst, 1e-6, 20))
    }

    fn tversky_gradient(&self) -> CliResult<[CheckOutcome; 2]> {
        let mut rng = self.rng(3);
        let params = self.kernels.tversky();
        let mut worst = 0.0f64;
        let mut masked_nonzero = 0usize;
        for case in 0..20 {
            let shape = [1, 4, 4, 4];
            let p = uniform(&mut rng, shape, 0.01, 0.99);
            let g = binary(&mut rng, shape, 0.3);
            let valid = (case % 2 == 1).then(|| binary(&mut rng, shape, 0.7));
            let f = self.maybe_perturb("tversky_gradient", |x: &Tensor4D| tversky_loss(x, &g, valid.as_ref(), &params));
            worst = worst.max(finite_difference_check(&f, &p, 1e-6)?.max_rel_error);
            if let Some(v) = &valid {
                let (_, grad) = f(&p)?;
                masked_nonzero += grad
                    .data()
                    .iter()
                    .zip(v.data())
                    .filter(|(gv, vv)| **vv == 0.0 && gv.to_bits() != 0.0f64.to_bits())
                    .count();
            }
        }
        Ok([
            CheckOutcome::new("tversky_gradient", "max_rel_error", worst, 1e-6, 20),
            CheckOutcome::new("validity_mask_zero_gradient", "nonzero_masked_elements", masked_nonzero as f64, 0.5, 10),
        ])
    }

    fn exclusion_gradient(&self) -> CliResult<CheckOutcome> {
        let mut rng = self.rng(4);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let shape = [1, 3, 4, 5];
            let a = uniform(&mut rng, shape, 0.05, 0.95);
            let b = uniform(&mut rng, shape, 0.05, 0.95);
            let fa = self.maybe_perturb("exclusion_gradient", |x: &Tensor4D| {
                exclusion_loss(x, &b).map(|r| (r.value, r.grad_epvs))
            });
            let fb = self.maybe_perturb("exclusion_gradient", |x: &Tensor4D| {
                exclusion_loss(&a, x).map(|r| (r.value, r.grad_lac))
            });
            // bilinear, so a wide stencil is exact and keeps rounding small
            worst = worst
                .max(finite_difference_check(fa, &a, 1e-2)?.max_rel_error)
                .max(finite_difference_check(fb, &b, 1e-2)?.max_rel_error);
        }
        Ok(CheckOutcome::new("exclusion_gradient", "max_rel_error", worst, 1e-6, 20))
    }

    fn total_loss_gradient(&self) -> CliResult<CheckOutcome> {
        let mut rng = self.rng(5);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let lambda = rng.gen_range(0.0..2.0);
            let point = Tensor4D::new(
                [1, 1, 1, 5],
                vec![
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..0.5),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ],
            )?;
            // coordinates: L_epvs, L_lac, L_excl, s_epvs, s_lac
            let f = self.maybe_perturb("total_loss_gradient", move |x: &Tensor4D| {
                let v = x.data();
                let state = UncertaintyState { s_epvs: v[3], s_lac: v[4], lambda_excl: lambda };
                let r = total_loss(v[0], v[1], v[2], &state)?;
                let g = Tensor4D::new([1, 1, 1, 5], vec![r.d_l_epvs, r.d_l_lac, r.d_l_excl, r.d_s_epvs, r.d_s_lac])?;
                Ok((r.value, g))
            });
            worst = worst.max(finite_difference_check(f, &point, 1e-5)?.max_rel_error);
        }
        Ok(CheckOutcome::new("total_loss_gradient", "max_rel_error", worst, 1e-6, 20))
    }

    /// Relative error on resolvable components away from pooling ties, and
    /// absolute error on the rest.
    fn cldice_gradient(&self) -> CliResult<[CheckOutcome; 2]> {
        let mut rng = self.rng(6);
        let iters = self.kernels.skeleton_iterations;
        let eps = self.kernels.epsilon;
        let step = 1e-3;
        let mut worst_rel = 0.0f64;
        let mut worst_abs = 0.0f64;
        for _ in 0..20 {
            let p = smooth_field(&mut rng, 6);
            let g = Tensor4D::new(
                p.shape(),
                p.data().iter().map(|v| if v + rng.gen_range(-0.15..0.15) > 0.5 { 1.0 } else { 0.0 }).collect(),
            )?;
            let base = SkeletonTape::record(&p, iters)?.branch_signature();
            let same_branch = |plus: &Tensor4D, minus: &Tensor4D| {
                let sig = |t: &Tensor4D| SkeletonTape::record(t, iters).map(|s| s.branch_signature()).ok();
                sig(plus).as_ref() == Some(&base) && sig(minus).as_ref() == Some(&base)
            };
            let f = self.maybe_perturb("cldice_gradient", |x: &Tensor4D| cldice_loss(x, &g, iters, eps));
            let (_, analytic) = f(&p)?;
            let an = analytic.data();
            let report = finite_difference_check_filtered(&f, &p, step, FdScheme::Richardson, |i, a, b| {
                an[i].abs() >= CLDICE_RESOLVABLE && same_branch(a, b)
            })?;
            worst_rel = worst_rel.max(report.max_rel_error);
            for i in (0..p.len()).filter(|&i| an[i].abs() < CLDICE_RESOLVABLE) {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.data_mut()[i] += step;
                minus.data_mut()[i] -= step;
                if same_branch(&plus, &minus) {
                    let numeric = (f(&plus)?.0 - f(&minus)?.0) / (2.0 * step);
                    worst_abs = worst_abs.max((numeric - an[i]).abs());
                }
            }
        }
        Ok([
            CheckOutcome::new("cldice_gradient", "max_rel_error", worst_rel, 1e-5, 20),
            CheckOutcome::new("cldice_gradient_small_components", "max_abs_error", worst_abs, 1e-11, 20),
        ])
    }

    fn loss_anchors(&self) -> CliResult<CheckOutcome> {
        let mut rng = self.rng(7);
        let g = binary(&mut rng, [1, 4, 4, 4], 0.4);
        let (t, _) = tversky_loss(&g, &g, None, &self.kernels.tversky())?;
        let half = Tensor4D::filled([2, 3, 3, 3], 0.5)?;
        let excl = exclusion_loss(&half, &half)?.value;
        let state = UncertaintyState { s_epvs: 0.0, s_lac: 0.0, lambda_excl: 0.0 };
        let mut worst = t.abs().max((excl - 0.25).abs());
        for _ in 0..20 {
            let (a, b, c) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            worst = worst.max((total_loss(a, b, c, &state)?.value - (a + b)).abs());
        }
        Ok(CheckOutcome::new("loss_anchors", "max_abs_error", worst, 1e-12, 22))
    }
}

/// Runs every check. `perturb` names a gradient check whose analytic
/// gradient is deliberately scaled, to exercise the failure path.
pub fn run_kernel_checks(seed: u64, perturb: Option<&str>, kernels: &KernelConfig) -> CliResult<CheckReport> {
    if let Some(p) = perturb {
        if !GRADIENT_CHECKS.contains(&p) {
            return Err(CliError::input(format!(
                "unknown gradient check `{p}`; expected one of {}",
                GRADIENT_CHECKS.join(", ")
            )));
        }
    }
    let suite = Suite { seed, perturb, kernels };
    let mut checks = vec![suite.zero_init_identity(), suite.attention_oracle(), suite.attention_gradient()?];
    checks.extend(suite.tversky_gradient()?);
    checks.push(suite.exclusion_gradient()?);
    checks.push(suite.total_loss_gradient()?);
    checks.extend(suite.cldice_gradient()?);
    checks.push(suite.loss_anchors()?);
    Ok(CheckReport {
        seed,
        passed: checks.iter().all(|c| c.passed),
        perturbed: perturb.map(str::to_string),
        checks,
    })
}
