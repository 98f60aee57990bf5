use super::Tensor4D;
use crate::par::{map_range, pairwise_sum_by, Exec};
use crate::Result;

pub const DEFAULT_SKELETON_ITERATIONS: usize = 5;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Pool {
    Min,
    Max,
}

impl Pool {
    fn better(self, candidate: f64, best: f64) -> bool {
        match self {
            Pool::Min => candidate < best,
            Pool::Max => candidate > best,
        }
    }
}

fn window(n: usize, i: usize) -> std::ops::RangeInclusive<usize> {
    i.saturating_sub(1)..=(i + 1).min(n - 1)
}

/// 3x3x3 pooling with borders truncated. Returns the pooled values and, for
/// every output element, the flat index of the winning input. Ties go to the
/// lowest flat index.
fn pool_with_arg(x: &Tensor4D, kind: Pool) -> (Vec<f64>, Vec<u32>) {
    let [_, nd, nh, nw] = x.shape();
    let data = x.data();
    let plane = nh * nw;
    let vol = nd * plane;
    let pairs = map_range(Exec::default(), data.len(), |idx| {
        let c = idx / vol;
        let r = idx % vol;
        let (d, h, w) = (r / plane, (r % plane) / nw, r % nw);
        let base = c * vol;
        let mut best_i = usize::MAX;
        let mut best = 0.0;
        for dd in window(nd, d) {
            for hh in window(nh, h) {
                for ww in window(nw, w) {
                    let j = base + dd * plane + hh * nw + ww;
                    if best_i == usize::MAX || kind.better(data[j], best) {
                        best = data[j];
                        best_i = j;
                    }
                }
            }
        }
        (best, best_i as u32)
    });
    pairs.into_iter().unzip()
}

/// Separable 3x3x3 pooling. Same values as `pool_with_arg` without the
/// bookkeeping.
fn pool(x: &Tensor4D, kind: Pool) -> Tensor4D {
    let shape = x.shape();
    let [_, nd, nh, nw] = shape;
    let pick = |a: f64, b: f64| if kind.better(b, a) { b } else { a };
    let mut cur = x.data().to_vec();
    let strides = [(1usize, nw), (nw, nh), (nw * nh, nd)];
    for (stride, extent) in strides {
        if extent == 1 {
            continue;
        }
        let src = cur;
        cur = map_range(Exec::default(), src.len(), |idx| {
            let pos = (idx / stride) % extent;
            let mut v = src[idx];
            if pos > 0 {
                v = pick(v, src[idx - stride]);
            }
            if pos + 1 < extent {
                v = pick(v, src[idx + stride]);
            }
            v
        });
    }
    Tensor4D::new(shape, cur).expect("shape preserved")
}

/// Soft erosion: 3x3x3 min-pool per channel.
pub fn soft_erode(x: &Tensor4D) -> Tensor4D {
    pool(x, Pool::Min)
}

/// Soft dilation: 3x3x3 max-pool per channel.
pub fn soft_dilate(x: &Tensor4D) -> Tensor4D {
    pool(x, Pool::Max)
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Soft skeleton of a probability map.
///
/// `skel = relu(x0 - open(x0))`, then for each of `iterations` erosions
/// `x_k`, `delta = relu(x_k - open(x_k))` and `skel += relu(delta - skel·delta)`.
pub fn soft_skeleton(p: &Tensor4D, iterations: usize) -> Result<Tensor4D> {
    p.check_unit_range("probability")?;
    let mut x = p.clone();
    let mut skel: Option<Vec<f64>> = None;
    for k in 0..=iterations {
        let eroded = soft_erode(&x);
        let opened = soft_dilate(&eroded);
        let delta = x.data().iter().zip(opened.data()).map(|(a, b)| relu(a - b));
        skel = Some(match skel {
            None => delta.collect(),
            Some(s) => s.iter().zip(delta).map(|(&s, d)| s + relu(d - s * d)).collect(),
        });
        if k < iterations {
            x = eroded;
        }
    }
    Tensor4D::new(p.shape(), skel.expect("at least one step"))
}

struct Step {
    erode_arg: Vec<u32>,
    dilate_arg: Vec<u32>,
    /// `x_k - open(x_k) > 0`
    delta_on: Vec<bool>,
    delta: Vec<f64>,
    /// Skeleton before this step; empty for k = 0.
    skel_prev: Vec<f64>,
    /// `delta - skel_prev·delta > 0`
    accum_on: Vec<bool>,
}

/// Soft skeleton with the pooling winners and relu branches recorded for
/// reverse-mode differentiation.
pub struct SkeletonTape {
    shape: [usize; 4],
    steps: Vec<Step>,
    output: Vec<f64>,
}

impl SkeletonTape {
    pub fn record(p: &Tensor4D, iterations: usize) -> Result<Self> {
        p.check_unit_range("probability")?;
        let shape = p.shape();
        let mut x = p.clone();
        let mut skel: Vec<f64> = Vec::new();
        let mut steps = Vec::with_capacity(iterations + 1);
        for k in 0..=iterations {
            let (eroded, erode_arg) = pool_with_arg(&x, Pool::Min);
            let eroded = Tensor4D::new(shape, eroded)?;
            let (opened, dilate_arg) = pool_with_arg(&eroded, Pool::Max);
            let xs = x.data();
            let delta_on: Vec<bool> = xs.iter().zip(&opened).map(|(a, b)| a - b > 0.0).collect();
            let delta: Vec<f64> = xs.iter().zip(&opened).map(|(a, b)| relu(a - b)).collect();
            let (accum_on, skel_prev) = if k == 0 {
                skel = delta.clone();
                (Vec::new(), Vec::new())
            } else {
                let on: Vec<bool> = skel.iter().zip(&delta).map(|(s, d)| d - s * d > 0.0).collect();
                let next = skel.iter().zip(&delta).map(|(&s, &d)| s + relu(d - s * d)).collect();
                (on, std::mem::replace(&mut skel, next))
            };
            steps.push(Step { erode_arg, dilate_arg, delta_on, delta, skel_prev, accum_on });
            // the next level starts from this level's erosion
            x = eroded;
        }
        Ok(Self { shape, steps, output: skel })
    }

    pub fn output(&self) -> Tensor4D {
        Tensor4D::new(self.shape, self.output.clone()).expect("recorded shape")
    }

    /// Pulls `grad` (with respect to the skeleton) back to the input.
    pub fn backward(&self, grad: &Tensor4D) -> Result<Tensor4D> {
        let n = self.output.len();
        if grad.shape() != self.shape {
            return Err(crate::Error::ShapeMismatch(format!(
                "gradient {:?} vs skeleton {:?}",
                grad.shape(),
                self.shape
            )));
        }
        let mut g_skel = grad.data().to_vec();
        // gradient with respect to x_{k+1}, i.e. this level's erosion
        let mut g_next = vec![0.0; n];
        for (k, st) in self.steps.iter().enumerate().rev() {
            let mut g_delta = vec![0.0; n];
            if k == 0 {
                g_delta.copy_from_slice(&g_skel);
            } else {
                for i in 0..n {
                    if st.accum_on[i] {
                        g_delta[i] = g_skel[i] * (1.0 - st.skel_prev[i]);
                        g_skel[i] *= 1.0 - st.delta[i];
                    }
                }
            }
            let mut g_x = vec![0.0; n];
            let mut g_eroded = std::mem::take(&mut g_next);
            for i in 0..n {
                if st.delta_on[i] {
                    g_x[i] += g_delta[i];
                    g_eroded[st.dilate_arg[i] as usize] -= g_delta[i];
                }
            }
            for i in 0..n {
                g_x[st.erode_arg[i] as usize] += g_eroded[i];
            }
            g_next = g_x;
        }
        Tensor4D::new(self.shape, g_next)
    }

    /// Every discrete choice made on the forward pass. Two inputs with the
    /// same signature lie in the same smooth piece of the skeleton map.
    pub fn branch_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for st in &self.steps {
            sig.extend(st.erode_arg.iter().map(|&a| a as u64));
            sig.extend(st.dilate_arg.iter().map(|&a| a as u64));
            sig.extend(st.delta_on.chunks(64).map(pack));
            sig.extend(st.accum_on.chunks(64).map(pack));
        }
        sig
    }
}

fn pack(bits: &[bool]) -> u64 {
    bits.iter().enumerate().fold(0, |acc, (i, &b)| acc | ((b as u64) << i))
}

/// Soft centerline Dice loss and its gradient with respect to `p`.
///
/// `g` is treated as a constant. The skeleton of `p` is differentiated in
/// reverse through the pooling chain.
pub fn cldice_loss(p: &Tensor4D, g: &Tensor4D, iterations: usize, epsilon: f64) -> Result<(f64, Tensor4D)> {
    p.same_shape(g, "prediction/target")?;
    g.check_unit_range("target")?;
    if !(epsilon > 0.0) {
        return Err(crate::Error::Config(format!("epsilon {epsilon} must be positive")));
    }
    let tape = SkeletonTape::record(p, iterations)?;
    let sp = &tape.output;
    let sg = soft_skeleton(g, iterations)?;
    let (pd, gd, sgd) = (p.data(), g.data(), sg.data());
    let n = pd.len();

    let a = pairwise_sum_by(n, |i| sp[i] * gd[i]);
    let b = pairwise_sum_by(n, |i| sp[i]);
    let c = pairwise_sum_by(n, |i| sgd[i] * pd[i]);
    let d = pairwise_sum_by(n, |i| sgd[i]);
    let tprec = (a + epsilon) / (b + epsilon);
    let tsens = (c + epsilon) / (d + epsilon);
    let sum = tprec + tsens;
    let loss = 1.0 - 2.0 * tprec * tsens / sum;

    let dl_dprec = -2.0 * tsens * tsens / (sum * sum);
    let dl_dsens = -2.0 * tprec * tprec / (sum * sum);
    let g_skel: Vec<f64> = (0..n).map(|i| dl_dprec * (gd[i] - tprec) / (b + epsilon)).collect();
    let mut grad = tape.backward(&Tensor4D::new(p.shape(), g_skel)?)?;
    for (gi, s) in grad.data_mut().iter_mut().zip(sgd) {
        *gi += dl_dsens * s / (d + epsilon);
    }
    Ok((loss, grad))
}
