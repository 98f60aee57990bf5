use serde::{Deserialize, Serialize};

use super::Tensor4D;
use crate::par::pairwise_sum_by;
use crate::{Error, Result};

/// 1x1-convolution weights of the gated cross-task attention block.
///
/// `wq` and `wk` are `C_int x C`, `wv` is `C x C`, all row-major, with
/// `C_int = C / reduction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    channels: usize,
    reduction: usize,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
}

impl AttentionWeights {
    pub fn new(channels: usize, reduction: usize, wq: Vec<f64>, wk: Vec<f64>, wv: Vec<f64>) -> Result<Self> {
        if channels == 0 || reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::ShapeMismatch(format!(
                "{channels} channels not divisible by reduction {reduction}"
            )));
        }
        let ci = channels / reduction;
        for (name, w, len) in [("wq", &wq, ci * channels), ("wk", &wk, ci * channels), ("wv", &wv, channels * channels)] {
            if w.len() != len {
                return Err(Error::ShapeMismatch(format!("{name} has {} entries, expected {len}", w.len())));
            }
            if let Some(i) = w.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
        }
        Ok(Self { channels, reduction, wq, wk, wv })
    }

    /// Query and key projections as given, value projection zeroed.
    pub fn zero_init(channels: usize, reduction: usize, wq: Vec<f64>, wk: Vec<f64>) -> Result<Self> {
        Self::new(channels, reduction, wq, wk, vec![0.0; channels * channels])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn inner_channels(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn wq(&self) -> &[f64] {
        &self.wq
    }

    pub fn wk(&self) -> &[f64] {
        &self.wk
    }

    pub fn wv(&self) -> &[f64] {
        &self.wv
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub f_hat: Tensor4D,
    /// Spatial gate, shape `(1, D, H, W)`.
    pub gate: Tensor4D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub f_lac: Tensor4D,
    pub f_epvs: Tensor4D,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
}

fn check_inputs(f_lac: &Tensor4D, f_epvs: &Tensor4D, w: &AttentionWeights) -> Result<()> {
    f_lac.same_shape(f_epvs, "lacune/EPVS features")?;
    if f_lac.channels() != w.channels {
        return Err(Error::ShapeMismatch(format!(
            "features have {} channels, weights expect {}",
            f_lac.channels(),
            w.channels
        )));
    }
    Ok(())
}

/// `out[o] = Σ_c w[o][c]·f[c]` at every voxel.
fn project(w: &[f64], rows: usize, f: &Tensor4D) -> Vec<f64> {
    let c_in = f.channels();
    let s = f.spatial_len();
    let fd = f.data();
    let mut out = vec![0.0; rows * s];
    for o in 0..rows {
        let dst = &mut out[o * s..(o + 1) * s];
        for c in 0..c_in {
            let wv = w[o * c_in + c];
            let src = &fd[c * s..(c + 1) * s];
            for (d, x) in dst.iter_mut().zip(src) {
                *d += wv * x;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Forward {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    gate: Vec<f64>,
}

fn forward(f_lac: &Tensor4D, f_epvs: &Tensor4D, w: &AttentionWeights) -> Forward {
    let ci = w.inner_channels();
    let s = f_lac.spatial_len();
    let q = project(&w.wq, ci, f_lac);
    let k = project(&w.wk, ci, f_epvs);
    let v = project(&w.wv, w.channels, f_epvs);
    let scale = 1.0 / (ci as f64).sqrt();
    let gate = (0..s)
        .map(|x| {
            let mut acc = 0.0;
            for j in 0..ci {
                acc += q[j * s + x] * k[j * s + x];
            }
            sigmoid(scale * acc)
        })
        .collect();
    Forward { q, k, v, gate }
}

/// `G = σ(Σ_j Q_j·K_j / √C_int)` and `F̂ = F_lac + G ⊙ V`, with
/// `Q = Wq·F_lac`, `K = Wk·F_epvs`, `V = Wv·F_epvs` and the gate broadcast
/// over channels.
pub fn gated_attention_forward(f_lac: &Tensor4D, f_epvs: &Tensor4D, w: &AttentionWeights) -> Result<AttentionOutput> {
    check_inputs(f_lac, f_epvs, w)?;
    let fw = forward(f_lac, f_epvs, w);
    let s = f_lac.spatial_len();
    let mut f_hat = f_lac.clone();
    for (i, out) in f_hat.data_mut().iter_mut().enumerate() {
        let gv = fw.gate[i % s] * fw.v[i];
        // an exactly zero update leaves the input untouched, sign of zero included
        if gv != 0.0 {
            *out += gv;
        }
    }
    let [_, d, h, wd] = f_lac.shape();
    Ok(AttentionOutput { f_hat, gate: Tensor4D::new([1, d, h, wd], fw.gate)? })
}

/// Reverse pass of [`gated_attention_forward`] for an upstream gradient on
/// `F̂`.
pub fn gated_attention_backward(
    f_lac: &Tensor4D,
    f_epvs: &Tensor4D,
    w: &AttentionWeights,
    grad_out: &Tensor4D,
) -> Result<AttentionGrads> {
    check_inputs(f_lac, f_epvs, w)?;
    f_lac.same_shape(grad_out, "upstream gradient")?;
    let fw = forward(f_lac, f_epvs, w);
    let (c, ci, s) = (w.channels, w.inner_channels(), f_lac.spatial_len());
    let u = grad_out.data();
    let scale = 1.0 / (ci as f64).sqrt();

    // gradient reaching the gate's pre-activation
    let ds: Vec<f64> = (0..s)
        .map(|x| {
            let mut dg = 0.0;
            for o in 0..c {
                dg += u[o * s + x] * fw.v[o * s + x];
            }
            let g = fw.gate[x];
            dg * g * (1.0 - g)
        })
        .collect();
    let mut dq = vec![0.0; ci * s];
    let mut dk = vec![0.0; ci * s];
    for j in 0..ci {
        for x in 0..s {
            dq[j * s + x] = ds[x] * fw.k[j * s + x] * scale;
            dk[j * s + x] = ds[x] * fw.q[j * s + x] * scale;
        }
    }
    let dv: Vec<f64> = (0..c * s).map(|i| u[i] * fw.gate[i % s]).collect();

    let (fl, fe) = (f_lac.data(), f_epvs.data());
    let outer = |dy: &[f64], rows: usize, f: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for cc in 0..c {
                out[r * c + cc] = pairwise_sum_by(s, |x| dy[r * s + x] * f[cc * s + x]);
            }
        }
        out
    };
    let g_wq = outer(&dq, ci, fl);
    let g_wk = outer(&dk, ci, fe);
    let g_wv = outer(&dv, c, fe);

    let transpose_apply = |wm: &[f64], rows: usize, dy: &[f64], out: &mut [f64]| {
        for r in 0..rows {
            for cc in 0..c {
                let wv = wm[r * c + cc];
                for x in 0..s {
                    out[cc * s + x] += wv * dy[r * s + x];
                }
            }
        }
    };
    let mut g_lac = u.to_vec();
    transpose_apply(&w.wq, ci, &dq, &mut g_lac);
    let mut g_epvs = vec![0.0; c * s];
    transpose_apply(&w.wk, ci, &dk, &mut g_epvs);
    transpose_apply(&w.wv, c, &dv, &mut g_epvs);

    Ok(AttentionGrads {
        f_lac: Tensor4D::new(f_lac.shape(), g_lac)?,
        f_epvs: Tensor4D::new(f_lac.shape(), g_epvs)?,
        wq: g_wq,
        wk: g_wk,
        wv: g_wv,
    })
}
