//! Exact Euclidean distance transform.
//!
//! Squared distances are computed one axis at a time with the lower envelope
//! of parabolas, scaled by the voxel spacing of that axis. The result is the
//! exact distance between voxel centers for any axis-aligned or rotated grid
//! (orthogonal affine columns); sheared affines are measured in the
//! spacing-scaled index frame.

use crate::par::{self, Exec};
use crate::volume::Geometry;

/// One-dimensional pass: `out[q] = min_p (w * (q - p))^2 + f[p]`.
///
/// Infinite entries of `f` are not sites. `v` and `z` are scratch buffers of
/// length at least `f.len()` and `f.len() + 1`.
fn envelope_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let w2 = w * w;
    let mut k: usize = 0;
    let mut any = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !any {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            any = true;
            continue;
        }
        let qf = q as f64;
        let s = loop {
            let p = v[k];
            let pf = p as f64;
            let s = ((f[q] + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf));
            if s <= z[k] {
                // z[0] is -inf, so k never underflows
                k -= 1;
            } else {
                break s;
            }
        };
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if !any {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = w * (qf - v[k] as f64);
        *o = d * d + f[v[k]];
    }
}

struct Scratch {
    line: Vec<f64>,
    out: Vec<f64>,
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            line: vec![0.0; n],
            out: vec![0.0; n],
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }
}

/// Squared distance (mm²) from every voxel center to the nearest seed voxel
/// center. Every voxel is `+inf` when there are no seeds.
pub fn squared_distance_to_seeds(geometry: &Geometry, seeds: &[bool], exec: Exec) -> Vec<f64> {
    assert_eq!(seeds.len(), geometry.len(), "seed mask does not match geometry");
    let [nx, ny, nz] = geometry.dims();
    let [sx, sy, sz] = geometry.spacing();
    let plane = nx * ny;

    let mut buf: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();

    // x: contiguous rows
    par::for_each_chunk_mut(exec, &mut buf, nx, |_, row| {
        let mut s = Scratch::new(nx);
        s.line.copy_from_slice(row);
        envelope_1d(&s.line, sx, row, &mut s.v, &mut s.z);
    });

    // y: columns inside each z-slice
    par::for_each_chunk_mut(exec, &mut buf, plane, |_, slice| {
        let mut s = Scratch::new(ny);
        for i in 0..nx {
            for j in 0..ny {
                s.line[j] = slice[i + nx * j];
            }
            envelope_1d(&s.line, sy, &mut s.out, &mut s.v, &mut s.z);
            for j in 0..ny {
                slice[i + nx * j] = s.out[j];
            }
        }
    });

    // z: strided columns, transposed through a temporary
    let mut columns = vec![0.0; buf.len()];
    {
        let src = &buf;
        par::for_each_chunk_mut(exec, &mut columns, nz, |c, col| {
            let mut s = Scratch::new(nz);
            for k in 0..nz {
                s.line[k] = src[c + plane * k];
            }
            envelope_1d(&s.line, sz, col, &mut s.v, &mut s.z);
        });
    }
    par::for_each_chunk_mut(exec, &mut buf, plane, |k, slice| {
        for (c, v) in slice.iter_mut().enumerate() {
            *v = columns[c * nz + k];
        }
    });
    buf
}

/// Euclidean distance (mm) to the nearest seed; `+inf` when there are none.
pub fn distance_to_seeds(geometry: &Geometry, seeds: &[bool], exec: Exec) -> Vec<f64> {
    let mut d = squared_distance_to_seeds(geometry, seeds, exec);
    for v in d.iter_mut() {
        *v = v.sqrt();
    }
    d
}
