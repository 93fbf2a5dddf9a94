//! Raw numeric kernels behind the graph ops.
//!
//! Batch-parallel kernels split work per batch item and reduce partial
//! results in batch order, so results do not depend on the thread count.

use rayon::prelude::*;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sum(xs: &[f64]) -> f64 {
    xs.iter().sum()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// `a [m, k] x b [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Dot product with four fixed accumulator lanes, so the order of
/// additions never depends on the caller.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let split = a.len().min(b.len()) / 4 * 4;
    for (x, y) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = a[split..].iter().zip(&b[split..]).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `g [m, n] x b^T` where `b` is `[k, n]`; result `[m, k]`.
pub fn matmul_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(gr, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `a^T x g` where `a` is `[m, k]` and `g` is `[m, n]`; result `[k, n]`.
pub fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
}

struct Tap {
    /// Flat index into the `[k0, k1, k2]` kernel block.
    index: usize,
    offset: [isize; 3],
}

impl ConvGeometry {
    fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Kernel taps that touch at least one in-range input position.
    fn taps(&self) -> Vec<Tap> {
        let mut taps = Vec::with_capacity(self.kernel_len());
        let off = |a: usize, k: usize| {
            let pad = (self.dilation[a] * (self.kernel[a] - 1) / 2) as isize;
            (k * self.dilation[a]) as isize - pad
        };
        for k0 in 0..self.kernel[0] {
            for k1 in 0..self.kernel[1] {
                for k2 in 0..self.kernel[2] {
                    let offset = [off(0, k0), off(1, k1), off(2, k2)];
                    let reachable = (0..3).all(|a| offset[a].unsigned_abs() < self.dims[a]);
                    if reachable {
                        taps.push(Tap {
                            index: (k0 * self.kernel[1] + k1) * self.kernel[2] + k2,
                            offset,
                        });
                    }
                }
            }
        }
        taps
    }
}

/// Output positions `lo..hi` whose input `pos + offset` lies inside `0..len`.
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).min(len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Calls `f(out_row_start, in_row_start, z_lo, z_hi)` for every (d0, d1)
/// row overlapping a tap.
fn for_each_row(dims: [usize; 3], offset: [isize; 3], mut f: impl FnMut(usize, usize, usize, usize)) {
    let (a0, b0) = valid_range(dims[0], offset[0]);
    let (a1, b1) = valid_range(dims[1], offset[1]);
    let (z0, z1) = valid_range(dims[2], offset[2]);
    if z0 >= z1 {
        return;
    }
    for x0 in a0..b0 {
        let s0 = (x0 as isize + offset[0]) as usize;
        for x1 in a1..b1 {
            let s1 = (x1 as isize + offset[1]) as usize;
            let out_row = (x0 * dims[1] + x1) * dims[2];
            let in_row = (s0 * dims[1] + s1) * dims[2];
            f(out_row, in_row, z0, z1);
        }
    }
}

/// Column matrix `[cin * kl, s]` of one batch item: row `(ci, tap)` holds
/// the input shifted by the tap offset, zero outside the volume.
fn im2col(geo: &ConvGeometry, taps: &[Tap], x: &[f64]) -> Vec<f64> {
    let s = geo.spatial();
    let kl = geo.kernel_len();
    let mut cols = vec![0.0; geo.cin * kl * s];
    for ci in 0..geo.cin {
        let src = &x[ci * s..(ci + 1) * s];
        for tap in taps {
            let row = &mut cols[(ci * kl + tap.index) * s..(ci * kl + tap.index + 1) * s];
            let shift = tap.offset[2];
            for_each_row(geo.dims, tap.offset, |orow, irow, z0, z1| {
                let start = (irow as isize + z0 as isize + shift) as usize;
                row[orow + z0..orow + z1].copy_from_slice(&src[start..start + (z1 - z0)]);
            });
        }
    }
    cols
}

/// Adds the column-matrix gradient back onto the input gradient.
fn col2im(geo: &ConvGeometry, taps: &[Tap], cols: &[f64], gx: &mut [f64]) {
    let s = geo.spatial();
    let kl = geo.kernel_len();
    for ci in 0..geo.cin {
        let dst = &mut gx[ci * s..(ci + 1) * s];
        for tap in taps {
            let row = &cols[(ci * kl + tap.index) * s..(ci * kl + tap.index + 1) * s];
            let shift = tap.offset[2];
            for_each_row(geo.dims, tap.offset, |orow, irow, z0, z1| {
                let start = (irow as isize + z0 as isize + shift) as usize;
                for (o, v) in dst[start..start + (z1 - z0)].iter_mut().zip(&row[orow + z0..orow + z1]) {
                    *o += v;
                }
            });
        }
    }
}

pub fn conv3d_forward(geo: &ConvGeometry, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let s = geo.spatial();
    let k = geo.cin * geo.kernel_len();
    let taps = geo.taps();
    let mut out = vec![0.0; geo.batch * geo.cout * s];
    out.par_chunks_mut(geo.cout * s)
        .enumerate()
        .for_each(|(b, out_b)| {
            let cols = im2col(geo, &taps, &x[b * geo.cin * s..(b + 1) * geo.cin * s]);
            let y = matmul(w, &cols, geo.cout, k, s);
            for (co, (dst, src)) in out_b.chunks_mut(s).zip(y.chunks(s)).enumerate() {
                for (o, v) in dst.iter_mut().zip(src) {
                    *o = v + bias[co];
                }
            }
        });
    out
}

pub fn conv3d_grad_input(geo: &ConvGeometry, g: &[f64], w: &[f64]) -> Vec<f64> {
    let s = geo.spatial();
    let k = geo.cin * geo.kernel_len();
    let taps = geo.taps();
    let mut gx = vec![0.0; geo.batch * geo.cin * s];
    gx.par_chunks_mut(geo.cin * s)
        .enumerate()
        .for_each(|(b, gx_b)| {
            let gb = &g[b * geo.cout * s..(b + 1) * geo.cout * s];
            let gcols = matmul_at(w, gb, geo.cout, k, s);
            col2im(geo, &taps, &gcols, gx_b);
        });
    gx
}

pub fn conv3d_grad_weight(geo: &ConvGeometry, g: &[f64], x: &[f64]) -> Vec<f64> {
    let s = geo.spatial();
    let k = geo.cin * geo.kernel_len();
    let taps = geo.taps();
    let partials: Vec<Vec<f64>> = (0..geo.batch)
        .into_par_iter()
        .map(|b| {
            let cols = im2col(geo, &taps, &x[b * geo.cin * s..(b + 1) * geo.cin * s]);
            matmul_bt(&g[b * geo.cout * s..(b + 1) * geo.cout * s], &cols, geo.cout, s, k)
        })
        .collect();
    let mut gw = vec![0.0; geo.cout * k];
    for part in partials {
        for (a, v) in gw.iter_mut().zip(part) {
            *a += v;
        }
    }
    gw
}

pub fn conv3d_grad_bias(geo: &ConvGeometry, g: &[f64]) -> Vec<f64> {
    let s = geo.spatial();
    let mut gb = vec![0.0; geo.cout];
    for b in 0..geo.batch {
        for (co, acc) in gb.iter_mut().enumerate() {
            *acc += sum(&g[(b * geo.cout + co) * s..(b * geo.cout + co + 1) * s]);
        }
    }
    gb
}

/// Max pooling over `maps` independent `[d0, d1, d2]` volumes. Returns the
/// pooled values and the flat input index of each maximum.
pub fn max_pool3d(x: &[f64], shape: [usize; 4], window: [usize; 3]) -> (Vec<f64>, Vec<usize>) {
    let [maps, d0, d1, d2] = shape;
    let o = [d0 / window[0], d1 / window[1], d2 / window[2]];
    let per_map = d0 * d1 * d2;
    let mut out = Vec::with_capacity(maps * o[0] * o[1] * o[2]);
    let mut arg = Vec::with_capacity(out.capacity());
    for m in 0..maps {
        let base = m * per_map;
        for p0 in 0..o[0] {
            for p1 in 0..o[1] {
                for p2 in 0..o[2] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base;
                    for a in 0..window[0] {
                        for b in 0..window[1] {
                            for c in 0..window[2] {
                                let idx = base
                                    + ((p0 * window[0] + a) * d1 + p1 * window[1] + b) * d2
                                    + p2 * window[2]
                                    + c;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    (out, arg)
}
