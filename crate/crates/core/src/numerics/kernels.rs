//! Raw forward/backward loops shared by the tape.

use super::tensor::{gemm, Scalar, View};

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Tanh-approximated GELU and its derivative.
pub fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn softmax_backward_row<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let dot = y.iter().zip(dy).fold(T::zero(), |a, (&p, &d)| a + p * d);
    for ((o, &p), &d) in dx.iter_mut().zip(y).zip(dy) {
        *o = p * (d - dot);
    }
}

/// `[c, h, w]` → `[c*k*k, h*w]` with zero same-padding.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - p;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[row + y * w + xx] = x[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - p;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = (ci * h + sy as usize) * w + sx as usize;
                        x[dst] = x[dst] + cols[row + y * w + xx];
                    }
                }
            }
        }
    }
    x
}

pub fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], c: usize, h: usize, wd: usize, k: usize) -> Vec<T> {
    let p = (k / 2) as isize;
    let mut out = vec![T::zero(); c * h * wd];
    for ci in 0..c {
        let xc = &x[ci * h * wd..(ci + 1) * h * wd];
        let oc = &mut out[ci * h * wd..(ci + 1) * h * wd];
        for ky in 0..k {
            for kx in 0..k {
                let wt = w[(ci * k + ky) * k + kx];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = sy as usize * wd;
                    for xx in 0..wd {
                        let sx = xx as isize + kx as isize - p;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        oc[y * wd + xx] = oc[y * wd + xx] + wt * xc[srow + sx as usize];
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    c: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let p = (k / 2) as isize;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for ci in 0..c {
        let base = ci * h * wd;
        for ky in 0..k {
            for kx in 0..k {
                let widx = (ci * k + ky) * k + kx;
                let wt = w[widx];
                let mut acc = T::zero();
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..wd {
                        let sx = xx as isize + kx as isize - p;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let src = base + sy as usize * wd + sx as usize;
                        let gv = g[base + y * wd + xx];
                        acc = acc + gv * x[src];
                        dx[src] = dx[src] + gv * wt;
                    }
                }
                dw[widx] = acc;
            }
        }
    }
    (dx, dw)
}

/// Scatter `[co*k*k, h*w]` columns into a `[co, oh, ow]` transposed-conv output.
#[allow(clippy::too_many_arguments)]
pub fn convt_scatter<T: Scalar>(
    cols: &[T],
    co: usize,
    k: usize,
    h: usize,
    w: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); co * oh * ow];
    for c in 0..co {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                for i in 0..h {
                    for j in 0..w {
                        let dst = (c * oh + i * stride + ky) * ow + j * stride + kx;
                        out[dst] = out[dst] + cols[row + i * w + j];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn convt_gather<T: Scalar>(
    g: &[T],
    co: usize,
    k: usize,
    h: usize,
    w: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); co * k * k * hw];
    for c in 0..co {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                for i in 0..h {
                    for j in 0..w {
                        cols[row + i * w + j] = g[(c * oh + i * stride + ky) * ow + j * stride + kx];
                    }
                }
            }
        }
    }
    cols
}

/// Interpolation taps `(i0, i1, w0, w1)` for half-pixel-centred bilinear resizing.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let f = pos - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

pub fn resize_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                let top = xc[y0 * w + x0] * wx0 + xc[y0 * w + x1] * wx1;
                let bot = xc[y1 * w + x0] * wx0 + xc[y1 * w + x1] * wx1;
                out[(ci * oh + oy) * ow + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    out
}

pub fn resize_backward<T: Scalar>(g: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let dc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                let gv = g[(ci * oh + oy) * ow + ox];
                dc[y0 * w + x0] = dc[y0 * w + x0] + gv * wy0 * wx0;
                dc[y0 * w + x1] = dc[y0 * w + x1] + gv * wy0 * wx1;
                dc[y1 * w + x0] = dc[y1 * w + x0] + gv * wy1 * wx0;
                dc[y1 * w + x1] = dc[y1 * w + x1] + gv * wy1 * wx1;
            }
        }
    }
    dx
}

/// Bin `i` of `bins` over a length-`n` axis covers `floor(i*n/bins) .. ceil((i+1)*n/bins)`.
pub fn pool_bounds(n: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|i| ((i * n) / bins, ((i + 1) * n).div_ceil(bins)))
        .collect()
}

pub fn pool_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, bh: usize, bw: usize) -> Vec<T> {
    let by = pool_bounds(h, bh);
    let bx = pool_bounds(w, bw);
    let mut out = vec![T::zero(); c * bh * bw];
    for ci in 0..c {
        for (i, &(y0, y1)) in by.iter().enumerate() {
            for (j, &(x0, x1)) in bx.iter().enumerate() {
                let mut s = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s = s + x[(ci * h + y) * w + xx];
                    }
                }
                out[(ci * bh + i) * bw + j] = s / T::of(((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub fn pool_backward<T: Scalar>(g: &[T], c: usize, h: usize, w: usize, bh: usize, bw: usize) -> Vec<T> {
    let by = pool_bounds(h, bh);
    let bx = pool_bounds(w, bw);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for (i, &(y0, y1)) in by.iter().enumerate() {
            for (j, &(x0, x1)) in bx.iter().enumerate() {
                let gv = g[(ci * bh + i) * bw + j] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx[(ci * h + y) * w + xx] = dx[(ci * h + y) * w + xx] + gv;
                    }
                }
            }
        }
    }
    dx
}

/// Returns the output `[nq, dv]` and the per-head probabilities `[heads, nq, nk]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); nq * dv];
    let mut probs = vec![T::zero(); heads * nq * nk];
    for h in 0..heads {
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        gemm(
            nq,
            dh,
            nk,
            scale,
            View::rows(q, d).at(h * dh),
            View::rows(k, d).at(h * dh).t(),
            T::zero(),
            p,
            0,
            nk,
            1,
        );
        for row in p.chunks_mut(nk) {
            softmax_in_place(row);
        }
        gemm(nq, nk, dvh, T::one(), View::rows(p, nk), View::rows(v, dv).at(h * dvh), T::zero(), &mut out, h * dvh, dv, 1);
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dvv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        let gv = View::rows(g, dv).at(h * dvh);
        // dV_h = Pᵀ · dO_h
        gemm(nk, nq, dvh, T::one(), View::rows(p, nk).t(), gv, T::zero(), &mut dvv, h * dvh, dv, 1);
        // dP = dO_h · V_hᵀ
        gemm(nq, dvh, nk, T::one(), gv, View::rows(v, dv).at(h * dvh).t(), T::zero(), &mut ds, 0, nk, 1);
        for (pr, dr) in p.chunks(nk).zip(ds.chunks_mut(nk)) {
            let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |a, (&pp, &dd)| a + pp * dd);
            for (o, &pp) in dr.iter_mut().zip(pr) {
                *o = pp * (*o - dot) * scale;
            }
        }
        gemm(nq, nk, dh, T::one(), View::rows(&ds, nk), View::rows(k, d).at(h * dh), T::zero(), &mut dq, h * dh, d, 1);
        gemm(nk, nq, dh, T::one(), View::rows(&ds, nk).t(), View::rows(q, d).at(h * dh), T::zero(), &mut dk, h * dh, d, 1);
    }
    (dq, dk, dvv)
}
