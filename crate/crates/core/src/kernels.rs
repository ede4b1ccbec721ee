//! CPU convolution kernels used by the tape ops.
//!
//! Every kernel works on whole `Tensor4` values and comes with its backward
//! counterpart. Forward passes run batch-parallel through rayon; backward
//! weight reductions are sequential over the batch so gradients are
//! bit-reproducible regardless of thread count.

use rayon::prelude::*;

use crate::tensor::{Element, Shape4, Tensor4};

/// Which axis a 1D depthwise kernel slides along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    /// `1 x k` kernel, mixes along a row.
    Width,
    /// `k x 1` kernel, mixes along a column.
    Height,
}

/// Gradients of a conv-like op with weight and bias.
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Tensor4<T>,
}

fn bias_shape(c: usize) -> Shape4 {
    Shape4 { n: 1, c, h: 1, w: 1 }
}

// ---------------------------------------------------------------------------
// Patch embedding: non-overlapping p x p convolution with stride p.

fn im2patch<T: Element>(x: &[T], c: usize, hi: usize, wi: usize, p: usize, cols: &mut [T]) {
    // cols is (c*p*p) x (ho*wo), row-major
    let (ho, wo) = (hi / p, wi / p);
    let np = ho * wo;
    for ch in 0..c {
        for ky in 0..p {
            for kx in 0..p {
                let row = (ch * p + ky) * p + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..ho {
                    let src_row = &x[(ch * hi + oy * p + ky) * wi..];
                    for ox in 0..wo {
                        dst[oy * wo + ox] = src_row[ox * p + kx];
                    }
                }
            }
        }
    }
}

fn patch2im<T: Element>(cols: &[T], c: usize, hi: usize, wi: usize, p: usize, dx: &mut [T]) {
    let (ho, wo) = (hi / p, wi / p);
    let np = ho * wo;
    for ch in 0..c {
        for ky in 0..p {
            for kx in 0..p {
                let row = (ch * p + ky) * p + kx;
                let src = &cols[row * np..(row + 1) * np];
                for oy in 0..ho {
                    let base = (ch * hi + oy * p + ky) * wi;
                    for ox in 0..wo {
                        dx[base + ox * p + kx] = src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// `x: (n,c,H,W)`, `weight: (h,c,p,p)`, `bias: (1,h,1,1)` -> `(n,h,H/p,W/p)`.
///
/// Callers guarantee `H % p == 0 && W % p == 0`.
pub fn patch_embed_forward<T: Element>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
    p: usize,
) -> Tensor4<T> {
    let xs = x.shape();
    let hdim = weight.shape().n;
    let (ho, wo) = (xs.h / p, xs.w / p);
    let np = ho * wo;
    let kdim = xs.c * p * p;
    let out_shape = Shape4 {
        n: xs.n,
        c: hdim,
        h: ho,
        w: wo,
    };
    let mut out = Tensor4::zeros(out_shape);
    let in_per = xs.c * xs.plane();
    let out_per = hdim * np;
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    out.data_mut()
        .par_chunks_mut(out_per)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); kdim * np],
            |cols, (n, y)| {
                im2patch(&xd[n * in_per..(n + 1) * in_per], xs.c, xs.h, xs.w, p, cols);
                for (o, &b) in bd.iter().enumerate() {
                    y[o * np..(o + 1) * np].fill(b);
                }
                T::gemm(hdim, kdim, np, T::one(), wd, kdim, 1, cols, np, 1, T::one(), y, np, 1);
            },
        );
    out
}

pub fn patch_embed_backward<T: Element>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    p: usize,
    dy: &Tensor4<T>,
) -> ConvGrads<T> {
    let xs = x.shape();
    let hdim = weight.shape().n;
    let np = dy.shape().plane();
    let kdim = xs.c * p * p;
    let in_per = xs.c * xs.plane();
    let out_per = hdim * np;
    let mut dx = Tensor4::zeros(xs);
    let mut dw = Tensor4::zeros(weight.shape());
    let mut db = Tensor4::zeros(bias_shape(hdim));
    let mut cols = vec![T::zero(); kdim * np];
    let mut dcols = vec![T::zero(); kdim * np];
    for n in 0..xs.n {
        let dyn_ = &dy.data()[n * out_per..(n + 1) * out_per];
        im2patch(&x.data()[n * in_per..(n + 1) * in_per], xs.c, xs.h, xs.w, p, &mut cols);
        // dW += dy (h x np) * cols^T (np x kdim)
        T::gemm(hdim, np, kdim, T::one(), dyn_, np, 1, &cols, 1, np, T::one(), dw.data_mut(), kdim, 1);
        // dcols = W^T (kdim x h) * dy (h x np)
        T::gemm(kdim, hdim, np, T::one(), weight.data(), 1, kdim, dyn_, np, 1, T::zero(), &mut dcols, np, 1);
        patch2im(&dcols, xs.c, xs.h, xs.w, p, &mut dx.data_mut()[n * in_per..(n + 1) * in_per]);
        for (o, g) in db.data_mut().iter_mut().enumerate() {
            *g += dyn_[o * np..(o + 1) * np].iter().copied().sum::<T>();
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

// ---------------------------------------------------------------------------
// Depthwise convolution with zero "same" padding, kernel (kh, kw), both odd.

/// Adds `w * src[shifted]` into `dst` for every in-bounds position of one plane.
#[inline]
#[allow(clippy::too_many_arguments)]
fn shifted_axpy<T: Element>(
    dst: &mut [T],
    src: &[T],
    rows: usize,
    cols: usize,
    dy: isize,
    dx: isize,
    w: T,
) {
    let (y0, y1) = (0isize.max(-dy) as usize, (rows as isize).min(rows as isize - dy).max(0) as usize);
    let (x0, x1) = (0isize.max(-dx) as usize, (cols as isize).min(cols as isize - dx).max(0) as usize);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * cols + x0..y * cols + x1];
        let s = &src[sy * cols + (x0 as isize + dx) as usize..];
        for (a, &b) in d.iter_mut().zip(s) {
            *a += w * b;
        }
    }
}

/// Dot product of `a` and `b` shifted by (dy, dx) over the valid region.
#[inline]
fn shifted_dot<T: Element>(a: &[T], b: &[T], rows: usize, cols: usize, dy: isize, dx: isize) -> T {
    let (y0, y1) = (0isize.max(-dy) as usize, (rows as isize).min(rows as isize - dy).max(0) as usize);
    let (x0, x1) = (0isize.max(-dx) as usize, (cols as isize).min(cols as isize - dx).max(0) as usize);
    let mut acc = T::zero();
    if x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let ar = &a[y * cols + x0..y * cols + x1];
        let br = &b[sy * cols + (x0 as isize + dx) as usize..];
        for (&p, &q) in ar.iter().zip(br) {
            acc += p * q;
        }
    }
    acc
}

/// `x: (n,c,H,W)`, `weight: (c,1,kh,kw)`, `bias: (1,c,1,1)` -> `(n,c,H,W)`.
pub fn depthwise_forward<T: Element>(x: &Tensor4<T>, weight: &Tensor4<T>, bias: &Tensor4<T>) -> Tensor4<T> {
    let xs = x.shape();
    let ws = weight.shape();
    let (kh, kw) = (ws.h, ws.w);
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = xs.plane();
    let mut out = Tensor4::zeros(xs);
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, y)| {
            let ch = idx % xs.c;
            let src = &xd[idx * plane..(idx + 1) * plane];
            y.fill(bd[ch]);
            let kern = &wd[ch * kh * kw..(ch + 1) * kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let w = kern[ky * kw + kx];
                    shifted_axpy(y, src, xs.h, xs.w, ky as isize - rh, kx as isize - rw, w);
                }
            }
        });
    out
}

pub fn depthwise_backward<T: Element>(x: &Tensor4<T>, weight: &Tensor4<T>, dy: &Tensor4<T>) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = weight.shape();
    let (kh, kw) = (ws.h, ws.w);
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = xs.plane();
    let mut dx = Tensor4::zeros(xs);
    let mut dw = Tensor4::zeros(ws);
    let mut db = Tensor4::zeros(bias_shape(xs.c));
    for idx in 0..xs.n * xs.c {
        let ch = idx % xs.c;
        let g = &dy.data()[idx * plane..(idx + 1) * plane];
        let src = &x.data()[idx * plane..(idx + 1) * plane];
        let dst = &mut dx.data_mut()[idx * plane..(idx + 1) * plane];
        db.data_mut()[ch] += g.iter().copied().sum::<T>();
        for ky in 0..kh {
            for kx in 0..kw {
                let (oy, ox) = (ky as isize - rh, kx as isize - rw);
                let w = weight.data()[(ch * kh + ky) * kw + kx];
                // out[y,x] += w * in[y+oy, x+ox]  =>  din[y',x'] += w * dout[y'-oy, x'-ox]
                shifted_axpy(dst, g, xs.h, xs.w, -oy, -ox, w);
                dw.data_mut()[(ch * kh + ky) * kw + kx] += shifted_dot(g, src, xs.h, xs.w, oy, ox);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) mixing restricted to channels [start, start + d).

/// `weight: (d,d,1,1)`, `bias: (1,d,1,1)`; channels outside the slice are copied.
pub fn pointwise_slice_forward<T: Element>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
    start: usize,
) -> Tensor4<T> {
    let xs = x.shape();
    let d = weight.shape().n;
    let plane = xs.plane();
    let per = xs.c * plane;
    let mut out = x.clone();
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    out.data_mut()
        .par_chunks_mut(per)
        .enumerate()
        .for_each(|(n, y)| {
            let src = &xd[n * per + start * plane..n * per + (start + d) * plane];
            let dst = &mut y[start * plane..(start + d) * plane];
            for (o, &b) in bd.iter().enumerate() {
                dst[o * plane..(o + 1) * plane].fill(b);
            }
            T::gemm(d, d, plane, T::one(), wd, d, 1, src, plane, 1, T::one(), dst, plane, 1);
        });
    out
}

pub fn pointwise_slice_backward<T: Element>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    start: usize,
    dy: &Tensor4<T>,
) -> ConvGrads<T> {
    let xs = x.shape();
    let d = weight.shape().n;
    let plane = xs.plane();
    let per = xs.c * plane;
    let mut dx = dy.clone();
    let mut dw = Tensor4::zeros(weight.shape());
    let mut db = Tensor4::zeros(bias_shape(d));
    for n in 0..xs.n {
        let lo = n * per + start * plane;
        let hi = lo + d * plane;
        let g = &dy.data()[lo..hi];
        let src = &x.data()[lo..hi];
        T::gemm(d, d, plane, T::one(), weight.data(), 1, d, g, plane, 1, T::zero(), &mut dx.data_mut()[lo..hi], plane, 1);
        T::gemm(d, plane, d, T::one(), g, plane, 1, src, 1, plane, T::one(), dw.data_mut(), d, 1);
        for (o, acc) in db.data_mut().iter_mut().enumerate() {
            *acc += g[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

// ---------------------------------------------------------------------------
// Channel-strided 3D convolution: d kernels of channel extent d, stride d.
//
// With s = c / d segments, kernel j applied to segment i lands on output
// channel j * s + i (kernel-major interleaving).

pub fn strided3d_forward<T: Element>(x: &Tensor4<T>, weight: &Tensor4<T>, bias: &Tensor4<T>) -> Tensor4<T> {
    let xs = x.shape();
    let d = weight.shape().n;
    let s = xs.c / d;
    let plane = xs.plane();
    let per = xs.c * plane;
    let mut out = Tensor4::zeros(xs);
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    out.data_mut()
        .par_chunks_mut(per)
        .enumerate()
        .for_each(|(n, y)| {
            for j in 0..d {
                for i in 0..s {
                    let ch = j * s + i;
                    y[ch * plane..(ch + 1) * plane].fill(bd[j]);
                }
            }
            for i in 0..s {
                let src = &xd[n * per + i * d * plane..n * per + (i + 1) * d * plane];
                let dst = &mut y[i * plane..];
                T::gemm(d, d, plane, T::one(), wd, d, 1, src, plane, 1, T::one(), dst, s * plane, 1);
            }
        });
    out
}

pub fn strided3d_backward<T: Element>(x: &Tensor4<T>, weight: &Tensor4<T>, dy: &Tensor4<T>) -> ConvGrads<T> {
    let xs = x.shape();
    let d = weight.shape().n;
    let s = xs.c / d;
    let plane = xs.plane();
    let per = xs.c * plane;
    let mut dx = Tensor4::zeros(xs);
    let mut dw = Tensor4::zeros(weight.shape());
    let mut db = Tensor4::zeros(bias_shape(d));
    for n in 0..xs.n {
        let g = &dy.data()[n * per..(n + 1) * per];
        for i in 0..s {
            let lo = n * per + i * d * plane;
            let hi = lo + d * plane;
            let gi = &g[i * plane..];
            T::gemm(d, d, plane, T::one(), weight.data(), 1, d, gi, s * plane, 1, T::zero(), &mut dx.data_mut()[lo..hi], plane, 1);
            T::gemm(d, plane, d, T::one(), gi, s * plane, 1, &x.data()[lo..hi], 1, plane, T::one(), dw.data_mut(), d, 1);
        }
        for j in 0..d {
            for i in 0..s {
                let ch = j * s + i;
                db.data_mut()[j] += g[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], v: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_dims(dims, v).unwrap()
    }

    #[test]
    fn width_kernel_of_ones_sums_neighbours() {
        let x = t([1, 1, 1, 3], vec![1.0, 2.0, 3.0]);
        let w = t([1, 1, 1, 3], vec![1.0, 1.0, 1.0]);
        let b = t([1, 1, 1, 1], vec![0.0]);
        let y = depthwise_forward(&x, &w, &b);
        assert_eq!(y.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn height_kernel_of_ones_sums_neighbours() {
        let x = t([1, 1, 3, 1], vec![1.0, 2.0, 3.0]);
        let w = t([1, 1, 3, 1], vec![1.0, 1.0, 1.0]);
        let b = t([1, 1, 1, 1], vec![0.0]);
        assert_eq!(depthwise_forward(&x, &w, &b).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn pointwise_slice_hand_product() {
        // channels (1,2,3,4) at a single position, mix [0,2) with [[1,1],[0,1]]
        let x = t([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let w = t([2, 2, 1, 1], vec![1.0, 1.0, 0.0, 1.0]);
        let b = t([1, 2, 1, 1], vec![0.0, 0.0]);
        let y = pointwise_slice_forward(&x, &w, &b, 0);
        assert_eq!(y.data(), &[3.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn strided3d_identity_kernels_interleave() {
        // h=4, s=2, d=2: kernel j = onehot(j); out[j*s+i] = x[i*d+j]
        let x = t([1, 4, 1, 1], vec![10.0, 11.0, 20.0, 21.0]);
        let w = t([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t([1, 2, 1, 1], vec![0.0, 0.0]);
        let y = strided3d_forward(&x, &w, &b);
        // out[0]=k0 seg0=x0, out[1]=k0 seg1=x2, out[2]=k1 seg0=x1, out[3]=k1 seg1=x3
        assert_eq!(y.data(), &[10.0, 20.0, 11.0, 21.0]);
    }

    #[test]
    fn patch_embed_averaging_kernel() {
        let x = t([1, 1, 4, 4], vec![4.0; 16]);
        let w = t([1, 1, 2, 2], vec![0.25; 4]);
        let b = t([1, 1, 1, 1], vec![0.0]);
        let y = patch_embed_forward(&x, &w, &b, 2);
        assert_eq!(y.shape().dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }
}
