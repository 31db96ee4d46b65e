//! Forward and vector-Jacobian kernels for the convolutional layers.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds a zero-padded `[C,H,W]` input into a `(C·k·k) × (Ho·Wo)` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let mut cols = vec![T::zero(); g.col_rows() * p];
    let (h, w, k, s) = (g.height as isize, g.width as isize, g.kernel, g.stride);
    let pad = g.pad as isize;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * s) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        // Contiguous span of valid columns.
                        let off = kj as isize - pad;
                        let lo = (-off).max(0) as usize;
                        let hi = ((w - off).min(wo as isize)).max(0) as usize;
                        if lo < hi {
                            let a = (lo as isize + off) as usize;
                            drow[lo..hi].copy_from_slice(&src_row[a..a + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kj as isize - pad;
                            if ix >= 0 && ix < w {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into the input.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let mut x = vec![T::zero(); g.in_channels * g.height * g.width];
    let (h, w, k, s) = (g.height as isize, g.width as isize, g.kernel, g.stride);
    let pad = g.pad as isize;
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * s) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * s) as isize + kj as isize - pad;
                        if ix >= 0 && ix < w {
                            prow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Stride-1 convolutions with few input or output channels skip the
/// unfolding: the column matrix would be large and the matrix product thin.
pub fn use_direct(g: &ConvGeometry, out_channels: usize) -> bool {
    g.stride == 1 && g.in_channels.min(out_channels) <= 4
}

/// Output columns `[lo, hi)` whose input column `ox + off` lies in `0..w`.
fn span(off: isize, wo: usize, w: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = ((w as isize - off).min(wo as isize)).max(0) as usize;
    (lo, hi.max(lo))
}

fn direct_forward<T: Scalar>(x: &[T], weight: &[T], out: &mut [T], g: &ConvGeometry, co: usize) {
    let (ho, wo) = g.out_hw();
    let (ci, h, w, k) = (g.in_channels, g.height, g.width, g.kernel);
    let pad = g.pad as isize;
    for o in 0..co {
        for oy in 0..ho {
            let orow = &mut out[(o * ho + oy) * wo..(o * ho + oy + 1) * wo];
            for c in 0..ci {
                for ki in 0..k {
                    let iy = oy as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    let wrow =
                        &weight[((o * ci + c) * k + ki) * k..((o * ci + c) * k + ki + 1) * k];
                    for (kj, &wv) in wrow.iter().enumerate() {
                        let off = kj as isize - pad;
                        let (lo, hi) = span(off, wo, w);
                        let src = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (a, &b) in orow[lo..hi].iter_mut().zip(src) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
}

fn direct_input_grad<T: Scalar>(dy: &[T], weight: &[T], g: &ConvGeometry, co: usize) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let (ci, h, w, k) = (g.in_channels, g.height, g.width, g.kernel);
    let pad = g.pad as isize;
    let mut dx = vec![T::zero(); ci * h * w];
    for c in 0..ci {
        for oy in 0..ho {
            for o in 0..co {
                let dyrow = &dy[(o * ho + oy) * wo..(o * ho + oy + 1) * wo];
                for ki in 0..k {
                    let iy = oy as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dxrow = &mut dx[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    let wrow =
                        &weight[((o * ci + c) * k + ki) * k..((o * ci + c) * k + ki + 1) * k];
                    for (kj, &wv) in wrow.iter().enumerate() {
                        let off = kj as isize - pad;
                        let (lo, hi) = span(off, wo, w);
                        let dst =
                            &mut dxrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (a, &b) in dst.iter_mut().zip(&dyrow[lo..hi]) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Eight independent partial sums so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

fn direct_weight_grad<T: Scalar>(dy: &[T], x: &[T], g: &ConvGeometry, co: usize) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let (ci, h, w, k) = (g.in_channels, g.height, g.width, g.kernel);
    let pad = g.pad as isize;
    let mut dw = vec![T::zero(); co * ci * k * k];
    for o in 0..co {
        for c in 0..ci {
            for ki in 0..k {
                for kj in 0..k {
                    let off = kj as isize - pad;
                    let (lo, hi) = span(off, wo, w);
                    let mut acc = T::zero();
                    for oy in 0..ho {
                        let iy = oy as isize + ki as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dyrow = &dy[(o * ho + oy) * wo + lo..(o * ho + oy) * wo + hi];
                        let base = (c * h + iy as usize) * w;
                        let xrow = &x[base + (lo as isize + off) as usize
                            ..base + (hi as isize + off) as usize];
                        acc += dot(dyrow, xrow);
                    }
                    dw[((o * ci + c) * k + ki) * k + kj] = acc;
                }
            }
        }
    }
    dw
}

/// Returns the output and the unfolded input, which is empty when the
/// direct kernel ran.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Vec<T>, ConvGeometry) {
    let (ci, h, w) = x.chw();
    let co = weight.shape()[0];
    let k = weight.shape()[2];
    assert_eq!(
        weight.shape(),
        &[co, ci, k, k],
        "conv weight/input mismatch"
    );
    let g = ConvGeometry {
        in_channels: ci,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let mut out = vec![T::zero(); co * p];
    for (o, &b) in bias.data().iter().enumerate() {
        out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = b);
    }
    if use_direct(&g, co) {
        direct_forward(x.data(), weight.data(), &mut out, &g, co);
        return (Tensor::from_vec(&[co, ho, wo], out).unwrap(), Vec::new(), g);
    }
    let cols = im2col(x.data(), &g);
    let kk = g.col_rows();
    T::gemm(
        co,
        kk,
        p,
        T::one(),
        weight.data(),
        kk as isize,
        1,
        &cols,
        p as isize,
        1,
        T::one(),
        &mut out,
        p as isize,
        1,
    );
    (Tensor::from_vec(&[co, ho, wo], out).unwrap(), cols, g)
}

/// Gradients `(d input, d weight, d bias)`. The weight gradient needs the
/// unfolded input `cols`, or the raw input `x` on the direct path.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    x: &Tensor<T>,
    cols: &[T],
    g: &ConvGeometry,
    need_weight: bool,
    need_input: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let co = weight.shape()[0];
    let kk = g.col_rows();
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let dy = grad_out.data();
    let direct = use_direct(g, co);

    let dw = need_weight.then(|| {
        let dw = if direct {
            direct_weight_grad(dy, x.data(), g, co)
        } else {
            let mut dw = vec![T::zero(); co * kk];
            T::gemm(
                co,
                p,
                kk,
                T::one(),
                dy,
                p as isize,
                1,
                cols,
                1,
                p as isize,
                T::zero(),
                &mut dw,
                kk as isize,
                1,
            );
            dw
        };
        Tensor::from_vec(weight.shape(), dw).unwrap()
    });
    let db: Vec<T> = (0..co)
        .map(|o| dy[o * p..(o + 1) * p].iter().copied().sum())
        .collect();

    let dx = need_input.then(|| {
        let shape = [g.in_channels, g.height, g.width];
        if direct {
            return Tensor::from_vec(&shape, direct_input_grad(dy, weight.data(), g, co)).unwrap();
        }
        let mut dcols = vec![T::zero(); kk * p];
        T::gemm(
            kk,
            co,
            p,
            T::one(),
            weight.data(),
            1,
            kk as isize,
            dy,
            p as isize,
            1,
            T::zero(),
            &mut dcols,
            p as isize,
            1,
        );
        Tensor::from_vec(&shape, col2im(&dcols, g)).unwrap()
    });
    (dx, dw, Tensor::from_vec(&[co], db).unwrap())
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Returns `(output, normalized input, per-channel inverse std)`.
pub fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let (c, h, w) = x.chw();
    let n = h * w;
    let nf = T::from_usize(n).unwrap();
    let eps = T::lit(INSTANCE_NORM_EPS);
    let mut xhat = vec![T::zero(); c * n];
    let mut out = vec![T::zero(); c * n];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = x.channel(ch);
        let mean = plane.iter().copied().sum::<T>() / nf;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for i in 0..n {
            let xh = (plane[i] - mean) * is;
            xhat[ch * n + i] = xh;
            out[ch * n + i] = gm * xh + bt;
        }
    }
    (
        Tensor::from_vec(&[c, h, w], out).unwrap(),
        Tensor::from_vec(&[c, h, w], xhat).unwrap(),
        inv_std,
    )
}

pub fn instance_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, h, w) = grad_out.chw();
    let n = h * w;
    let nf = T::from_usize(n).unwrap();
    let mut dx = vec![T::zero(); c * n];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let dy = grad_out.channel(ch);
        let xh = xhat.channel(ch);
        let gm = gamma.data()[ch];
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        let mut dg = T::zero();
        let mut db = T::zero();
        for i in 0..n {
            dg += dy[i] * xh[i];
            db += dy[i];
            let dxh = dy[i] * gm;
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[i];
        }
        dgamma[ch] = dg;
        dbeta[ch] = db;
        let k = inv_std[ch] / nf;
        for i in 0..n {
            let dxh = dy[i] * gm;
            dx[ch * n + i] = k * (nf * dxh - sum_dxh - xh[i] * sum_dxh_xh);
        }
    }
    (
        Tensor::from_vec(&[c, h, w], dx).unwrap(),
        Tensor::from_vec(&[c], dgamma).unwrap(),
        Tensor::from_vec(&[c], dbeta).unwrap(),
    )
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (h2, w2) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let srow = &src[ch * h * w + (y / 2) * w..][..w];
            let drow = &mut out[ch * h2 * w2 + y * w2..][..w2];
            for (x2, d) in drow.iter_mut().enumerate() {
                *d = srow[x2 / 2];
            }
        }
    }
    Tensor::from_vec(&[c, h2, w2], out).unwrap()
}

pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = grad_out.chw();
    let (h, w) = (h2 / 2, w2 / 2);
    let g = grad_out.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                out[ch * h * w + (y / 2) * w + x / 2] += g[ch * h2 * w2 + y * w2 + x];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out).unwrap()
}

pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let s = x.data();
    Tensor::from_fn(&[c, ho, wo], |i| {
        let ch = i / (ho * wo);
        let y = (i / wo) % ho;
        let xx = i % wo;
        let b = ch * h * w + 2 * y * w + 2 * xx;
        (s[b] + s[b + 1] + s[b + w] + s[b + w + 1]) * quarter
    })
}

pub fn avg_pool2_backward<T: Scalar>(grad_out: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, ho, wo) = grad_out.chw();
    let quarter = T::lit(0.25);
    let g = grad_out.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let v = g[ch * ho * wo + y * wo + x] * quarter;
                let b = ch * h * w + 2 * y * w + 2 * x;
                out[b] += v;
                out[b + 1] += v;
                out[b + w] += v;
                out[b + w + 1] += v;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out).unwrap()
}
