//! Bilinear sampling kernels shared by the eager and taped warps.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sample positions closer than this to the frame edge still count as inside.
const EDGE_TOLERANCE: f64 = 1e-4;

/// Corner indices and weights of one bilinear sample.
#[derive(Clone, Copy)]
pub(crate) struct Tap<T> {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: T,
    pub fy: T,
}

#[inline]
pub(crate) fn tap<T: Scalar>(sx: T, sy: T, height: usize, width: usize) -> Option<Tap<T>> {
    let tol = T::lit(EDGE_TOLERANCE);
    let xmax = T::from_usize(width - 1).unwrap();
    let ymax = T::from_usize(height - 1).unwrap();
    if !(sx >= -tol && sx <= xmax + tol && sy >= -tol && sy <= ymax + tol) {
        return None;
    }
    let sx = sx.max(T::zero()).min(xmax);
    let sy = sy.max(T::zero()).min(ymax);
    let fx0 = sx.floor();
    let fy0 = sy.floor();
    let x0 = fx0.to_usize().unwrap();
    let y0 = fy0.to_usize().unwrap();
    Some(Tap {
        x0,
        x1: (x0 + 1).min(width - 1),
        y0,
        y1: (y0 + 1).min(height - 1),
        fx: sx - fx0,
        fy: sy - fy0,
    })
}

/// Samples every channel of `src` at `p + flow(p)`. Out-of-frame samples are
/// zero and flagged 0 in the returned validity map.
pub(crate) fn sample<T: Scalar>(src: &Tensor<T>, flow: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (c, h, w) = src.chw();
    let plane = h * w;
    let (u, v) = flow.data().split_at(plane);
    let s = src.data();
    let mut out = vec![T::zero(); c * plane];
    let mut valid = vec![0u8; plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = T::from_usize(x).unwrap() + u[i];
            let sy = T::from_usize(y).unwrap() + v[i];
            let Some(t) = tap(sx, sy, h, w) else { continue };
            valid[i] = 1;
            let (gx, gy) = (T::one() - t.fx, T::one() - t.fy);
            for ch in 0..c {
                let base = ch * plane;
                let a = s[base + t.y0 * w + t.x0];
                let b = s[base + t.y0 * w + t.x1];
                let cc = s[base + t.y1 * w + t.x0];
                let d = s[base + t.y1 * w + t.x1];
                out[base + i] = gy * (gx * a + t.fx * b) + t.fy * (gx * cc + t.fx * d);
            }
        }
    }
    (Tensor::from_vec(&[c, h, w], out).unwrap(), valid)
}

/// Vector-Jacobian product of [`sample`] with respect to the source image.
pub(crate) fn sample_vjp_src<T: Scalar>(grad_out: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = grad_out.chw();
    let plane = h * w;
    let (u, v) = flow.data().split_at(plane);
    let g = grad_out.data();
    let mut out = vec![T::zero(); c * plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = T::from_usize(x).unwrap() + u[i];
            let sy = T::from_usize(y).unwrap() + v[i];
            let Some(t) = tap(sx, sy, h, w) else { continue };
            let (gx, gy) = (T::one() - t.fx, T::one() - t.fy);
            for ch in 0..c {
                let base = ch * plane;
                let go = g[base + i];
                if go.is_zero() {
                    continue;
                }
                out[base + t.y0 * w + t.x0] += go * gy * gx;
                out[base + t.y0 * w + t.x1] += go * gy * t.fx;
                out[base + t.y1 * w + t.x0] += go * t.fy * gx;
                out[base + t.y1 * w + t.x1] += go * t.fy * t.fx;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out).unwrap()
}

/// Vector-Jacobian product of [`sample`] with respect to the flow. Defined
/// almost everywhere; at integer sample positions the right-hand cell is used.
pub(crate) fn sample_vjp_flow<T: Scalar>(
    grad_out: &Tensor<T>,
    src: &Tensor<T>,
    flow: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = src.chw();
    let plane = h * w;
    let (u, v) = flow.data().split_at(plane);
    let s = src.data();
    let g = grad_out.data();
    let mut out = vec![T::zero(); 2 * plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = T::from_usize(x).unwrap() + u[i];
            let sy = T::from_usize(y).unwrap() + v[i];
            let Some(t) = tap(sx, sy, h, w) else { continue };
            let (gx, gy) = (T::one() - t.fx, T::one() - t.fy);
            let mut du = T::zero();
            let mut dv = T::zero();
            for ch in 0..c {
                let base = ch * plane;
                let a = s[base + t.y0 * w + t.x0];
                let b = s[base + t.y0 * w + t.x1];
                let cc = s[base + t.y1 * w + t.x0];
                let d = s[base + t.y1 * w + t.x1];
                let go = g[base + i];
                du += go * (gy * (b - a) + t.fy * (d - cc));
                dv += go * (gx * (cc - a) + t.fx * (d - b));
            }
            out[i] = du;
            out[plane + i] = dv;
        }
    }
    Tensor::from_vec(&[2, h, w], out).unwrap()
}

/// Like [`sample`] but positions outside the frame are clamped to its edge.
pub(crate) fn sample_clamped<T: Scalar>(src: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let (_, h, w) = src.chw();
    let plane = h * w;
    let (u, v) = flow.data().split_at(plane);
    let xmax = T::from_usize(w - 1).unwrap();
    let ymax = T::from_usize(h - 1).unwrap();
    let mut clamped = Vec::with_capacity(2 * plane);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (T::from_usize(x).unwrap() + u[i]).max(T::zero()).min(xmax);
            clamped.push(sx - T::from_usize(x).unwrap());
        }
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sy = (T::from_usize(y).unwrap() + v[i]).max(T::zero()).min(ymax);
            clamped.push(sy - T::from_usize(y).unwrap());
        }
    }
    let flow = Tensor::from_vec(&[2, h, w], clamped).unwrap();
    sample(src, &flow).0
}
