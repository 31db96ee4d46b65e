//! Backward warping, flow composition toward an anchor frame, and occlusion
//! estimation from forward/backward flow pairs.

pub(crate) mod sample;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::videodata::{FlowField, OcclusionMask};

/// A warped image and the map of samples that landed inside the source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult<T> {
    pub image: Tensor<T>,
    pub validity: OcclusionMask,
}

fn check_flow<T: Scalar>(img: &Tensor<T>, flow: &FlowField<T>) -> Result<()> {
    let (_, h, w) = img.chw();
    if (h, w) != (flow.height(), flow.width()) {
        return Err(Error::shape(format!(
            "image is {h}x{w} but flow is {}x{}",
            flow.height(),
            flow.width()
        )));
    }
    Ok(())
}

fn check_mask<T: Scalar>(img: &Tensor<T>, mask: &OcclusionMask) -> Result<()> {
    let (_, h, w) = img.chw();
    if (h, w) != (mask.height(), mask.width()) {
        return Err(Error::shape(format!(
            "image is {h}x{w} but mask is {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Resamples `src` at `p + flow(p)` with bilinear interpolation.
pub fn warp_backward<T: Scalar>(src: &Tensor<T>, flow: &FlowField<T>) -> Result<WarpResult<T>> {
    check_flow(src, flow)?;
    let (image, valid) = sample::sample(src, flow.as_tensor());
    Ok(WarpResult {
        image,
        validity: OcclusionMask::from_vec(flow.height(), flow.width(), valid)?,
    })
}

/// Gradients of `⟨grad_out, warp_backward(src, flow)⟩` with respect to the
/// source image and the flow.
pub fn warp_backward_vjp<T: Scalar>(
    grad_out: &Tensor<T>,
    src: &Tensor<T>,
    flow: &FlowField<T>,
) -> Result<(Tensor<T>, FlowField<T>)> {
    check_flow(src, flow)?;
    if grad_out.shape() != src.shape() {
        return Err(Error::shape("gradient and source differ in shape"));
    }
    let d_src = sample::sample_vjp_src(grad_out, flow.as_tensor());
    let d_flow = sample::sample_vjp_flow(grad_out, src, flow.as_tensor());
    Ok((d_src, FlowField::from_tensor(d_flow)?))
}

/// Composes a chain of flows into one. `chain[0]` is defined on the target
/// grid and points into the grid of `chain[1]`'s definition, and so on; the
/// result samples the last frame of the chain directly from the target grid.
///
/// Returns the composed flow and the pixels whose whole chain stayed in frame.
pub fn compose_chain<T: Scalar>(chain: &[&FlowField<T>]) -> Result<(FlowField<T>, OcclusionMask)> {
    let first = chain
        .first()
        .ok_or_else(|| Error::shape("empty flow chain"))?;
    let (h, w) = (first.height(), first.width());
    let mut acc = (*first).clone();
    let mut valid = OcclusionMask::ones(h, w);
    for next in &chain[1..] {
        if (next.height(), next.width()) != (h, w) {
            return Err(Error::shape("flows in a chain must share one size"));
        }
        let (sampled, ok) = sample::sample(next.as_tensor(), acc.as_tensor());
        let sum = acc.as_tensor().add(&sampled);
        acc = FlowField::from_tensor(sum)?;
        valid = valid.and(&OcclusionMask::from_vec(h, w, ok)?);
    }
    // The final hop must also land inside the frame.
    let probe = Tensor::<T>::zeros(&[1, h, w]);
    let (_, ok) = sample::sample(&probe, acc.as_tensor());
    valid = valid.and(&OcclusionMask::from_vec(h, w, ok)?);
    Ok((acc, valid))
}

/// Carries a mask chain to the target grid: a pixel is traceable only if it
/// is traceable at every hop. Intermediate masks are bilinearly resampled and
/// re-binarized at 0.5.
pub fn compose_mask_chain<T: Scalar>(
    flows: &[&FlowField<T>],
    masks: &[&OcclusionMask],
) -> Result<OcclusionMask> {
    if flows.len() != masks.len() || flows.is_empty() {
        return Err(Error::shape("mask chain needs one mask per flow"));
    }
    let (h, w) = (flows[0].height(), flows[0].width());
    let mut out = masks[0].clone();
    let mut acc = flows[0].clone();
    for (flow, mask) in flows[1..].iter().zip(&masks[1..]) {
        let m = mask.to_tensor::<T>(1);
        let (sampled, ok) = sample::sample(&m, acc.as_tensor());
        let half = T::lit(0.5);
        let bin: Vec<u8> = sampled
            .data()
            .iter()
            .zip(&ok)
            .map(|(&v, &o)| u8::from(o != 0 && v >= half))
            .collect();
        out = out.and(&OcclusionMask::from_vec(h, w, bin)?);
        let (step, _) = sample::sample(flow.as_tensor(), acc.as_tensor());
        acc = FlowField::from_tensor(acc.as_tensor().add(&step))?;
    }
    Ok(out)
}

/// Per-step flows of a K-frame tuple in both directions.
///
/// `backward[i]` lives on frame `i+1` and samples frame `i`;
/// `forward[i]` lives on frame `i` and samples frame `i+1`.
pub struct FlowChain<'a, T> {
    pub backward: &'a [FlowField<T>],
    pub forward: &'a [FlowField<T>],
}

impl<T: Scalar> FlowChain<'_, T> {
    fn frames(&self) -> usize {
        self.backward.len() + 1
    }

    /// Flows to compose, in sampling order, to fetch frame `t` from anchor `tau`.
    fn hops(&self, t: usize, tau: usize) -> Vec<&FlowField<T>> {
        if t < tau {
            (t..tau).rev().map(|i| &self.backward[i]).collect()
        } else {
            (tau..t).map(|i| &self.forward[i]).collect()
        }
    }
}

/// Flow on the anchor grid that samples frame `t` directly. `t == tau` gives
/// the zero flow.
pub fn compose_to_anchor<T: Scalar>(
    chain: &FlowChain<'_, T>,
    t: usize,
    tau: usize,
) -> Result<FlowField<T>> {
    let k = chain.frames();
    if chain.forward.len() != chain.backward.len() {
        return Err(Error::shape("forward and backward chains differ in length"));
    }
    for idx in [t, tau] {
        if idx >= k {
            return Err(Error::IndexOutOfRange { index: idx, len: k });
        }
    }
    if t == tau {
        let f = &chain.backward[0];
        return Ok(FlowField::zeros(f.height(), f.width()));
    }
    Ok(compose_chain(&chain.hops(t, tau))?.0)
}

const INVERSION_ITERS: usize = 20;

/// Approximate inverse of a dense flow by fixed-point iteration on
/// `f(q) = -b(q + f(q))`, sampling `b` with edge clamping. Exact for
/// constant flows.
pub fn invert_flow<T: Scalar>(bwd: &FlowField<T>) -> FlowField<T> {
    let neg = bwd.as_tensor().scale(-T::one());
    let mut f = neg.clone();
    for _ in 0..INVERSION_ITERS {
        let next = sample::sample_clamped(bwd.as_tensor(), &f).scale(-T::one());
        let done = next.max_abs_diff(&f) <= T::lit(1e-6);
        f = next;
        if done {
            break;
        }
    }
    FlowField::from_tensor(f).expect("inverse of a finite flow is finite")
}

/// Default forward/backward consistency thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionThresholds {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
}

impl Default for OcclusionThresholds {
    fn default() -> Self {
        Self {
            alpha1: 0.01,
            alpha2: 0.5,
            alpha3: 0.01,
            alpha4: 0.002,
        }
    }
}

/// Marks a pixel occluded when the flow pair is inconsistent,
/// `|w + ŵ(p+w)|² > α₁(|w|² + |ŵ(p+w)|²) + α₂`, or when it sits on a motion
/// boundary, `|∇u|² + |∇v|² > α₃|w|² + α₄`.
///
/// `fwd` is defined on the grid the mask describes; `bwd` on the other frame.
/// Samples of `bwd` that fall outside the frame are clamped to its edge.
pub fn estimate_occlusion_mask<T: Scalar>(
    fwd: &FlowField<T>,
    bwd: &FlowField<T>,
    th: OcclusionThresholds,
) -> Result<OcclusionMask> {
    let (h, w) = (fwd.height(), fwd.width());
    if (bwd.height(), bwd.width()) != (h, w) {
        return Err(Error::shape("forward and backward flows differ in size"));
    }
    let bw = sample::sample_clamped(bwd.as_tensor(), fwd.as_tensor());
    let (bu, bv) = bw.data().split_at(h * w);
    let (u, v) = (fwd.u(), fwd.v());
    let a = |x: f64| T::lit(x);
    let mut mask = OcclusionMask::ones(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (fu, fv) = (u[i], v[i]);
            let (ru, rv) = (bu[i], bv[i]);
            let su = fu + ru;
            let sv = fv + rv;
            let lhs = su * su + sv * sv;
            let mag_f = fu * fu + fv * fv;
            let mag_b = ru * ru + rv * rv;
            let inconsistent = lhs > a(th.alpha1) * (mag_f + mag_b) + a(th.alpha2);
            // Forward differences, replicated at the far border.
            let xn = (x + 1).min(w - 1);
            let yn = (y + 1).min(h - 1);
            let (ux, vx) = (u[y * w + xn] - fu, v[y * w + xn] - fv);
            let (uy, vy) = (u[yn * w + x] - fu, v[yn * w + x] - fv);
            let grad = ux * ux + uy * uy + vx * vx + vy * vy;
            let boundary = grad > a(th.alpha3) * mag_f + a(th.alpha4);
            if inconsistent || boundary {
                mask.set(y, x, false);
            }
        }
    }
    Ok(mask)
}

/// `mask ⊙ warp_backward(stylized, flow_to_anchor)`.
pub fn traceable_region<T: Scalar>(
    stylized: &Tensor<T>,
    flow_to_anchor: &FlowField<T>,
    mask: &OcclusionMask,
) -> Result<Tensor<T>> {
    check_flow(stylized, flow_to_anchor)?;
    check_mask(stylized, mask)?;
    let warped = warp_backward(stylized, flow_to_anchor)?;
    let (c, _, _) = stylized.chw();
    Ok(warped.image.zip_map(&mask.to_tensor(c), |a, b| a * b))
}

/// Anchor-grid alignment of a K-frame tuple: one composed flow per frame and
/// the mask of pixels traceable in every frame of the tuple.
#[derive(Debug, Clone)]
pub struct AnchorGeometry<T> {
    pub anchor: usize,
    pub flows: Vec<FlowField<T>>,
    pub mask: OcclusionMask,
}

impl<T: Scalar> AnchorGeometry<T> {
    /// `backward_masks[i]` accompanies `chain.backward[i]` and
    /// `forward_masks[i]` accompanies `chain.forward[i]`.
    pub fn build(
        chain: &FlowChain<'_, T>,
        backward_masks: &[OcclusionMask],
        forward_masks: &[OcclusionMask],
        anchor: usize,
    ) -> Result<Self> {
        let k = chain.frames();
        if anchor >= k {
            return Err(Error::IndexOutOfRange {
                index: anchor,
                len: k,
            });
        }
        if backward_masks.len() + 1 != k || forward_masks.len() + 1 != k {
            return Err(Error::shape("one mask per flow required"));
        }
        let f0 = &chain.backward[0];
        let (h, w) = (f0.height(), f0.width());
        let mut flows = Vec::with_capacity(k);
        let mut mask = OcclusionMask::ones(h, w);
        for t in 0..k {
            if t == anchor {
                flows.push(FlowField::zeros(h, w));
                continue;
            }
            let hops = chain.hops(t, anchor);
            let hop_masks: Vec<&OcclusionMask> = if t < anchor {
                (t..anchor).rev().map(|i| &backward_masks[i]).collect()
            } else {
                (anchor..t).map(|i| &forward_masks[i]).collect()
            };
            let (flow, valid) = compose_chain(&hops)?;
            let m = compose_mask_chain(&hops, &hop_masks)?;
            mask = mask.and(&m).and(&valid);
            flows.push(flow);
        }
        Ok(Self {
            anchor,
            flows,
            mask,
        })
    }

    pub fn frames(&self) -> usize {
        self.flows.len()
    }

    /// Traceable region of frame `t` on the anchor grid.
    pub fn region(&self, t: usize, stylized: &Tensor<T>) -> Result<Tensor<T>> {
        if t == self.anchor {
            check_mask(stylized, &self.mask)?;
            let (c, _, _) = stylized.chw();
            return Ok(stylized.zip_map(&self.mask.to_tensor(c), |a, b| a * b));
        }
        traceable_region(stylized, &self.flows[t], &self.mask)
    }
}
