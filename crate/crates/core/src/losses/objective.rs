//! The full per-tuple training objective on a tape.

use serde::{Deserialize, Serialize};

use super::{LossWeights, RankLayout, ResidualTarget, StyleTarget};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::flowops::{warp_backward, AnchorGeometry};
use crate::networks::{features_graph, Bound, NetworkHandle};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::videodata::{FlowField, OcclusionMask};

/// Shared, tuple-independent pieces of the objective.
pub struct Objective<'a, T: Scalar> {
    pub features: &'a NetworkHandle<T>,
    pub style: &'a StyleTarget<T>,
    pub weights: &'a LossWeights,
    pub rank_layout: RankLayout,
}

/// Per-tuple inputs. `flows[i]`/`masks[i]` carry frame `i` onto frame `i+1`.
pub struct TupleTargets<'a, T> {
    pub frames: &'a [Tensor<T>],
    pub flows: &'a [FlowField<T>],
    pub masks: &'a [OcclusionMask],
    pub residual: Option<&'a [ResidualTarget<T>]>,
    /// Anchor geometry and the nuclear norm the student is pulled toward.
    pub rank: Option<(&'a AnchorGeometry<T>, T)>,
}

/// Weighted contribution of each term; they sum to `total`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    pub tv: f64,
    pub residual: f64,
    pub temporal: f64,
    pub rank: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn resum(&self) -> f64 {
        self.content + self.style + self.tv + self.residual + self.temporal + self.rank
    }

    pub fn perceptual(&self) -> f64 {
        self.content + self.style + self.tv
    }
}

pub struct ObjectiveTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

#[derive(Default)]
struct Terms {
    content: Vec<Var>,
    style: Vec<Var>,
    tv: Vec<Var>,
    residual: Vec<Var>,
    temporal: Vec<Var>,
    rank: Vec<Var>,
}

/// Assembles
/// `Σ_t (λc·Lc + λs·Ls + λtv·Ltv + λres·Lres) + Σ_{t≥1} λtemp·Ltemp + λrank·Lrank`
/// over the stylized frames `outs`. Terms whose weight is zero are not built.
pub fn tuple_objective<T: Scalar>(
    g: &mut Graph<T>,
    obj: &Objective<'_, T>,
    features: &Bound,
    outs: &[Var],
    targets: &TupleTargets<'_, T>,
) -> Result<ObjectiveTerms> {
    let w = obj.weights;
    let k = outs.len();
    if targets.frames.len() != k {
        return Err(Error::shape(format!(
            "{k} outputs for {} frames",
            targets.frames.len()
        )));
    }
    let mut terms = Terms::default();
    let content_layers: Vec<&str> = obj
        .style
        .content_layers
        .iter()
        .map(String::as_str)
        .collect();
    let style_layers = obj.style.style_layers();

    for (t, &y) in outs.iter().enumerate() {
        if w.content > 0.0 {
            let x = g.constant(targets.frames[t].clone());
            let fc = features_graph(g, features, x, &content_layers)?;
            let fs = features_graph(g, features, y, &content_layers)?;
            for (a, b) in fs.into_iter().zip(fc) {
                let target = g.value(b).clone();
                let c = g.constant(target);
                let d = g.sub(a, c);
                terms.content.push(g.mean_square(d));
            }
        }
        if w.style > 0.0 {
            let fs = features_graph(g, features, y, &style_layers)?;
            for (f, (_, gram_s)) in fs.into_iter().zip(&obj.style.grams) {
                let gm = g.gram(f);
                let c = g.constant(gram_s.clone());
                let d = g.sub(gm, c);
                terms.style.push(g.mean_square(d));
            }
        }
        if w.tv > 0.0 {
            terms.tv.push(g.total_variation(y));
        }
        if w.residual > 0.0 {
            let r = targets
                .residual
                .ok_or_else(|| Error::CacheMiss("residual targets".into()))?;
            let c = g.constant(r[t].collapsed());
            let d = g.sub(y, c);
            terms.residual.push(g.mean_square(d));
        }
    }

    if w.temporal > 0.0 {
        if targets.flows.len() + 1 < k || targets.masks.len() + 1 < k {
            return Err(Error::MissingFlow);
        }
        for t in 1..k {
            terms.temporal.push(temporal_graph(
                g,
                outs[t],
                outs[t - 1],
                &targets.flows[t - 1],
                &targets.masks[t - 1],
            )?);
        }
    }

    if w.rank > 0.0 {
        let (geom, anchor_nuclear) = targets.rank.ok_or_else(|| {
            Error::GeometryMismatch("no anchor geometry for the rank term".into())
        })?;
        let n = nuclear_graph(g, outs, geom, obj.rank_layout)?;
        terms.rank.push(g.squared_gap(n, anchor_nuclear));
    }

    let groups = [
        (&terms.content, w.content),
        (&terms.style, w.style),
        (&terms.tv, w.tv),
        (&terms.residual, w.residual),
        (&terms.temporal, w.temporal),
        (&terms.rank, w.rank),
    ];
    let mut weighted = Vec::new();
    let mut sums = [0.0f64; 6];
    for (i, (vars, lambda)) in groups.iter().enumerate() {
        for &v in vars.iter() {
            weighted.push((v, T::lit(*lambda)));
            sums[i] += lambda * g.scalar(v).as_f64();
        }
    }
    let total = g.weighted_sum(&weighted);
    let breakdown = LossBreakdown {
        content: sums[0],
        style: sums[1],
        tv: sums[2],
        residual: sums[3],
        temporal: sums[4],
        rank: sums[5],
        total: g.scalar(total).as_f64(),
    };
    Ok(ObjectiveTerms { total, breakdown })
}

/// `mean((M ⊙ (cur − warp(prev)))²)` with the warp's out-of-frame samples
/// folded into the mask.
pub fn temporal_graph<T: Scalar>(
    g: &mut Graph<T>,
    cur: Var,
    prev: Var,
    flow: &FlowField<T>,
    mask: &OcclusionMask,
) -> Result<Var> {
    let (c, h, w) = g.value(cur).chw();
    let validity = warp_backward(&Tensor::<T>::zeros(&[1, h, w]), flow)?.validity;
    let m = mask.and(&validity).to_tensor::<T>(c);
    let f = g.constant(flow.as_tensor().clone());
    let warped = g.warp(prev, f);
    let d = g.sub(cur, warped);
    let md = g.mul_const(d, m);
    Ok(g.mean_square(md))
}

/// Nuclear norm of the rank matrix of `outs` on the anchor grid.
pub fn nuclear_graph<T: Scalar>(
    g: &mut Graph<T>,
    outs: &[Var],
    geom: &AnchorGeometry<T>,
    layout: RankLayout,
) -> Result<Var> {
    if outs.len() != geom.frames() {
        return Err(Error::GeometryMismatch(format!(
            "{} frames for a {}-frame geometry",
            outs.len(),
            geom.frames()
        )));
    }
    let (c, _, _) = g.value(outs[0]).chw();
    let mask = geom.mask.to_tensor::<T>(c);
    let mut rows = Vec::with_capacity(outs.len());
    for (t, &y) in outs.iter().enumerate() {
        let src = if t == geom.anchor {
            y
        } else {
            let f = g.constant(geom.flows[t].as_tensor().clone());
            g.warp(y, f)
        };
        rows.push(g.mul_const(src, mask.clone()));
    }
    match layout {
        RankLayout::Joint => Ok(g.nuclear_norm(&rows)),
        RankLayout::PerChannel => {
            // Zeroing the other channels leaves each channel's singular
            // values unchanged.
            let plane = mask.len() / c;
            let mut parts = Vec::with_capacity(c);
            for ch in 0..c {
                let sel = Tensor::from_fn(mask.shape(), |i| {
                    if i / plane == ch {
                        T::one()
                    } else {
                        T::zero()
                    }
                });
                let sub: Vec<Var> = rows.iter().map(|&r| g.mul_const(r, sel.clone())).collect();
                parts.push((g.nuclear_norm(&sub), T::one()));
            }
            Ok(g.weighted_sum(&parts))
        }
    }
}
