//! Loss terms for stylization and distillation.
//!
//! Every squared norm is a mean over elements. The eager functions here
//! evaluate single terms; [`objective`] assembles the full training objective
//! on a tape.

pub mod objective;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::flowops::{warp_backward, AnchorGeometry};
use crate::linalg::singular_values_via_gram;
use crate::networks::{feature_extract, features_graph, NetworkHandle, FEATURE_LAYERS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::videodata::{FlowField, OcclusionMask};

pub use objective::{tuple_objective, LossBreakdown, Objective, ObjectiveTerms, TupleTargets};

/// Relative singular-value floor for [`matrix_rank`].
pub const EPS_RANK: f64 = 1e-6;

/// Loss coefficients and the tuple length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub tv: f64,
    pub residual: f64,
    pub temporal: f64,
    pub rank: f64,
    pub k: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::paper()
    }
}

impl LossWeights {
    pub fn paper() -> Self {
        Self {
            content: 1.0,
            style: 1e4,
            tv: 1e-5,
            residual: 4e8,
            temporal: 1e6,
            rank: 1e2,
            k: 5,
        }
    }

    /// Perceptual terms only.
    pub fn perceptual_only(&self) -> Self {
        Self {
            residual: 0.0,
            temporal: 0.0,
            rank: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("content", self.content),
            ("style", self.style),
            ("tv", self.tv),
            ("residual", self.residual),
            ("temporal", self.temporal),
            ("rank", self.rank),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::ConfigInvalid {
                    key: format!("weights.{key}"),
                    reason: format!("{v} is not a finite non-negative number"),
                });
            }
        }
        if self.k < 2 {
            return Err(Error::ConfigInvalid {
                key: "weights.k".into(),
                reason: "tuples need at least 2 frames".into(),
            });
        }
        Ok(())
    }
}

/// Style image statistics and the layers the perceptual loss reads.
#[derive(Debug, Clone)]
pub struct StyleTarget<T> {
    pub style_image: Tensor<T>,
    pub grams: Vec<(String, Tensor<T>)>,
    pub content_layers: Vec<String>,
}

impl<T: Scalar> StyleTarget<T> {
    pub fn new(
        features: &NetworkHandle<T>,
        style_image: Tensor<T>,
        content_layers: &[&str],
        style_layers: &[&str],
    ) -> Result<Self> {
        for l in content_layers {
            if !FEATURE_LAYERS.contains(l) {
                return Err(Error::UnknownLayer((*l).to_string()));
            }
        }
        let stack = feature_extract(features, &style_image, style_layers)?;
        let grams = stack
            .maps
            .into_iter()
            .map(|(name, f)| gram_matrix(&f).map(|g| (name, g)))
            .collect::<Result<_>>()?;
        Ok(Self {
            style_image,
            grams,
            content_layers: content_layers.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// Content on `relu2`, style on every layer.
    pub fn standard(features: &NetworkHandle<T>, style_image: Tensor<T>) -> Result<Self> {
        Self::new(features, style_image, &["relu2"], &FEATURE_LAYERS)
    }

    pub fn style_layers(&self) -> Vec<&str> {
        self.grams.iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// `F·Fᵀ / (C·H·W)` of a `C×H×W` feature map.
pub fn gram_matrix<T: Scalar>(feat: &Tensor<T>) -> Result<Tensor<T>> {
    if feat.shape().len() != 3 {
        return Err(Error::shape(format!(
            "gram needs C×H×W, got {:?}",
            feat.shape()
        )));
    }
    if !feat.all_finite() {
        return Err(Error::NonFinite("feature map".into()));
    }
    let mut g = Graph::new();
    let v = g.constant(feat.clone());
    let gm = g.gram(v);
    Ok(g.value(gm).clone())
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    a.sub(b).sum_sq() / T::from_usize(a.len()).unwrap()
}

/// Unweighted perceptual terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerceptualBreakdown {
    pub content: f64,
    pub style: f64,
    pub tv: f64,
    pub total: f64,
}

pub fn perceptual_loss<T: Scalar>(
    stylized: &Tensor<T>,
    content: &Tensor<T>,
    target: &StyleTarget<T>,
    w: &LossWeights,
    features: &NetworkHandle<T>,
) -> Result<PerceptualBreakdown> {
    same_shape(stylized, content, "stylized and content images")?;
    let mut g = Graph::new();
    let bound = features.bind_constants(&mut g);
    let x = g.constant(stylized.clone());
    let c = g.constant(content.clone());
    let content_layers: Vec<&str> = target.content_layers.iter().map(String::as_str).collect();
    let fs = features_graph(&mut g, &bound, x, &content_layers)?;
    let fc = features_graph(&mut g, &bound, c, &content_layers)?;
    let mut content_term = T::zero();
    for (a, b) in fs.iter().zip(&fc) {
        content_term += mse(g.value(*a), g.value(*b));
    }
    let style_layers = target.style_layers();
    let fst = features_graph(&mut g, &bound, x, &style_layers)?;
    let mut style_term = T::zero();
    for (f, (_, gram_s)) in fst.iter().zip(&target.grams) {
        style_term += mse(&gram_matrix(g.value(*f))?, gram_s);
    }
    let tv = g.total_variation(x);
    let tv_term = g.scalar(tv);
    let (cw, sw, tw) = (w.content, w.style, w.tv);
    let (content, style, tv) = (content_term.as_f64(), style_term.as_f64(), tv_term.as_f64());
    Ok(PerceptualBreakdown {
        content,
        style,
        tv,
        total: cw * content + sw * style + tw * tv,
    })
}

/// Mean squared difference to the teacher output.
pub fn vanilla_kd_loss<T: Scalar>(teacher_out: &Tensor<T>, student_out: &Tensor<T>) -> Result<T> {
    same_shape(teacher_out, student_out, "teacher and student outputs")?;
    Ok(mse(student_out, teacher_out))
}

/// Frozen per-frame targets of residual distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTarget<T> {
    /// Flow teacher minus flow-free teacher.
    pub delta_t: Tensor<T>,
    /// Output of the from-scratch student.
    pub baseline: Tensor<T>,
}

impl<T: Scalar> ResidualTarget<T> {
    /// The image the student output is regressed onto.
    pub fn collapsed(&self) -> Tensor<T> {
        self.baseline.add(&self.delta_t)
    }
}

/// `mean((student − (baseline + ΔT))²)`.
pub fn residual_loss<T: Scalar>(student_out: &Tensor<T>, target: &ResidualTarget<T>) -> Result<T> {
    same_shape(student_out, &target.delta_t, "student output and residual")?;
    same_shape(student_out, &target.baseline, "student output and baseline")?;
    Ok(mse(student_out, &target.collapsed()))
}

/// `mean((ΔT − ΔS)²)` with `ΔS = student − baseline`, evaluated literally.
pub fn residual_loss_direct<T: Scalar>(
    student_out: &Tensor<T>,
    target: &ResidualTarget<T>,
) -> Result<T> {
    same_shape(student_out, &target.delta_t, "student output and residual")?;
    same_shape(student_out, &target.baseline, "student output and baseline")?;
    let delta_s = student_out.sub(&target.baseline);
    Ok(mse(&target.delta_t, &delta_s))
}

/// `mean((M ⊙ (cur − warp(prev, flow)))²)`. Samples that leave the frame are
/// treated as occluded.
pub fn temporal_loss<T: Scalar>(
    cur: &Tensor<T>,
    prev: &Tensor<T>,
    flow: &FlowField<T>,
    mask: &OcclusionMask,
) -> Result<T> {
    same_shape(cur, prev, "consecutive frames")?;
    let warped = warp_backward(prev, flow)?;
    let (c, h, w) = cur.chw();
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape("mask size differs from frame size"));
    }
    let m = mask.and(&warped.validity).to_tensor::<T>(c);
    let d = cur.sub(&warped.image).zip_map(&m, |a, b| a * b);
    Ok(d.sum_sq() / T::from_usize(d.len()).unwrap())
}

/// How rows of the rank matrix are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankLayout {
    /// One `K×(H·W·C)` matrix.
    #[default]
    Joint,
    /// One `K×(H·W)` matrix per channel; nuclear norms are summed.
    PerChannel,
}

/// The `K×L` matrix of flattened traceable regions and its spectrum.
#[derive(Debug, Clone)]
pub struct RankMatrix<T> {
    pub k: usize,
    pub l: usize,
    pub layout: RankLayout,
    /// Row-major `K×L`.
    pub x: Vec<T>,
    /// Descending singular values; per-channel layouts concatenate the
    /// spectra channel by channel.
    pub spectrum: Vec<T>,
    pub nuclear: T,
    pub numeric_rank: usize,
}

impl<T: Scalar> RankMatrix<T> {
    pub fn from_rows(rows: &[Tensor<T>], layout: RankLayout) -> Result<Self> {
        let k = rows.len();
        if k == 0 {
            return Err(Error::shape("rank matrix needs rows"));
        }
        let l = rows[0].len();
        if rows.iter().any(|r| r.len() != l) {
            return Err(Error::shape("rank-matrix rows differ in length"));
        }
        let x: Vec<T> = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rank matrix".into()));
        }
        let spectrum = match layout {
            RankLayout::Joint => singular_values_via_gram(&x, k, l).values,
            RankLayout::PerChannel => {
                let (c, h, w) = rows[0].chw();
                let plane = h * w;
                let mut all = Vec::with_capacity(k * c);
                for ch in 0..c {
                    let sub: Vec<T> = rows
                        .iter()
                        .flat_map(|r| r.channel(ch).iter().copied())
                        .collect();
                    all.extend(singular_values_via_gram(&sub, k, plane).values);
                }
                all
            }
        };
        let nuclear = spectrum.iter().copied().sum();
        let numeric_rank = rank_of_spectrum(&spectrum, k, EPS_RANK);
        Ok(Self {
            k,
            l,
            layout,
            x,
            spectrum,
            nuclear,
            numeric_rank,
        })
    }

    /// Frobenius norm of `X`.
    pub fn frobenius(&self) -> T {
        self.x.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Numeric rank from descending blocks of `k` singular values: the largest
/// count over blocks of values above `γ₀·eps`.
fn rank_of_spectrum<T: Scalar>(spectrum: &[T], k: usize, eps: f64) -> usize {
    spectrum
        .chunks(k)
        .map(|s| {
            let top = s.first().copied().unwrap_or_else(T::zero);
            if top <= T::zero() {
                return 0;
            }
            let floor = top * T::lit(eps);
            s.iter().filter(|&&g| g > floor).count()
        })
        .max()
        .unwrap_or(0)
}

/// Rows are the traceable regions of each stylized frame on the anchor grid.
pub fn build_rank_matrix<T: Scalar>(
    stylized: &[Tensor<T>],
    geometry: &AnchorGeometry<T>,
    layout: RankLayout,
) -> Result<RankMatrix<T>> {
    if stylized.len() != geometry.frames() {
        return Err(Error::shape(format!(
            "{} stylized frames for a {}-frame geometry",
            stylized.len(),
            geometry.frames()
        )));
    }
    let rows = stylized
        .iter()
        .enumerate()
        .map(|(t, y)| geometry.region(t, y))
        .collect::<Result<Vec<_>>>()?;
    RankMatrix::from_rows(&rows, layout)
}

/// Sum of singular values of a row-major `rows×cols` matrix.
pub fn nuclear_norm<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Result<T> {
    if x.len() != rows * cols {
        return Err(Error::shape("matrix buffer size"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix".into()));
    }
    Ok(singular_values_via_gram(x, rows, cols)
        .values
        .into_iter()
        .sum())
}

/// Count of singular values above `γ₀·eps_rank`.
pub fn matrix_rank<T: Scalar>(x: &[T], rows: usize, cols: usize, eps_rank: f64) -> usize {
    let s = singular_values_via_gram(x, rows, cols).values;
    rank_of_spectrum(&s, rows, eps_rank)
}

/// What the student's nuclear norm is pulled toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LowRankAnchor {
    /// The input frames' traceable regions.
    #[default]
    Input,
    /// The flow teacher's outputs.
    Teacher,
}

/// `(anchor.nuclear − student.nuclear)²`.
pub fn lowrank_loss<T: Scalar>(student: &RankMatrix<T>, anchor: &RankMatrix<T>) -> Result<T> {
    if (student.k, student.l, student.layout) != (anchor.k, anchor.l, anchor.layout) {
        return Err(Error::GeometryMismatch(format!(
            "{}x{} vs {}x{}",
            student.k, student.l, anchor.k, anchor.l
        )));
    }
    let d = anchor.nuclear - student.nuclear;
    Ok(d * d)
}

#[cfg(test)]
pub(crate) mod tests;
