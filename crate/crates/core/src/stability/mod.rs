//! Temporal-stability metric, per-scene reports, throughput benchmark and
//! rank diagnostics.

mod report;

use std::path::Path;
use std::time::Instant;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowops::warp_backward;
use crate::losses::{build_rank_matrix, RankLayout};
use crate::networks::{
    student_forward, teacher_forward, teacher_noflow_forward, teacher_sequence, Arch, NetworkHandle,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::videodata::{FlowField, FrameSequence, OcclusionMask, TrainingTuple};

pub use report::{render_table, SceneStab, StabilityReport};

/// How the per-pair error is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EStabOptions {
    /// Use the unsquared L2 norm inside the sum instead of the squared one.
    pub literal_norm: bool,
    /// Count channels in the per-frame normalizer.
    pub include_channels: bool,
}

impl Default for EStabOptions {
    fn default() -> Self {
        Self {
            literal_norm: false,
            include_channels: true,
        }
    }
}

/// Per-pixel masked difference between frame `t` and the warped frame
/// `t-1`. Samples that left the frame count as untraceable.
fn masked_diff<T: Scalar>(
    cur: &Tensor<T>,
    prev: &Tensor<T>,
    flow: &FlowField<T>,
    mask: &OcclusionMask,
) -> Result<Tensor<T>> {
    if cur.shape() != prev.shape() {
        return Err(Error::shape("stylized frames differ in shape"));
    }
    let warped = warp_backward(prev, flow)?;
    let (c, h, w) = cur.chw();
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape("mask size differs from frame size"));
    }
    let m = mask.and(&warped.validity).to_tensor::<T>(c);
    Ok(cur.sub(&warped.image).zip_map(&m, |a, b| a * b))
}

/// Root of the mean, over consecutive pairs, of the normalized masked
/// squared temporal error.
pub fn e_stab<T: Scalar>(
    stylized: &[Tensor<T>],
    flows: &[FlowField<T>],
    masks: &[OcclusionMask],
    opts: EStabOptions,
) -> Result<f64> {
    let n = stylized.len();
    if n < 2 || flows.len() + 1 != n || masks.len() + 1 != n {
        return Err(Error::LengthMismatch(format!(
            "{n} frames, {} flows, {} masks",
            flows.len(),
            masks.len()
        )));
    }
    let mut acc = 0.0;
    for t in 1..n {
        let d = masked_diff(&stylized[t], &stylized[t - 1], &flows[t - 1], &masks[t - 1])?;
        let (c, h, w) = d.chw();
        let denom = if opts.include_channels {
            c * h * w
        } else {
            h * w
        } as f64;
        let sq: f64 = d.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
        acc += if opts.literal_norm { sq.sqrt() } else { sq } / denom;
    }
    Ok((acc / (n - 1) as f64).sqrt())
}

/// Per-pixel temporal error magnitude for the pair `(t-1, t)`, one channel.
pub fn temporal_error_map<T: Scalar>(
    cur: &Tensor<T>,
    prev: &Tensor<T>,
    flow: &FlowField<T>,
    mask: &OcclusionMask,
) -> Result<Tensor<f64>> {
    let d = masked_diff(cur, prev, flow, mask)?;
    let (c, h, w) = d.chw();
    let plane = h * w;
    Ok(Tensor::from_fn(&[1, h, w], |i| {
        (0..c)
            .map(|ch| d.data()[ch * plane + i].as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }))
}

/// Writes one grayscale error map per consecutive pair. Every map in the
/// sequence shares one scale, so brightness is comparable across frames.
pub fn write_heatmaps<T: Scalar>(
    dir: &Path,
    stylized: &[Tensor<T>],
    flows: &[FlowField<T>],
    masks: &[OcclusionMask],
) -> Result<()> {
    if stylized.len() != flows.len() + 1 || masks.len() != flows.len() {
        return Err(Error::LengthMismatch("heatmap inputs".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let maps = (1..stylized.len())
        .map(|t| temporal_error_map(&stylized[t], &stylized[t - 1], &flows[t - 1], &masks[t - 1]))
        .collect::<Result<Vec<_>>>()?;
    let peak = maps
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    for (i, m) in maps.iter().enumerate() {
        let (_, h, w) = m.chw();
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let v = m.data()[y as usize * w + x as usize] / peak;
            image::Luma([(v * 255.0).round() as u8])
        });
        let path = dir.join(format!("error_{:04}.png", i + 1));
        img.save(&path).map_err(|e| Error::Image {
            path,
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

/// Runs a network over a clip the way it is deployed: frame by frame for
/// frame-local nets, recurrently for the flow teacher.
pub fn stylize_sequence<T: Scalar>(
    net: &NetworkHandle<T>,
    seq: &FrameSequence<T>,
) -> Result<Vec<Tensor<T>>> {
    match net.arch {
        Arch::Student => seq.frames.iter().map(|f| student_forward(net, f)).collect(),
        Arch::TeacherNoflow => seq
            .frames
            .iter()
            .map(|f| teacher_noflow_forward(net, f))
            .collect(),
        Arch::TeacherFlow => teacher_sequence(net, &seq.frames, &seq.flows, &seq.masks),
        Arch::Features => Err(Error::ArchMismatch {
            expected: "a stylizer".into(),
            found: Arch::Features.to_string(),
        }),
    }
}

/// Scores already-stylized clips against each scene's flows and masks.
pub fn evaluate_stylized<T: Scalar>(
    model: &str,
    scenes: &[FrameSequence<T>],
    stylized: &[Vec<Tensor<T>>],
    opts: EStabOptions,
) -> Result<StabilityReport> {
    if scenes.len() != stylized.len() {
        return Err(Error::LengthMismatch(format!(
            "{} scenes, {} stylized clips",
            scenes.len(),
            stylized.len()
        )));
    }
    let scenes = scenes
        .iter()
        .zip(stylized)
        .map(|(s, y)| {
            Ok(SceneStab {
                scene: s.source_id.clone(),
                e_stab: e_stab(y, &s.flows, &s.masks, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StabilityReport::new(model, scenes))
}

pub fn evaluate_scenes<T: Scalar>(
    model: &NetworkHandle<T>,
    scenes: &[FrameSequence<T>],
    opts: EStabOptions,
) -> Result<StabilityReport> {
    let stylized = scenes
        .iter()
        .map(|s| stylize_sequence(model, s))
        .collect::<Result<Vec<_>>>()?;
    evaluate_stylized(model.arch.as_str(), scenes, &stylized, opts)
}

/// Throughput measured as the reciprocal of the median per-frame time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsMeasurement {
    pub arch: Arch,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub median_secs: f64,
    pub timed_iters: usize,
    pub include_flow_pipeline: bool,
}

/// Fraction of the flow teacher's per-frame time that its authors attribute
/// to flow estimation and warping. Flow here comes from a fixture, so this
/// share is reported, not measured.
pub const FLOW_COST_SHARE: f64 = 0.97;

/// Times single-frame inference at `width×height`. For the flow teacher with
/// `include_flow_pipeline`, each timed frame also warps the previous output
/// and builds the masked conditioning from a fixed flow fixture.
pub fn fps_bench<T: Scalar>(
    model: &NetworkHandle<T>,
    width: usize,
    height: usize,
    warmup_iters: usize,
    timed_iters: usize,
    include_flow_pipeline: bool,
) -> Result<FpsMeasurement> {
    if timed_iters < 10 {
        return Err(Error::ConfigInvalid {
            key: "timed_iters".into(),
            reason: format!("needs at least 10, got {timed_iters}"),
        });
    }
    let frame = Tensor::from_fn(&[3, height, width], |i| {
        T::lit(((i * 7919) % 251) as f64 / 250.0)
    });
    let flow = FlowField::constant(height, width, T::lit(-1.5), T::lit(0.5));
    let mask = OcclusionMask::ones(height, width);
    let mut prev = Tensor::full(&[3, height, width], T::lit(0.5));
    let mut step = || -> Result<()> {
        let y = match model.arch {
            Arch::Student => student_forward(model, &frame)?,
            Arch::TeacherNoflow => teacher_noflow_forward(model, &frame)?,
            Arch::TeacherFlow if include_flow_pipeline => {
                teacher_forward(model, &frame, Some(&prev), Some(&flow), Some(&mask))?
            }
            Arch::TeacherFlow => teacher_forward(model, &frame, None, None, None)?,
            Arch::Features => {
                return Err(Error::ArchMismatch {
                    expected: "a stylizer".into(),
                    found: Arch::Features.to_string(),
                })
            }
        };
        prev = y;
        Ok(())
    };
    for _ in 0..warmup_iters {
        step()?;
    }
    let mut times = Vec::with_capacity(timed_iters);
    for _ in 0..timed_iters {
        let t0 = Instant::now();
        step()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 0 {
        0.5 * (times[mid - 1] + times[mid])
    } else {
        times[mid]
    };
    Ok(FpsMeasurement {
        arch: model.arch,
        width,
        height,
        fps: 1.0 / median.max(1e-12),
        median_secs: median,
        timed_iters,
        include_flow_pipeline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDiagnostic {
    pub source_id: String,
    pub start: usize,
    pub nuclear: f64,
    pub numeric_rank: usize,
    pub k: usize,
}

/// Nuclear norm and numeric rank of each stylized tuple on its anchor grid.
pub fn rank_diagnostics<T: Scalar>(
    tuples: &[TrainingTuple<T>],
    stylized: &[Vec<Tensor<T>>],
    layout: RankLayout,
) -> Result<Vec<RankDiagnostic>> {
    if tuples.len() != stylized.len() {
        return Err(Error::LengthMismatch(format!(
            "{} tuples, {} stylized tuples",
            tuples.len(),
            stylized.len()
        )));
    }
    tuples
        .iter()
        .zip(stylized)
        .map(|(tuple, y)| {
            // Spectra are computed in f64 whatever the training precision.
            let geom = tuple.geometry()?;
            let geom64 = crate::flowops::AnchorGeometry {
                anchor: geom.anchor,
                flows: geom.flows.iter().map(FlowField::cast).collect(),
                mask: geom.mask.clone(),
            };
            let y64: Vec<Tensor<f64>> = y.iter().map(Tensor::cast).collect();
            let m = build_rank_matrix(&y64, &geom64, layout)?;
            Ok(RankDiagnostic {
                source_id: tuple.source_id.clone(),
                start: tuple.start,
                nuclear: m.nuclear,
                numeric_rank: m.numeric_rank,
                k: m.k,
            })
        })
        .collect()
}
