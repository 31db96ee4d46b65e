//! Image-to-image networks and the frozen feature extractor.
//!
//! Stylizers share one trunk: a 9×9 stem, two stride-2 encoder convs,
//! residual blocks, and a nearest-upsample decoder ending in a sigmoid. Every
//! conv except the last is followed by instance norm and ReLU. The flow
//! teacher differs only in its 7-channel stem.

mod checkpoint;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::flowops::warp_backward;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::videodata::{FlowField, OcclusionMask};

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Student,
    TeacherFlow,
    TeacherNoflow,
    Features,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Student => "student",
            Arch::TeacherFlow => "teacher-flow",
            Arch::TeacherNoflow => "teacher-noflow",
            Arch::Features => "features",
        }
    }

    /// Input channels of one forward call.
    pub fn in_channels(self) -> usize {
        match self {
            Arch::TeacherFlow => 7,
            _ => 3,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Feature layers in depth order.
pub const FEATURE_LAYERS: [&str; 3] = ["relu1", "relu2", "relu3"];
const FEATURE_WIDTHS: [usize; 3] = [16, 32, 64];
const EDGE_KERNEL: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// A parameterized network with its identity.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkHandle<T> {
    pub arch: Arch,
    pub width_multiplier: f64,
    pub params: Vec<NamedParam<T>>,
    pub frozen: bool,
    pub checkpoint_id: String,
    pub seed: u64,
}

/// Trunk widths for a width multiplier.
pub fn trunk_widths(width_multiplier: f64) -> [usize; 3] {
    [32.0, 64.0, 128.0].map(|c: f64| ((c * width_multiplier).round() as usize).max(4))
}

pub fn residual_blocks(width_multiplier: f64) -> usize {
    ((5.0 * width_multiplier).round() as usize).max(2)
}

/// Parameter names and shapes, in binding order.
fn layout(arch: Arch, width_multiplier: f64) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut conv = |name: &str, cin: usize, cout: usize, k: usize, norm: bool| {
        out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
        out.push((format!("{name}.bias"), vec![cout]));
        if norm {
            out.push((format!("{name}.norm.gamma"), vec![cout]));
            out.push((format!("{name}.norm.beta"), vec![cout]));
        }
    };
    if arch == Arch::Features {
        let mut cin = 3;
        for (i, &c) in FEATURE_WIDTHS.iter().enumerate() {
            conv(&format!("conv{}", i + 1), cin, c, 3, false);
            cin = c;
        }
        return out;
    }
    let [c0, c1, c2] = trunk_widths(width_multiplier);
    conv("stem", arch.in_channels(), c0, EDGE_KERNEL, true);
    conv("enc1", c0, c1, 3, true);
    conv("enc2", c1, c2, 3, true);
    for i in 0..residual_blocks(width_multiplier) {
        conv(&format!("res{i}.a"), c2, c2, 3, true);
        conv(&format!("res{i}.b"), c2, c2, 3, true);
    }
    conv("dec1", c2, c1, 3, true);
    conv("dec2", c1, c0, 3, true);
    conv("out", c0, 3, EDGE_KERNEL, false);
    out
}

impl<T: Scalar> NetworkHandle<T> {
    /// Fresh network: He-normal conv weights, zero biases, unit norm gains.
    /// The output conv starts small so initial outputs sit near 0.5.
    pub fn init(arch: Arch, width_multiplier: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(arch, width_multiplier)
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if name.starts_with("out.") { 0.1 } else { 1.0 };
                    Tensor::gaussian(&shape, gain * (2.0 / fan_in as f64).sqrt(), &mut rng)
                } else if name.ends_with(".gamma") {
                    Tensor::full(&shape, T::one())
                } else {
                    Tensor::zeros(&shape)
                };
                NamedParam { name, value }
            })
            .collect();
        let mut net = Self {
            arch,
            width_multiplier,
            params,
            frozen: arch == Arch::Features,
            checkpoint_id: String::new(),
            seed,
        };
        net.refresh_id();
        net
    }

    /// The default frozen random feature extractor.
    pub fn features(seed: u64) -> Self {
        Self::init(Arch::Features, 1.0, seed)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over arch, width and parameter bytes.
    pub fn compute_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.arch.as_str().as_bytes());
        h.update(self.width_multiplier.to_le_bytes());
        let mut buf = Vec::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn refresh_id(&mut self) {
        self.checkpoint_id = self.compute_id();
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn expect_arch(&self, arch: Arch) -> Result<()> {
        if self.arch != arch {
            return Err(Error::ArchMismatch {
                expected: arch.to_string(),
                found: self.arch.to_string(),
            });
        }
        Ok(())
    }

    /// Mutable parameter access for optimizers; refused when frozen.
    pub fn params_mut(&mut self) -> Result<&mut [NamedParam<T>]> {
        if self.frozen {
            return Err(Error::Frozen(format!(
                "{} {}",
                self.arch,
                short_id(&self.checkpoint_id)
            )));
        }
        Ok(&mut self.params)
    }

    pub fn cast<U: Scalar>(&self) -> NetworkHandle<U> {
        NetworkHandle {
            arch: self.arch,
            width_multiplier: self.width_multiplier,
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            frozen: self.frozen,
            checkpoint_id: self.checkpoint_id.clone(),
            seed: self.seed,
        }
    }

    /// Loads the parameters onto a tape: trainable leaves unless frozen.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if self.frozen {
                    g.constant(p.value.clone())
                } else {
                    g.param(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Loads the parameters as constants, for inference.
    pub fn bind_constants(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.constant(p.value.clone()))
                .collect(),
        }
    }
}

pub(crate) fn short_id(id: &str) -> &str {
    &id[..id.len().min(12)]
}

/// Parameters of one network on one tape, in layout order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.at];
        self.at += 1;
        v
    }

    fn conv(&mut self, g: &mut Graph<impl Scalar>, x: Var, stride: usize) -> Var {
        let w = self.take();
        let b = self.take();
        let k = g.value(w).shape()[2];
        g.conv2d(x, w, b, stride, k / 2)
    }

    fn conv_norm(&mut self, g: &mut Graph<impl Scalar>, x: Var, stride: usize, relu: bool) -> Var {
        let y = self.conv(g, x, stride);
        let gamma = self.take();
        let beta = self.take();
        let y = g.instance_norm(y, gamma, beta);
        if relu {
            g.relu(y)
        } else {
            y
        }
    }
}

/// Stylizer trunk on a tape. `input` must have the arch's channel count and
/// spatial sides divisible by 4.
pub fn trunk_graph<T: Scalar>(
    net: &NetworkHandle<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    input: Var,
) -> Result<Var> {
    if net.arch == Arch::Features {
        return Err(Error::ArchMismatch {
            expected: "a stylizer".into(),
            found: net.arch.to_string(),
        });
    }
    let (c, h, w) = g.value(input).chw();
    if c != net.arch.in_channels() {
        return Err(Error::shape(format!(
            "{} expects {} input channels, got {c}",
            net.arch,
            net.arch.in_channels()
        )));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!(
            "trunk input {h}x{w} is not a multiple of 4"
        )));
    }
    let mut cur = Cursor {
        vars: &bound.vars,
        at: 0,
    };
    let mut x = cur.conv_norm(g, input, 1, true);
    x = cur.conv_norm(g, x, 2, true);
    x = cur.conv_norm(g, x, 2, true);
    for _ in 0..residual_blocks(net.width_multiplier) {
        let y = cur.conv_norm(g, x, 1, true);
        let y = cur.conv_norm(g, y, 1, false);
        x = g.add(x, y);
    }
    for _ in 0..2 {
        x = g.upsample2(x);
        x = cur.conv_norm(g, x, 1, true);
    }
    let y = cur.conv(g, x, 1);
    debug_assert_eq!(cur.at, bound.vars.len());
    Ok(g.sigmoid(y))
}

/// Feature maps of the requested layers, in request order.
pub fn features_graph<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    image: Var,
    layers: &[&str],
) -> Result<Vec<Var>> {
    let mut depth = 0;
    for l in layers {
        let i = FEATURE_LAYERS
            .iter()
            .position(|n| n == l)
            .ok_or_else(|| Error::UnknownLayer((*l).to_string()))?;
        depth = depth.max(i + 1);
    }
    let mut cur = Cursor {
        vars: &bound.vars,
        at: 0,
    };
    let mut maps = Vec::with_capacity(depth);
    let mut x = image;
    for i in 0..depth {
        if i > 0 {
            x = g.avg_pool2(x);
        }
        x = cur.conv(g, x, 1);
        x = g.relu(x);
        maps.push(x);
    }
    Ok(layers
        .iter()
        .map(|l| maps[FEATURE_LAYERS.iter().position(|n| n == l).unwrap()])
        .collect())
}

/// Replicates edge pixels so both sides are multiples of 4.
fn pad_to_4<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (hp, wp) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
    if (hp, wp) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn(&[c, hp, wp], |i| {
        let (ch, rem) = (i / (hp * wp), i % (hp * wp));
        let (y, xx) = ((rem / wp).min(h - 1), (rem % wp).min(w - 1));
        x.data()[(ch * h + y) * w + xx]
    })
}

fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, hp, wp) = x.chw();
    if (hp, wp) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, rem) = (i / (h * w), i % (h * w));
        x.data()[(ch * hp + rem / w) * wp + rem % w]
    })
}

fn check_frame<T: Scalar>(frame: &Tensor<T>) -> Result<()> {
    if frame.shape().len() != 3 || frame.shape()[0] != 3 {
        return Err(Error::shape(format!(
            "expected an RGB frame, got {:?}",
            frame.shape()
        )));
    }
    Ok(())
}

fn run_trunk<T: Scalar>(net: &NetworkHandle<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = input.chw();
    let mut g = Graph::new();
    let bound = net.bind_constants(&mut g);
    let x = g.constant(pad_to_4(input));
    let y = trunk_graph(net, &mut g, &bound, x)?;
    let out = crop(g.value(y), h, w);
    if !out.all_finite() {
        return Err(Error::NonFinite(format!("{} output", net.arch)));
    }
    Ok(out)
}

pub fn student_forward<T: Scalar>(net: &NetworkHandle<T>, frame: &Tensor<T>) -> Result<Tensor<T>> {
    net.expect_arch(Arch::Student)?;
    check_frame(frame)?;
    run_trunk(net, frame)
}

pub fn teacher_noflow_forward<T: Scalar>(
    net: &NetworkHandle<T>,
    frame: &Tensor<T>,
) -> Result<Tensor<T>> {
    net.expect_arch(Arch::TeacherNoflow)?;
    check_frame(frame)?;
    run_trunk(net, frame)
}

/// Frame, warped previous stylization and traceability mask stacked into the
/// 7-channel teacher input. With no previous frame the last four channels
/// are zero. Pixels whose warp sample left the frame count as untraceable.
pub fn teacher_input<T: Scalar>(
    frame: &Tensor<T>,
    prev_stylized: Option<&Tensor<T>>,
    flow: Option<&FlowField<T>>,
    mask: Option<&OcclusionMask>,
) -> Result<Tensor<T>> {
    check_frame(frame)?;
    let (_, h, w) = frame.chw();
    let Some(prev) = prev_stylized else {
        let zeros = Tensor::zeros(&[4, h, w]);
        return Tensor::concat_channels(&[frame, &zeros]);
    };
    let flow = flow.ok_or(Error::MissingFlow)?;
    let warped = warp_backward(prev, flow)?;
    let m = match mask {
        Some(m) => m.and(&warped.validity),
        None => warped.validity,
    };
    let mt = m.to_tensor::<T>(1);
    let masked = warped.image.zip_map(&m.to_tensor(3), |a, b| a * b);
    Tensor::concat_channels(&[frame, &masked, &mt])
}

pub fn teacher_forward<T: Scalar>(
    net: &NetworkHandle<T>,
    frame: &Tensor<T>,
    prev_stylized: Option<&Tensor<T>>,
    flow: Option<&FlowField<T>>,
    mask: Option<&OcclusionMask>,
) -> Result<Tensor<T>> {
    net.expect_arch(Arch::TeacherFlow)?;
    run_trunk(net, &teacher_input(frame, prev_stylized, flow, mask)?)
}

/// Recurrent teacher output over a whole clip. `flows[i]`/`masks[i]` carry
/// frame `i` onto frame `i+1`.
pub fn teacher_sequence<T: Scalar>(
    net: &NetworkHandle<T>,
    frames: &[Tensor<T>],
    flows: &[FlowField<T>],
    masks: &[OcclusionMask],
) -> Result<Vec<Tensor<T>>> {
    if flows.len() + 1 < frames.len() || masks.len() + 1 < frames.len() {
        return Err(Error::MissingFlow);
    }
    let mut out: Vec<Tensor<T>> = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        let y = if t == 0 {
            teacher_forward(net, f, None, None, None)?
        } else {
            teacher_forward(
                net,
                f,
                Some(&out[t - 1]),
                Some(&flows[t - 1]),
                Some(&masks[t - 1]),
            )?
        };
        out.push(y);
    }
    Ok(out)
}

/// Ordered feature maps returned by [`feature_extract`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<T> {
    pub maps: Vec<(String, Tensor<T>)>,
}

impl<T> FeatureStack<T> {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

pub fn feature_extract<T: Scalar>(
    net: &NetworkHandle<T>,
    image: &Tensor<T>,
    layers: &[&str],
) -> Result<FeatureStack<T>> {
    net.expect_arch(Arch::Features)?;
    if !net.frozen {
        return Err(Error::ArchMismatch {
            expected: "frozen features".into(),
            found: "trainable features".into(),
        });
    }
    let mut g = Graph::new();
    let bound = net.bind(&mut g);
    let x = g.constant(image.clone());
    let vars = features_graph(&mut g, &bound, x, layers)?;
    Ok(FeatureStack {
        maps: layers
            .iter()
            .zip(vars)
            .map(|(l, v)| ((*l).to_string(), g.value(v).clone()))
            .collect(),
    })
}
