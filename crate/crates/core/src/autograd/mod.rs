//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar node returns the gradient of that scalar
//! with respect to every node that transitively depends on a parameter leaf.
//! Constants never receive gradient.

pub mod kernels;

use crate::flowops::sample;
use crate::linalg::singular_values_via_gram;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernels::ConvGeometry;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        cols: Vec<T>,
        geom: ConvGeometry,
    },
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    Upsample2(Var),
    AvgPool2(Var),
    Warp {
        src: Var,
        flow: Var,
    },
    MeanSquare(Var),
    Gram(Var),
    TotalVariation(Var),
    Nuclear {
        rows: Vec<Var>,
        /// Row-major `K×K`, eigenvectors in columns.
        basis: Vec<T>,
        sigma: Vec<T>,
    },
    SquaredGap(Var, T),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Singular values below this fraction of the largest are treated as zero in
/// the nuclear-norm subgradient.
const NUCLEAR_SUBGRAD_CUTOFF: f64 = 1e-10;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (out, cols, geom) = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
        );
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        // The unfolded input is only needed to form weight gradients.
        let cols = if self.ng(weight) { cols } else { Vec::new() };
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                geom,
            },
            ng,
        )
    }

    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Var {
        let (out, xhat, inv_std) =
            kernels::instance_norm_forward(self.value(input), self.value(gamma), self.value(beta));
        let ng = self.ng(input) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scale(c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Var {
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        let ng = self.ng(x);
        self.push(out, Op::MulConst(x, c), ng)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = kernels::upsample2(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::Upsample2(x), ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = kernels::avg_pool2(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::AvgPool2(x), ng)
    }

    /// Bilinear backward warp of `src` by the `[2,H,W]` displacement `flow`;
    /// out-of-frame samples are zero.
    pub fn warp(&mut self, src: Var, flow: Var) -> Var {
        let (out, _) = sample::sample(self.value(src), self.value(flow));
        let ng = self.ng(src) || self.ng(flow);
        self.push(out, Op::Warp { src, flow }, ng)
    }

    /// `mean(x²)` over all elements.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.sum_sq() / T::from_usize(t.len()).unwrap();
        let ng = self.ng(x);
        self.push(Tensor::full(&[1], out), Op::MeanSquare(x), ng)
    }

    /// `F·Fᵀ / (C·H·W)` with `F` the `C×(H·W)` unfolding of `x`.
    pub fn gram(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let p = h * w;
        let mut g = vec![T::zero(); c * c];
        T::gemm(
            c,
            p,
            c,
            T::one() / T::from_usize(c * p).unwrap(),
            t.data(),
            p as isize,
            1,
            t.data(),
            1,
            p as isize,
            T::zero(),
            &mut g,
            c as isize,
            1,
        );
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c, c], g).unwrap(), Op::Gram(x), ng)
    }

    /// Mean squared horizontal neighbor difference plus mean squared vertical
    /// neighbor difference.
    pub fn total_variation(&mut self, x: Var) -> Var {
        let out = tv_value(self.value(x));
        let ng = self.ng(x);
        self.push(Tensor::full(&[1], out), Op::TotalVariation(x), ng)
    }

    /// Nuclear norm of the matrix whose rows are the flattened `rows`,
    /// computed from the eigenvalues of its Gram matrix.
    pub fn nuclear_norm(&mut self, rows: &[Var]) -> Var {
        let k = rows.len();
        let l = self.value(rows[0]).len();
        let mut x = Vec::with_capacity(k * l);
        for r in rows {
            assert_eq!(self.value(*r).len(), l, "rank-matrix rows differ in length");
            x.extend_from_slice(self.value(*r).data());
        }
        let e = singular_values_via_gram(&x, k, l);
        let total: T = e.values.iter().copied().sum();
        let ng = rows.iter().any(|r| self.ng(*r));
        self.push(
            Tensor::full(&[1], total),
            Op::Nuclear {
                rows: rows.to_vec(),
                basis: e.vectors,
                sigma: e.values,
            },
            ng,
        )
    }

    /// `(target - x)²` for a scalar node `x` and constant `target`.
    pub fn squared_gap(&mut self, x: Var, target: T) -> Var {
        let d = target - self.scalar(x);
        let ng = self.ng(x);
        self.push(Tensor::full(&[1], d * d), Op::SquaredGap(x, target), ng)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes, summed in the given order.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc = T::zero();
        for &(v, w) in terms {
            acc += w * self.scalar(v);
        }
        let ng = terms.iter().any(|(v, _)| self.ng(*v));
        self.push(Tensor::full(&[1], acc), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&[1], T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                geom,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    g,
                    self.value(*weight),
                    self.value(*input),
                    cols,
                    geom,
                    self.ng(*weight),
                    self.ng(*input),
                );
                if let Some(dx) = dx {
                    acc(*input, dx);
                }
                if let Some(dw) = dw {
                    acc(*weight, dw);
                }
                if self.ng(*bias) {
                    acc(*bias, db);
                }
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) =
                    kernels::instance_norm_backward(g, xhat, inv_std, self.value(*gamma));
                if self.ng(*input) {
                    acc(*input, dx);
                }
                if self.ng(*gamma) {
                    acc(*gamma, dg);
                }
                if self.ng(*beta) {
                    acc(*beta, db);
                }
            }
            Op::Relu(x) => {
                let dx = g.zip_map(
                    self.value(*x),
                    |gv, xv| if xv > T::zero() { gv } else { T::zero() },
                );
                acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y));
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.clone());
                }
                if self.ng(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.clone());
                }
                if self.ng(*b) {
                    acc(*b, g.scale(-T::one()));
                }
            }
            Op::Scale(x, c) => acc(*x, g.scale(*c)),
            Op::MulConst(x, c) => acc(*x, g.zip_map(c, |a, b| a * b)),
            Op::Upsample2(x) => acc(*x, kernels::upsample2_backward(g)),
            Op::AvgPool2(x) => {
                let (_, h, w) = self.value(*x).chw();
                acc(*x, kernels::avg_pool2_backward(g, h, w));
            }
            Op::Warp { src, flow } => {
                if self.ng(*src) {
                    acc(*src, sample::sample_vjp_src(g, self.value(*flow)));
                }
                if self.ng(*flow) {
                    acc(
                        *flow,
                        sample::sample_vjp_flow(g, self.value(*src), self.value(*flow)),
                    );
                }
            }
            Op::MeanSquare(x) => {
                let t = self.value(*x);
                let k = g.data()[0] * T::lit(2.0) / T::from_usize(t.len()).unwrap();
                acc(*x, t.scale(k));
            }
            Op::Gram(x) => {
                let t = self.value(*x);
                let (c, h, w) = t.chw();
                let p = h * w;
                let gd = g.data();
                // dF = (dG + dGᵀ)·F / (C·H·W)
                let mut sym = vec![T::zero(); c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = gd[i * c + j] + gd[j * c + i];
                    }
                }
                let mut df = vec![T::zero(); c * p];
                T::gemm(
                    c,
                    c,
                    p,
                    T::one() / T::from_usize(c * p).unwrap(),
                    &sym,
                    c as isize,
                    1,
                    t.data(),
                    p as isize,
                    1,
                    T::zero(),
                    &mut df,
                    p as isize,
                    1,
                );
                acc(*x, Tensor::from_vec(&[c, h, w], df).unwrap());
            }
            Op::TotalVariation(x) => acc(*x, tv_grad(self.value(*x)).scale(g.data()[0])),
            Op::Nuclear { rows, basis, sigma } => {
                // d‖X‖_* / dX = U·Σ⁻¹·Uᵀ·X over the non-degenerate spectrum.
                let k = rows.len();
                let cutoff = sigma[0] * T::lit(NUCLEAR_SUBGRAD_CUTOFF);
                let mut p = vec![T::zero(); k * k];
                for (j, &s) in sigma.iter().enumerate() {
                    if s <= cutoff || s.is_zero() {
                        continue;
                    }
                    let inv = g.data()[0] / s;
                    for a in 0..k {
                        for b in 0..k {
                            p[a * k + b] += basis[a * k + j] * basis[b * k + j] * inv;
                        }
                    }
                }
                for (a, ra) in rows.iter().enumerate() {
                    if !self.ng(*ra) {
                        continue;
                    }
                    let shape = self.value(*ra).shape().to_vec();
                    let mut d = Tensor::zeros(&shape);
                    for (b, rb) in rows.iter().enumerate() {
                        let coef = p[a * k + b];
                        if coef.is_zero() {
                            continue;
                        }
                        for (o, &xv) in d.data_mut().iter_mut().zip(self.value(*rb).data()) {
                            *o += coef * xv;
                        }
                    }
                    acc(*ra, d);
                }
            }
            Op::SquaredGap(x, target) => {
                let d = *target - self.scalar(*x);
                acc(*x, Tensor::full(&[1], -T::lit(2.0) * d * g.data()[0]));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.ng(v) {
                        acc(v, Tensor::full(&[1], w * g.data()[0]));
                    }
                }
            }
        }
    }
}

pub(crate) fn tv_value<T: Scalar>(t: &Tensor<T>) -> T {
    let (c, h, w) = t.chw();
    let d = t.data();
    let mut sh = T::zero();
    let mut sv = T::zero();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = ch * h * w + y * w + x;
                if x + 1 < w {
                    let e = d[i + 1] - d[i];
                    sh += e * e;
                }
                if y + 1 < h {
                    let e = d[i + w] - d[i];
                    sv += e * e;
                }
            }
        }
    }
    let nh = T::from_usize(c * h * (w.max(1) - 1)).unwrap();
    let nv = T::from_usize(c * (h.max(1) - 1) * w).unwrap();
    let mut out = T::zero();
    if nh > T::zero() {
        out += sh / nh;
    }
    if nv > T::zero() {
        out += sv / nv;
    }
    out
}

fn tv_grad<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = t.chw();
    let d = t.data();
    let nh = T::from_usize(c * h * (w.max(1) - 1)).unwrap();
    let nv = T::from_usize(c * (h.max(1) - 1) * w).unwrap();
    let two = T::lit(2.0);
    let mut out = Tensor::zeros(&[c, h, w]);
    let o = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = ch * h * w + y * w + x;
                if x + 1 < w {
                    let e = two * (d[i + 1] - d[i]) / nh;
                    o[i + 1] += e;
                    o[i] -= e;
                }
                if y + 1 < h {
                    let e = two * (d[i + w] - d[i]) / nv;
                    o[i + w] += e;
                    o[i] -= e;
                }
            }
        }
    }
    out
}

/// Per-node gradients from [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}
