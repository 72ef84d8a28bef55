//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] owns every value computed during one forward pass. Operations
//! are appended in execution order, so node ids are already a topological
//! order and [`Tape::backward`] is a single reverse sweep. The tape is never
//! consumed by a backward pass: several roots can be differentiated against
//! the same recording, which the gradient-balanced task weighting relies on.
//!
//! ```
//! use menet::autograd::{Reduction, Tape};
//! use menet::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
//! let y = tape.reduce(x, Reduction::FrobeniusSq).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.value(y).item(), 25.0);
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0, 8.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// `[N, C, H, W] -> [N, C, 1, 1]`
    GlobalAvgPool,
    /// `Σ x²`
    FrobeniusSq,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        lhs: Var,
        rhs: Var,
    },
    WithScalar {
        kind: BinaryKind,
        x: Var,
        c: f64,
    },
    Activation {
        kind: Activation,
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        pad: usize,
    },
    Desubpixel {
        x: Var,
        r: usize,
    },
    Subpixel {
        x: Var,
        r: usize,
    },
    Reduce {
        kind: Reduction,
        x: Var,
    },
    Matmul {
        lhs: Var,
        rhs: Var,
    },
    Transpose {
        x: Var,
    },
    ScaleChannels {
        x: Var,
        mask: Var,
    },
    PatchUnroll {
        x: Var,
        k: usize,
    },
    Select {
        x: Var,
        index: usize,
    },
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 3] {
        match *self {
            Op::Leaf => [None, None, None],
            Op::Binary { lhs, rhs, .. } | Op::Matmul { lhs, rhs } => [Some(lhs), Some(rhs), None],
            Op::ScaleChannels { x, mask } => [Some(x), Some(mask), None],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => [Some(input), Some(kernel), bias],
            Op::WithScalar { x, .. }
            | Op::Activation { x, .. }
            | Op::Clamp { x, .. }
            | Op::Desubpixel { x, .. }
            | Op::Subpixel { x, .. }
            | Op::Reduce { x, .. }
            | Op::Transpose { x }
            | Op::PatchUnroll { x, .. }
            | Op::Select { x, .. } => [Some(x), None, None],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { .. } | Op::WithScalar { .. } => "elementwise",
            Op::Activation { .. } => "activation",
            Op::Clamp { .. } => "clamp",
            Op::Conv2d { .. } => "conv2d",
            Op::Desubpixel { .. } => "desubpixel",
            Op::Subpixel { .. } => "subpixel",
            Op::Reduce { .. } => "reduce",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::PatchUnroll { .. } => "patch_unroll",
            Op::Select { .. } => "select",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    /// Some requires-grad leaf is reachable from this node.
    tracked: bool,
    finite: bool,
}

/// Recording of one forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let finite = !cfg!(debug_assertions) || value.is_finite();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn check(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownVar(v.0))
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        let tracked = inputs.iter().flatten().any(|v| self.nodes[v.0].tracked);
        let inputs_finite = inputs.iter().flatten().all(|v| self.nodes[v.0].finite);
        let finite = if cfg!(debug_assertions) {
            let finite = value.is_finite();
            if inputs_finite && !finite {
                return Err(Error::NonFinite { op: op.name() });
            }
            finite
        } else {
            true
        };
        self.nodes.push(Node {
            value,
            op,
            tracked,
            finite,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Pointwise `a ∘ b` for equal shapes, or with one side a one-element tensor.
    pub fn elementwise(&mut self, lhs: Var, rhs: Var, kind: BinaryKind) -> Result<Var> {
        let (a, b) = (self.check(lhs)?, self.check(rhs)?);
        let value = binary_forward(a, b, kind)?;
        self.push(value, Op::Binary { kind, lhs, rhs })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Div)
    }

    /// Pointwise `x ∘ c` for a constant `c`.
    pub fn elementwise_scalar(&mut self, x: Var, c: f64, kind: BinaryKind) -> Result<Var> {
        let cv = T::of(c);
        if kind == BinaryKind::Div && cfg!(debug_assertions) && c == 0.0 {
            return Err(Error::ZeroDivisor {
                op: "elementwise",
                index: 0,
            });
        }
        let value = self.check(x)?.map(|v| apply(kind, v, cv));
        self.push(value, Op::WithScalar { kind, x, c })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.elementwise_scalar(x, c, BinaryKind::Mul)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let value = match kind {
            Activation::Relu => self.check(x)?.map(|v| v.max(T::zero())),
            Activation::Sigmoid => self.check(x)?.map(sigmoid),
        };
        self.push(value, Op::Activation { kind, x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Clamp to `[lo, hi]`; the gradient passes where the input lies inside the closed range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (T::of(lo), T::of(hi));
        let value = self.check(x)?.map(|v| v.max(l).min(h));
        self.push(value, Op::Clamp { x, lo, hi })
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        pad: usize,
    ) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let value = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            pad,
        )?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                pad,
            },
        )
    }

    pub fn desubpixel(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = kernels::desubpixel(self.check(x)?, r)?;
        self.push(value, Op::Desubpixel { x, r })
    }

    pub fn subpixel(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = kernels::subpixel(self.check(x)?, r)?;
        self.push(value, Op::Subpixel { x, r })
    }

    pub fn reduce(&mut self, x: Var, kind: Reduction) -> Result<Var> {
        let t = self.check(x)?;
        let value = match kind {
            Reduction::Sum => Tensor::scalar(sum(t.data())),
            Reduction::Mean => Tensor::scalar(sum(t.data()) / T::of(t.numel() as f64)),
            Reduction::FrobeniusSq => {
                Tensor::scalar(t.data().iter().fold(T::zero(), |acc, &v| acc + v * v))
            }
            Reduction::GlobalAvgPool => {
                let (n, c, h, w) = t.dims4("global_avg_pool")?;
                let count = T::of((h * w) as f64);
                let means = t
                    .data()
                    .chunks(h * w)
                    .map(|plane| sum(plane) / count)
                    .collect();
                Tensor::from_vec(&[n, c, 1, 1], means)?
            }
        };
        self.push(value, Op::Reduce { kind, x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::Mean)
    }

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.check(lhs)?, self.check(rhs)?);
        let (m, k, n) = match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let value = Tensor::from_vec(&[m, n], out)?;
        self.push(value, Op::Matmul { lhs, rhs })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = transpose2(self.check(x)?)?;
        self.push(value, Op::Transpose { x })
    }

    /// `x[n, c, :, :] * mask[n, c]` for `x: [N, C, H, W]` and `mask: [N, C, 1, 1]`.
    pub fn scale_channels(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (t, m) = (self.check(x)?, self.check(mask)?);
        let (n, c, h, w) = t.dims4("scale_channels")?;
        if m.shape() != [n, c, 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                lhs: t.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        let mut out = t.data().to_vec();
        for (plane, &s) in out.chunks_mut(h * w).zip(m.data()) {
            plane.iter_mut().for_each(|v| *v = *v * s);
        }
        let value = Tensor::from_vec(t.shape(), out)?;
        self.push(value, Op::ScaleChannels { x, mask })
    }

    /// Non-overlapping `k×k` patch unroll `[N, C, H, W] -> [N, C·k², H·W/k²]`.
    pub fn patch_unroll(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = kernels::patch_unroll(self.check(x)?, k)?;
        self.push(value, Op::PatchUnroll { x, k })
    }

    /// `x[index]` along the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.check(x)?;
        let shape = t.shape();
        if shape.len() < 2 || index >= shape[0] {
            return Err(Error::InvalidShape {
                op: "select",
                shape: shape.to_vec(),
                reason: format!("cannot select item {index} along the leading axis"),
            });
        }
        let len = t.numel() / shape[0];
        let value = Tensor::from_vec(
            &shape[1..],
            t.data()[index * len..(index + 1) * len].to_vec(),
        )?;
        self.push(value, Op::Select { x, index })
    }

    /// Gradients of a scalar `root` with respect to every tracked leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let relevant: Vec<bool> = self.nodes.iter().map(|n| n.tracked).collect();
        self.sweep(root, relevant)
    }

    /// Like [`Tape::backward`] but only propagates along paths that reach `targets`.
    pub fn backward_wrt(&self, root: Var, targets: &[Var]) -> Result<Gradients<T>> {
        let mut relevant = vec![false; self.nodes.len()];
        for t in targets {
            self.check(*t)?;
            relevant[t.0] = self.nodes[t.0].tracked;
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.op.inputs().iter().flatten().any(|v| relevant[v.0]) {
                relevant[id] = true;
            }
        }
        self.sweep(root, relevant)
    }

    fn sweep(&self, root: Var, relevant: Vec<bool>) -> Result<Gradients<T>> {
        let root_value = self.check(root)?;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !self.nodes[root.0].tracked {
            return Err(Error::DetachedRoot);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !relevant[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let wants = |v: Var| relevant[v.0];
            for (input, contribution) in self.local_grads(node, &g, &wants)? {
                accumulate(&mut grads[input.0], contribution);
            }
        }
        // intermediate gradients were consumed by the sweep; only leaves remain
        Ok(Gradients { grads })
    }

    fn local_grads(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        wants: &dyn Fn(Var) -> bool,
    ) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::with_capacity(3);
        match node.op {
            Op::Leaf => {}
            Op::Binary { kind, lhs, rhs } => {
                let (a, b) = (self.value(lhs), self.value(rhs));
                if wants(lhs) {
                    out.push((lhs, binary_partial(a, b, g, kind, true)));
                }
                if wants(rhs) {
                    out.push((rhs, binary_partial(a, b, g, kind, false)));
                }
            }
            Op::WithScalar { kind, x, c } => {
                let cv = T::of(c);
                let d = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.clone(),
                    BinaryKind::Mul => g.map(|v| v * cv),
                    BinaryKind::Div => g.map(|v| v / cv),
                };
                out.push((x, d));
            }
            Op::Activation { kind, x } => {
                let d = match kind {
                    Activation::Relu => {
                        g.zip_map(
                            self.value(x),
                            |gv, xv| {
                                if xv > T::zero() {
                                    gv
                                } else {
                                    T::zero()
                                }
                            },
                        )?
                    }
                    Activation::Sigmoid => {
                        g.zip_map(&node.value, |gv, s| gv * s * (T::one() - s))?
                    }
                };
                out.push((x, d));
            }
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (T::of(lo), T::of(hi));
                let d = g.zip_map(self.value(x), |gv, xv| {
                    if xv >= l && xv <= h {
                        gv
                    } else {
                        T::zero()
                    }
                })?;
                out.push((x, d));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                pad,
            } => {
                let need = (wants(input), wants(kernel), bias.is_some_and(wants));
                let cg =
                    kernels::conv2d_backward(self.value(input), self.value(kernel), g, pad, need)?;
                if let Some(d) = cg.input {
                    out.push((input, d));
                }
                if let Some(d) = cg.kernel {
                    out.push((kernel, d));
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    out.push((b, d));
                }
            }
            Op::Desubpixel { x, r } => out.push((x, kernels::subpixel(g, r)?)),
            Op::Subpixel { x, r } => out.push((x, kernels::desubpixel(g, r)?)),
            Op::Reduce { kind, x } => {
                let t = self.value(x);
                let d = match kind {
                    Reduction::Sum => Tensor::full(t.shape(), g.item()),
                    Reduction::Mean => Tensor::full(t.shape(), g.item() / T::of(t.numel() as f64)),
                    Reduction::FrobeniusSq => {
                        let two_g = T::of(2.0) * g.item();
                        t.map(|v| two_g * v)
                    }
                    Reduction::GlobalAvgPool => {
                        let (_, _, h, w) = t.dims4("global_avg_pool")?;
                        let count = T::of((h * w) as f64);
                        let mut d = Vec::with_capacity(t.numel());
                        for &gv in g.data() {
                            d.extend(std::iter::repeat_n(gv / count, h * w));
                        }
                        Tensor::from_vec(t.shape(), d)?
                    }
                };
                out.push((x, d));
            }
            Op::Matmul { lhs, rhs } => {
                let (a, b) = (self.value(lhs), self.value(rhs));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if wants(lhs) {
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, b.data(), true, &mut d, false);
                    out.push((lhs, Tensor::from_vec(a.shape(), d)?));
                }
                if wants(rhs) {
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, a.data(), true, g.data(), false, &mut d, false);
                    out.push((rhs, Tensor::from_vec(b.shape(), d)?));
                }
            }
            Op::Transpose { x } => out.push((x, transpose2(g)?)),
            Op::ScaleChannels { x, mask } => {
                let (t, m) = (self.value(x), self.value(mask));
                let plane = t.shape()[2] * t.shape()[3];
                if wants(x) {
                    let mut d = g.data().to_vec();
                    for (p, &s) in d.chunks_mut(plane).zip(m.data()) {
                        p.iter_mut().for_each(|v| *v = *v * s);
                    }
                    out.push((x, Tensor::from_vec(t.shape(), d)?));
                }
                if wants(mask) {
                    let d = g
                        .data()
                        .chunks(plane)
                        .zip(t.data().chunks(plane))
                        .map(|(gp, xp)| {
                            gp.iter()
                                .zip(xp)
                                .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                        })
                        .collect();
                    out.push((mask, Tensor::from_vec(m.shape(), d)?));
                }
            }
            Op::PatchUnroll { x, k } => {
                out.push((x, kernels::patch_fold(g, self.value(x).shape(), k)?));
            }
            Op::Select { x, index } => {
                let t = self.value(x);
                let mut d = Tensor::zeros(t.shape());
                let len = g.numel();
                d.data_mut()[index * len..(index + 1) * len].copy_from_slice(g.data());
                out.push((x, d));
            }
        }
        Ok(out)
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e = *e + *c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn sum<T: Scalar>(values: &[T]) -> T {
    values.iter().fold(T::zero(), |acc, &v| acc + v)
}

#[inline]
fn apply<T: Scalar>(kind: BinaryKind, a: T, b: T) -> T {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
    }
}

fn broadcast_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op: "elementwise",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

#[inline]
fn at<T: Scalar>(t: &Tensor<T>, i: usize) -> T {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn binary_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
    let shape = broadcast_shape(a, b)?;
    let len: usize = shape.iter().product();
    if kind == BinaryKind::Div && cfg!(debug_assertions) {
        if let Some(index) = b.data().iter().position(|v| *v == T::zero()) {
            return Err(Error::ZeroDivisor {
                op: "elementwise",
                index,
            });
        }
    }
    Tensor::from_vec(
        &shape,
        (0..len).map(|i| apply(kind, at(a, i), at(b, i))).collect(),
    )
}

fn binary_partial<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    kind: BinaryKind,
    for_lhs: bool,
) -> Tensor<T> {
    let d = |i: usize| {
        let gv = g.data()[i];
        match (kind, for_lhs) {
            (BinaryKind::Add, _) => gv,
            (BinaryKind::Sub, true) => gv,
            (BinaryKind::Sub, false) => -gv,
            (BinaryKind::Mul, true) => gv * at(b, i),
            (BinaryKind::Mul, false) => gv * at(a, i),
            (BinaryKind::Div, true) => gv / at(b, i),
            (BinaryKind::Div, false) => {
                let bv = at(b, i);
                -gv * at(a, i) / (bv * bv)
            }
        }
    };
    let target = if for_lhs { a } else { b };
    if target.numel() == 1 && g.numel() != 1 {
        Tensor::full(
            target.shape(),
            (0..g.numel()).fold(T::zero(), |acc, i| acc + d(i)),
        )
    } else {
        Tensor::from_vec(target.shape(), (0..g.numel()).map(d).collect())
            .expect("partial matches operand shape")
    }
}

fn transpose2<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = match *t.shape() {
        [r, c] => (r, c),
        _ => {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: t.shape().to_vec(),
                reason: "expected a matrix".into(),
            })
        }
    };
    let src = t.data();
    let mut out = Vec::with_capacity(t.numel());
    for j in 0..c {
        out.extend((0..r).map(|i| src[i * c + j]));
    }
    Tensor::from_vec(&[c, r], out)
}
