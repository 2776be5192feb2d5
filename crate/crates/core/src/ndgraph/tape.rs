//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends a node holding its opcode, input ids, and forward
//! value. [`Tape::backward`] walks the list in reverse from a scalar loss and
//! accumulates adjoints into a dense gradient table indexed by [`NodeId`].
//!
//! `stop_gradient` values can be *pinned*: the first construction of an
//! objective records each detached forward value, and a rebuild via
//! [`Tape::with_pinned`] replays those values verbatim instead of recomputing
//! them. Finite-difference checks rely on this to probe the same function the
//! backward pass differentiates, with detached branches held constant.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Opcode of one tape node. Inputs are stored as node ids; immediates (scale
/// factors, kernel bandwidths, gather indices) live inline.
#[derive(Clone, Debug)]
enum Op {
    /// Independent input; gradients accumulate here but nothing propagates further.
    Leaf,
    /// Matrix product `A · B`.
    MatMul(NodeId, NodeId),
    /// Matrix transpose.
    Transpose(NodeId),
    /// Elementwise sum of equally shaped inputs.
    Add(NodeId, NodeId),
    /// Elementwise difference.
    Sub(NodeId, NodeId),
    /// Elementwise (Hadamard) product.
    Mul(NodeId, NodeId),
    /// Multiplication by a compile-time constant.
    Scale(NodeId, f64),
    /// Adds a `1 x c` bias row to every row of an `m x c` input.
    AddRowBroadcast(NodeId, NodeId),
    /// Elementwise `max(x, 0)`; subgradient 0 at the kink.
    Relu(NodeId),
    /// Elementwise `exp(x)`.
    Exp(NodeId),
    /// Elementwise `ln(max(x, 1e-12))`; zero gradient on the clamped branch.
    LogClamped(NodeId),
    /// Elementwise logistic squashed into `[1e-7, 1 - 1e-7]`; zero gradient
    /// where the clamp is active.
    SigmoidClamped(NodeId),
    /// Row-wise softmax with max subtraction.
    SoftmaxRows(NodeId),
    /// Reduction to the scalar sum of all entries.
    Sum(NodeId),
    /// Reduction to the scalar mean of all entries.
    Mean(NodeId),
    /// Reduction to the scalar squared Frobenius norm.
    FrobeniusSq(NodeId),
    /// Identity forward, zero backward. The forward value is pinned for
    /// replay, so the node keeps no edge back to its input.
    StopGradient,
    /// Gaussian Gram matrix between the rows of two inputs at a fixed bandwidth.
    GaussGram(NodeId, NodeId, f64),
    /// Row gather; duplicate indices scatter-add their adjoints.
    GatherRows(NodeId, Vec<usize>),
    /// Gradient reversal: identity forward, `-coeff` times the adjoint backward.
    Grl(NodeId, f64),
    /// Scalar head whose value and input gradient were computed outside the
    /// tape (used for spectral quantities like the nuclear norm).
    ExternalGrad(NodeId, Tensor),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, if any path reached it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient for `id`.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Wengert list recording a single forward construction.
pub struct Tape {
    nodes: Vec<Node>,
    /// Stop-gradient values recorded during a fresh build.
    pinned: Vec<Tensor>,
    /// Replay source and cursor when rebuilding with frozen detached values.
    replay: Option<(Vec<Tensor>, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            pinned: Vec::new(),
            replay: None,
        }
    }

    /// A tape that replays previously recorded `stop_gradient` values in
    /// construction order instead of snapshotting live inputs.
    pub fn with_pinned(pins: Vec<Tensor>) -> Self {
        Tape {
            nodes: Vec::new(),
            pinned: Vec::new(),
            replay: Some((pins, 0)),
        }
    }

    /// The `stop_gradient` values recorded by this build, in order.
    pub fn pins(&self) -> Vec<Tensor> {
        self.pinned.clone()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transposed();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, c) = self.value(a).shape();
        if self.value(bias).shape() != (1, c) {
            return Err(Error::shape(
                "add_row_broadcast",
                (m, c),
                self.value(bias).shape(),
            ));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..m {
            for k in 0..c {
                value[(r, k)] += b[k];
            }
        }
        Ok(self.push(Op::AddRowBroadcast(a, bias), value))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    /// `ln(max(x, 1e-12))`: finite for any input, flat below the floor.
    pub fn log_clamped(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(LOG_FLOOR).ln());
        self.push(Op::LogClamped(a), value)
    }

    pub fn sigmoid_clamped(&mut self, a: NodeId) -> NodeId {
        let value = self
            .value(a)
            .map(|v| (1.0 / (1.0 + (-v).exp())).clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR));
        self.push(Op::SigmoidClamped(a), value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).softmax_rows();
        self.push(Op::SoftmaxRows(a), value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), value)
    }

    pub fn frobenius_sq(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).frobenius_sq());
        self.push(Op::FrobeniusSq(a), value)
    }

    /// Identity forward, zero gradient backward. On a fresh tape the live
    /// input value is snapshotted into the pin list; on a replaying tape the
    /// next pinned value is used instead, keeping detached branches constant
    /// across finite-difference rebuilds.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        let value = match &mut self.replay {
            Some((pins, cursor)) => {
                let v = pins.get(*cursor).cloned().ok_or_else(|| {
                    Error::Contract(format!(
                        "stop_gradient replay exhausted after {} pinned values",
                        pins.len()
                    ))
                })?;
                *cursor += 1;
                v
            }
            None => {
                let v = self.value(a).clone();
                self.pinned.push(v.clone());
                v
            }
        };
        Ok(self.push(Op::StopGradient, value))
    }

    /// Gram matrix of Gaussian kernel evaluations between rows of `a` and `b`.
    pub fn gauss_gram(&mut self, a: NodeId, b: NodeId, sigma: f64) -> Result<NodeId> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Numeric(format!(
                "gauss_gram bandwidth must be positive and finite, got {sigma}"
            )));
        }
        let value = self.value(a).gauss_gram(self.value(b), sigma)?;
        Ok(self.push(Op::GaussGram(a, b, sigma), value))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let value = self.value(a).gather_rows(indices)?;
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), value))
    }

    /// Gradient reversal layer: identity forward, adjoint times `-coeff` backward.
    pub fn grl(&mut self, a: NodeId, coeff: f64) -> NodeId {
        let value = self.value(a).clone();
        self.push(Op::Grl(a, coeff), value)
    }

    /// Attaches a scalar computed outside the tape, together with its exact
    /// gradient with respect to `input`'s value. Backward contributes
    /// `adjoint * grad` to the input.
    pub fn scalar_with_grad(&mut self, input: NodeId, value: f64, grad: Tensor) -> Result<NodeId> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::shape(
                "scalar_with_grad",
                self.value(input).shape(),
                grad.shape(),
            ));
        }
        Ok(self.push(Op::ExternalGrad(input, grad), Tensor::scalar(value)))
    }

    /// Reverse pass from a scalar loss node. Returns one optional gradient per
    /// node; nodes unreachable from the loss stay `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {}x{}",
                loss_value.rows(),
                loss_value.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf | Op::StopGradient => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transposed())?;
                    let db = self.value(*a).transposed().matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transposed()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::AddRowBroadcast(a, bias) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *bias, g.col_sums());
                }
                Op::Relu(a) => {
                    let mask = self.value(*a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, g.mul(&mask)?);
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, g.mul(&self.nodes[i].value)?);
                }
                Op::LogClamped(a) => {
                    let d = self
                        .value(*a)
                        .map(|v| if v > LOG_FLOOR { 1.0 / v } else { 0.0 });
                    accumulate(&mut grads, *a, g.mul(&d)?);
                }
                Op::SigmoidClamped(a) => {
                    // Derivative via the already clamped output: zero exactly
                    // where the clamp saturates.
                    let s = &self.nodes[i].value;
                    let d = s.map(|v| {
                        if v <= SIGMOID_FLOOR || v >= 1.0 - SIGMOID_FLOOR {
                            0.0
                        } else {
                            v * (1.0 - v)
                        }
                    });
                    accumulate(&mut grads, *a, g.mul(&d)?);
                }
                Op::SoftmaxRows(a) => {
                    let p = &self.nodes[i].value;
                    let mut da = Tensor::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let dot: f64 = p
                            .row(r)
                            .iter()
                            .zip(g.row(r).iter())
                            .map(|(&pv, &gv)| pv * gv)
                            .sum();
                        for c in 0..p.cols() {
                            da[(r, c)] = p[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let s = g.scalar_value()?;
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::filled(r, c, s));
                }
                Op::Mean(a) => {
                    let s = g.scalar_value()?;
                    let (r, c) = self.value(*a).shape();
                    let n = (r * c) as f64;
                    accumulate(&mut grads, *a, Tensor::filled(r, c, s / n));
                }
                Op::FrobeniusSq(a) => {
                    let s = g.scalar_value()?;
                    accumulate(&mut grads, *a, self.value(*a).scale(2.0 * s));
                }
                Op::GaussGram(a, b, sigma) => {
                    let x = self.value(*a);
                    let y = self.value(*b);
                    let k = &self.nodes[i].value;
                    let inv_s2 = 1.0 / (sigma * sigma);
                    let mut dx = Tensor::zeros(x.rows(), x.cols());
                    let mut dy = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..x.rows() {
                        for q in 0..y.rows() {
                            let w = g[(r, q)] * k[(r, q)] * inv_s2;
                            if w == 0.0 {
                                continue;
                            }
                            for d in 0..x.cols() {
                                let diff = y[(q, d)] - x[(r, d)];
                                dx[(r, d)] += w * diff;
                                dy[(q, d)] -= w * diff;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                    accumulate(&mut grads, *b, dy);
                }
                Op::GatherRows(a, indices) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut da = Tensor::zeros(rows, cols);
                    for (out_r, &src_r) in indices.iter().enumerate() {
                        for c in 0..cols {
                            da[(src_r, c)] += g[(out_r, c)];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Grl(a, coeff) => accumulate(&mut grads, *a, g.scale(-coeff)),
                Op::ExternalGrad(a, grad) => {
                    let s = g.scalar_value()?;
                    accumulate(&mut grads, *a, grad.scale(s));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Floor used by `log_clamped`.
pub const LOG_FLOOR: f64 = 1e-12;
/// Saturation margin used by `sigmoid_clamped`.
pub const SIGMOID_FLOOR: f64 = 1e-7;

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
