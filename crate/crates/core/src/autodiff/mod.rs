//! Minimal dense-tensor library with tape-based reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] replays the
//! record in reverse, applying each primitive's backward rule exactly once
//! and accumulating gradients additively. The primitive set covers exactly
//! what the forecaster needs: matrix products, affine layers, scaled
//! dot-product attention pieces (batched matmul, permute, softmax), layer
//! normalization, dropout, elementwise activations and a masked RMSE loss.
//!
//! Tapes are single-use: `backward` consumes the tape.

mod gradcheck;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, run_primitive_suite, CheckEntry, CheckReport};
pub use tensor::{Dtype, Element, Tensor};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use kernels::{mm_acc, mm_at_acc, mm_bt_acc};

/// Constant under the square root of the RMSE loss so the gradient is
/// defined at zero error.
pub const RMSE_LOSS_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("element count mismatch: expected {expected}, got {actual}")]
    ElementCountMismatch { expected: usize, actual: usize },
    #[error("{0}: non-finite input")]
    NonFiniteInput(&'static str),
    #[error("mask selects no elements")]
    EmptyMask,
    #[error("backward target is not scalar, shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss tensor is not recorded on this tape")]
    DetachedLoss,
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

/// Handle to a tensor recorded on a tape. Cheap to copy; only valid with
/// the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<F> {
    Leaf,
    Matmul { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    Affine { x: usize, w: usize, b: usize },
    Add { a: usize, b: usize },
    Scale { x: usize, c: F },
    Relu { x: usize },
    Tanh { x: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Arc<Vec<F>>, inv_std: Vec<F> },
    Dropout { x: usize, mask: Option<Arc<Vec<F>>> },
    RmseLoss { pred: usize, target: usize, mask: Arc<Vec<bool>>, n_valid: usize },
    SumAll { x: usize },
    #[cfg(test)]
    BrokenScale { x: usize, c: F },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Ordered record of executed primitives. Execution order is topological
/// order; backward walks it once in reverse.
pub struct Tape<F: Element> {
    id: u64,
    nodes: Vec<Node<F>>,
}

/// Gradient map produced by [`Tape::backward`]. `get` returns `None` for
/// tensors that do not require gradients or through which no path to the
/// loss exists (a zero gradient).
pub struct Gradients<F: Element> {
    tape_id: u64,
    grads: Vec<Option<Tensor<F>>>,
    rule_applications: usize,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        assert_eq!(v.tape, self.tape_id, "Var belongs to a different tape");
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Number of backward rules applied during the sweep. Each non-leaf
    /// node on the loss path contributes exactly one.
    pub fn rule_applications(&self) -> usize {
        self.rule_applications
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// out[j] += data[permuted index j]; callers pass a zeroed buffer to copy.
fn permute_into<F: Element>(data: &[F], shape: &[usize], perm: &[usize], out: &mut [F]) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    debug_assert_eq!(out.len(), data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for slot in out.iter_mut() {
        *slot += data[off];
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off += mapped[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off -= mapped[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a recorded tensor.
    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[self.check(v)].value
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "Var belongs to a different tape");
        v.index
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    /// Registers an input tensor. Gradients are produced for it iff
    /// `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Registers a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    /// `a [.., m, k] x b [k, n] -> [.., m, n]`; leading dimensions of `a`
    /// broadcast over a shared `b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ai, bi) = (self.check(a), self.check(b));
        let (ash, bsh) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{ash:?} x {bsh:?}"),
            });
        }
        let rank = ash.len();
        let (m, k, n) = (ash[rank - 2], ash[rank - 1], bsh[1]);
        let batch: usize = ash[..rank - 2].iter().product();
        let mut out_shape = ash.to_vec();
        out_shape[rank - 1] = n;
        let mut out = vec![F::zero(); batch * m * n];
        {
            let ad = self.nodes[ai].value.data();
            let bd = self.nodes[bi].value.data();
            for bi_ in 0..batch {
                mm_acc(&ad[bi_ * m * k..(bi_ + 1) * m * k], bd, m, k, n, &mut out[bi_ * m * n..(bi_ + 1) * m * n]);
            }
        }
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(Tensor::from_vec(&out_shape, out), Op::Matmul { a: ai, b: bi }, needs))
    }

    /// Batched matrix product: `a [B.., m, k] x b [B.., k, n] -> [B.., m, n]`
    /// with identical leading dimensions.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ai, bi) = (self.check(a), self.check(b));
        let (ash, bsh) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        let rank = ash.len();
        if rank < 2
            || bsh.len() != rank
            || ash[..rank - 2] != bsh[..rank - 2]
            || ash[rank - 1] != bsh[rank - 2]
        {
            return Err(AutodiffError::ShapeMismatch {
                op: "bmm",
                detail: format!("{ash:?} x {bsh:?}"),
            });
        }
        let (m, k, n) = (ash[rank - 2], ash[rank - 1], bsh[rank - 1]);
        let batch: usize = ash[..rank - 2].iter().product();
        let mut out_shape = ash.to_vec();
        out_shape[rank - 1] = n;
        let mut out = vec![F::zero(); batch * m * n];
        {
            let ad = self.nodes[ai].value.data();
            let bd = self.nodes[bi].value.data();
            for i in 0..batch {
                mm_acc(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(Tensor::from_vec(&out_shape, out), Op::Bmm { a: ai, b: bi }, needs))
    }

    /// `x [.., d_in] * w [d_in, d_out] + b [d_out]` with the bias broadcast
    /// over every leading position.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xi, wi, bi) = (self.check(x), self.check(w), self.check(b));
        let xsh = self.nodes[xi].value.shape();
        let wsh = self.nodes[wi].value.shape();
        let bsh = self.nodes[bi].value.shape();
        let d_in = *xsh.last().unwrap();
        if wsh.len() != 2 || wsh[0] != d_in || bsh.len() != 1 || bsh[0] != wsh[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "affine",
                detail: format!("x {xsh:?}, w {wsh:?}, b {bsh:?}"),
            });
        }
        let d_out = wsh[1];
        let rows = self.nodes[xi].value.len() / d_in;
        let mut out_shape = xsh.to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let mut out = vec![F::zero(); rows * d_out];
        {
            let bd = self.nodes[bi].value.data();
            for r in 0..rows {
                out[r * d_out..(r + 1) * d_out].copy_from_slice(bd);
            }
            let xd = self.nodes[xi].value.data();
            let wd = self.nodes[wi].value.data();
            mm_acc(xd, wd, rows, d_in, d_out, &mut out);
        }
        let needs = self.needs(xi) || self.needs(wi) || self.needs(bi);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out),
            Op::Affine { x: xi, w: wi, b: bi },
            needs,
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ai, bi) = (self.check(a), self.check(b));
        if self.nodes[ai].value.shape() != self.nodes[bi].value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                detail: format!(
                    "{:?} + {:?}",
                    self.nodes[ai].value.shape(),
                    self.nodes[bi].value.shape()
                ),
            });
        }
        let out: Vec<F> = self.nodes[ai]
            .value
            .iter()
            .zip(self.nodes[bi].value.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Add { a: ai, b: bi }, needs))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xi = self.check(x);
        let cf = F::from_f64(c);
        let out: Vec<F> = self.nodes[xi].value.iter().map(|&v| v * cf).collect();
        let shape = self.nodes[xi].value.shape().to_vec();
        let needs = self.needs(xi);
        self.push(Tensor::from_vec(&shape, out), Op::Scale { x: xi, c: cf }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let out: Vec<F> = self.nodes[xi]
            .value
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = self.nodes[xi].value.shape().to_vec();
        let needs = self.needs(xi);
        self.push(Tensor::from_vec(&shape, out), Op::Relu { x: xi }, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let out: Vec<F> = self.nodes[xi].value.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[xi].value.shape().to_vec();
        let needs = self.needs(xi);
        self.push(Tensor::from_vec(&shape, out), Op::Tanh { x: xi }, needs)
    }

    /// Reinterprets the flat buffer under a new shape with the same element
    /// count. No data is copied.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let xi = self.check(x);
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::InvalidShape(format!("{shape:?}")));
        }
        if n != self.nodes[xi].value.len() {
            return Err(AutodiffError::ElementCountMismatch {
                expected: self.nodes[xi].value.len(),
                actual: n,
            });
        }
        let value = Tensor::from_shared(shape.to_vec(), self.nodes[xi].value.share_data());
        let needs = self.needs(xi);
        Ok(self.push(value, Op::Reshape { x: xi }, needs))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, AutodiffError> {
        let xi = self.check(x);
        let shape = self.nodes[xi].value.shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank && perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(AutodiffError::InvalidArgument {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of 0..{rank}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![F::zero(); self.nodes[xi].value.len()];
        permute_into(self.nodes[xi].value.data(), &shape, perm, &mut out);
        let needs = self.needs(xi);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out),
            Op::Permute { x: xi, perm: perm.to_vec() },
            needs,
        ))
    }

    /// Numerically stable softmax over the last axis. Rows sum to one.
    pub fn softmax_lastaxis(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xi = self.check(x);
        if !self.nodes[xi].value.iter().all(|v| v.is_finite()) {
            return Err(AutodiffError::NonFiniteInput("softmax_lastaxis"));
        }
        let shape = self.nodes[xi].value.shape().to_vec();
        let d = *shape.last().unwrap();
        let data = self.nodes[xi].value.data();
        let mut out = vec![F::zero(); data.len()];
        for (row_in, row_out) in data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = row_in.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(xi);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Softmax { x: xi }, needs))
    }

    /// Per-last-axis normalization to zero mean and unit variance, then
    /// `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        let (xi, gi, bi) = (self.check(x), self.check(gamma), self.check(beta));
        let shape = self.nodes[xi].value.shape().to_vec();
        let d = *shape.last().unwrap();
        if d < 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "layer_norm",
                detail: format!("normalized axis must have length >= 2, got {d}"),
            });
        }
        if eps <= 0.0 {
            return Err(AutodiffError::InvalidArgument {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let gsh = self.nodes[gi].value.shape();
        let bsh = self.nodes[bi].value.shape();
        if gsh != [d] || bsh != [d] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {shape:?}, gamma {gsh:?}, beta {bsh:?}"),
            });
        }
        let rows = self.nodes[xi].value.len() / d;
        let epsf = F::from_f64(eps);
        let inv_d = F::one() / F::from_f64(d as f64);
        let mut xhat = vec![F::zero(); rows * d];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * d];
        {
            let xd = self.nodes[xi].value.data();
            let gd = self.nodes[gi].value.data();
            let bd = self.nodes[bi].value.data();
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mut mean = F::zero();
                for &v in row {
                    mean += v;
                }
                mean *= inv_d;
                let mut var = F::zero();
                for &v in row {
                    let c = v - mean;
                    var += c * c;
                }
                var *= inv_d;
                let is = F::one() / (var + epsf).sqrt();
                inv_std[r] = is;
                let xh = &mut xhat[r * d..(r + 1) * d];
                let o = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    xh[j] = (row[j] - mean) * is;
                    o[j] = gd[j] * xh[j] + bd[j];
                }
            }
        }
        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat: Arc::new(xhat),
                inv_std,
            },
            needs,
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`, so the
    /// eval-mode forward needs no rescaling. Eval mode or rate 0 is the
    /// identity and draws nothing from the RNG.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, AutodiffError> {
        let xi = self.check(x);
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument {
                op: "dropout",
                detail: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        let shape = self.nodes[xi].value.shape().to_vec();
        let needs = self.needs(xi);
        if !training || rate == 0.0 {
            let value = Tensor::from_shared(shape, self.nodes[xi].value.share_data());
            return Ok(self.push(value, Op::Dropout { x: xi, mask: None }, needs));
        }
        let keep_scale = F::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.nodes[xi].value.len())
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep_scale })
            .collect();
        let out: Vec<F> = self.nodes[xi]
            .value
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::Dropout { x: xi, mask: Some(Arc::new(mask)) },
            needs,
        ))
    }

    /// Masked root-mean-square error:
    /// `sqrt(sum(mask * (pred - target)^2) / count(mask) + eps)`.
    /// Masked positions contribute nothing to the value or the gradient.
    pub fn rmse_loss(&mut self, pred: Var, target: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let (pi, ti) = (self.check(pred), self.check(target));
        let psh = self.nodes[pi].value.shape();
        let tsh = self.nodes[ti].value.shape();
        if psh != tsh || mask.len() != self.nodes[pi].value.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "rmse_loss",
                detail: format!("pred {psh:?}, target {tsh:?}, mask len {}", mask.len()),
            });
        }
        let n_valid = mask.iter().filter(|&&m| m).count();
        if n_valid == 0 {
            return Err(AutodiffError::EmptyMask);
        }
        let mut sq_sum = F::zero();
        for ((&p, &t), &m) in self.nodes[pi]
            .value
            .iter()
            .zip(self.nodes[ti].value.iter())
            .zip(mask.iter())
        {
            if m {
                let e = p - t;
                sq_sum += e * e;
            }
        }
        let loss = (sq_sum / F::from_f64(n_valid as f64) + F::from_f64(RMSE_LOSS_EPS)).sqrt();
        let needs = self.needs(pi) || self.needs(ti);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::RmseLoss {
                pred: pi,
                target: ti,
                mask: Arc::new(mask.to_vec()),
                n_valid,
            },
            needs,
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let mut sum = F::zero();
        for &v in self.nodes[xi].value.iter() {
            sum += v;
        }
        let needs = self.needs(xi);
        self.push(Tensor::scalar(sum), Op::SumAll { x: xi }, needs)
    }

    /// Test-only op whose backward rule is deliberately wrong; the gradient
    /// checker must flag it.
    #[cfg(test)]
    fn broken_scale(&mut self, x: Var, c: f64) -> Var {
        let xi = self.check(x);
        let cf = F::from_f64(c);
        let out: Vec<F> = self.nodes[xi].value.iter().map(|&v| v * cf).collect();
        let shape = self.nodes[xi].value.shape().to_vec();
        let needs = self.needs(xi);
        self.push(Tensor::from_vec(&shape, out), Op::BrokenScale { x: xi, c: cf }, needs)
    }

    /// Reverse sweep from `loss`, applying each node's backward rule once
    /// and accumulating into every gradient-requiring tensor. Consumes the
    /// tape; build a fresh one per step.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>, AutodiffError> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(AutodiffError::DetachedLoss);
        }
        if !self.nodes[loss.index].value.is_scalar() {
            return Err(AutodiffError::NotScalar(
                self.nodes[loss.index].value.shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![F::one()]);
        let mut rules = 0usize;

        for idx in (0..=loss.index).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue; // keep accumulated gradient for the caller
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue, // not on the loss path
            };
            self.backprop_node(idx, &g, &mut grads);
            rules += 1;
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|buf| Tensor::from_vec(self.nodes[i].value.shape(), buf))
            })
            .collect();
        Ok(Gradients {
            tape_id: self.id,
            grads,
            rule_applications: rules,
        })
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let buf = |grads: &mut [Option<Vec<F>>], i: usize, len: usize| -> *mut F {
            grads[i].get_or_insert_with(|| vec![F::zero(); len]).as_mut_ptr()
        };
        // Helper that materializes the accumulation buffer for input `i`
        // and returns it as a slice. Inputs are strictly earlier nodes, so
        // distinct calls may alias only when an op uses one input twice;
        // rules below accumulate sequentially, never holding two buffers.
        macro_rules! grad_of {
            ($i:expr) => {{
                let len = self.nodes[$i].value.len();
                let p = buf(grads, $i, len);
                unsafe { std::slice::from_raw_parts_mut(p, len) }
            }};
        }

        match &self.nodes[idx].op {
            Op::Leaf => unreachable!("leaves have no backward rule"),
            Op::Matmul { a, b } => {
                let ash = self.nodes[*a].value.shape();
                let rank = ash.len();
                let (m, k) = (ash[rank - 2], ash[rank - 1]);
                let n = self.nodes[*b].value.shape()[1];
                let batch: usize = ash[..rank - 2].iter().product();
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                if self.needs(*a) {
                    let da = grad_of!(*a);
                    for i in 0..batch {
                        mm_bt_acc(&g[i * m * n..(i + 1) * m * n], bd, m, n, k, &mut da[i * m * k..(i + 1) * m * k]);
                    }
                }
                if self.needs(*b) {
                    let db = grad_of!(*b);
                    for i in 0..batch {
                        mm_at_acc(&ad[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], m, k, n, db);
                    }
                }
            }
            Op::Bmm { a, b } => {
                let ash = self.nodes[*a].value.shape();
                let rank = ash.len();
                let (m, k) = (ash[rank - 2], ash[rank - 1]);
                let n = self.nodes[*b].value.shape()[rank - 1];
                let batch: usize = ash[..rank - 2].iter().product();
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                if self.needs(*a) {
                    let da = grad_of!(*a);
                    for i in 0..batch {
                        mm_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if self.needs(*b) {
                    let db = grad_of!(*b);
                    for i in 0..batch {
                        mm_at_acc(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let d_in = *self.nodes[*x].value.shape().last().unwrap();
                let d_out = self.nodes[*w].value.shape()[1];
                let rows = self.nodes[*x].value.len() / d_in;
                let xd = self.nodes[*x].value.data();
                let wd = self.nodes[*w].value.data();
                if self.needs(*x) {
                    let dx = grad_of!(*x);
                    mm_bt_acc(g, wd, rows, d_out, d_in, dx);
                }
                if self.needs(*w) {
                    let dw = grad_of!(*w);
                    mm_at_acc(xd, g, rows, d_in, d_out, dw);
                }
                if self.needs(*b) {
                    let db = grad_of!(*b);
                    for r in 0..rows {
                        for j in 0..d_out {
                            db[j] += g[r * d_out + j];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    let da = grad_of!(*a);
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.needs(*b) {
                    let db = grad_of!(*b);
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let dx = grad_of!(*x);
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += *c * gv;
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xd = self.nodes[*x].value.data();
                    let dx = grad_of!(*x);
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        if xv > F::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                if self.needs(*x) {
                    let yd = self.nodes[idx].value.data();
                    let dx = grad_of!(*x);
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(yd) {
                        *d += gv * (F::one() - yv * yv);
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let dx = grad_of!(*x);
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Permute { x, perm } => {
                if self.needs(*x) {
                    let out_shape = self.nodes[idx].value.shape().to_vec();
                    let inv = invert_perm(perm);
                    let dx = grad_of!(*x);
                    permute_into(g, &out_shape, &inv, dx);
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let y = self.nodes[idx].value.data();
                    let d = *self.nodes[idx].value.shape().last().unwrap();
                    let dx = grad_of!(*x);
                    for r in 0..y.len() / d {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut dot = F::zero();
                        for (&yv, &gv) in yr.iter().zip(gr) {
                            dot += yv * gv;
                        }
                        let dr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *self.nodes[*x].value.shape().last().unwrap();
                let rows = self.nodes[*x].value.len() / d;
                let gd = self.nodes[*gamma].value.data();
                if self.needs(*gamma) {
                    let dgamma = grad_of!(*gamma);
                    for r in 0..rows {
                        for j in 0..d {
                            dgamma[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let dbeta = grad_of!(*beta);
                    for r in 0..rows {
                        for j in 0..d {
                            dbeta[j] += g[r * d + j];
                        }
                    }
                }
                if self.needs(*x) {
                    let inv_d = F::one() / F::from_f64(d as f64);
                    let dx = grad_of!(*x);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            let a = gr[j] * gd[j];
                            m1 += a;
                            m2 += a * xh[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let dr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let a = gr[j] * gd[j];
                            dr[j] += inv_std[r] * (a - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let dx = grad_of!(*x);
                    match mask {
                        None => {
                            for (d, &gv) in dx.iter_mut().zip(g) {
                                *d += gv;
                            }
                        }
                        Some(m) => {
                            for ((d, &gv), &mv) in dx.iter_mut().zip(g).zip(m.iter()) {
                                *d += gv * mv;
                            }
                        }
                    }
                }
            }
            Op::RmseLoss { pred, target, mask, n_valid } => {
                let loss = self.nodes[idx].value.item();
                let coeff = g[0] / (F::from_f64(*n_valid as f64) * loss);
                let pd = self.nodes[*pred].value.data();
                let td = self.nodes[*target].value.data();
                if self.needs(*pred) {
                    let dp = grad_of!(*pred);
                    for i in 0..pd.len() {
                        if mask[i] {
                            dp[i] += coeff * (pd[i] - td[i]);
                        }
                    }
                }
                if self.needs(*target) {
                    let dt = grad_of!(*target);
                    for i in 0..pd.len() {
                        if mask[i] {
                            dt[i] -= coeff * (pd[i] - td[i]);
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let dx = grad_of!(*x);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            #[cfg(test)]
            Op::BrokenScale { x, c } => {
                if self.needs(*x) {
                    let wrong = *c + F::one();
                    let dx = grad_of!(*x);
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += wrong * gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leafed(t: Tensor<f64>) -> (Tape<f64>, Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(t, true);
        (tape, v)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]), false);
        let eye = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]), false);
        let y = tape.matmul(x, eye).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let zero = tape.leaf(Tensor::zeros(&[2, 2]), false);
        let z = tape.matmul(zero, x).unwrap();
        assert!(tape.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 2]), false);
        assert!(matches!(
            tape.matmul(a, b),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn affine_identity_passthrough() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]), false);
        let w = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn affine_bias_gradient_is_column_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3, 2], vec![1.0; 6]), false);
        let w = tape.leaf(Tensor::zeros(&[2, 2]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), true);
        let y = tape.affine(x, w, b).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        // upstream gradient is all-ones [3, 2]; column sums are 3
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 4], vec![2.0; 4]), false);
        let y = tape.softmax_lastaxis(x).unwrap();
        for &v in tape.value(y).iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let a = tape.leaf(Tensor::from_vec(&[1, 3], vec![0.1, 1.5, -0.7]), false);
        let b = tape.leaf(Tensor::from_vec(&[1, 3], vec![100.1, 101.5, 99.3]), false);
        let ya = tape.softmax_lastaxis(a).unwrap();
        let yb = tape.softmax_lastaxis(b).unwrap();
        for (&u, &v) in tape.value(ya).iter().zip(tape.value(yb).iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..60).map(|_| rng.gen::<f64>() * 8.0 - 4.0).collect();
        let x = tape.leaf(Tensor::from_vec(&[12, 5], data), false);
        let y = tape.softmax_lastaxis(x).unwrap();
        for row in tape.value(y).data().chunks_exact(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![f64::NAN, 0.0]), false);
        assert!(matches!(
            tape.softmax_lastaxis(x),
            Err(AutodiffError::NonFiniteInput(_))
        ));
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 4], vec![7.0; 4]), false);
        let gamma = tape.leaf(Tensor::ones(&[4]), false);
        let beta = tape.leaf(Tensor::zeros(&[4]), false);
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in tape.value(y).iter() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_hand_computed_row() {
        // (x - 2) / sqrt(2/3) for x = [1, 2, 3]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]), false);
        let gamma = tape.leaf(Tensor::ones(&[3]), false);
        let beta = tape.leaf(Tensor::zeros(&[3]), false);
        let y = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (&v, &e) in tape.value(y).iter().zip(expect.iter()) {
            assert!((v - e).abs() < 1e-6, "{v} vs {e}");
        }
    }

    #[test]
    fn relu_and_add_basics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![-1.0, 2.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

        let zero = tape.leaf(Tensor::zeros(&[2]), false);
        let s = tape.add(x, zero).unwrap();
        assert_eq!(tape.value(s).data(), tape.value(x).data());
    }

    #[test]
    fn dropout_identity_paths_draw_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::<f64>::from_vec(&[8], (0..8).map(|i| i as f64).collect());

        let mut tape = Tape::new();
        let x = tape.leaf(t.clone(), false);
        let eval = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.value(eval).data(), t.data());

        let zero_rate = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(zero_rate).data(), t.data());

        // identity paths consumed no randomness
        let mut fresh = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(rng.gen::<u64>(), fresh.gen::<u64>());
    }

    #[test]
    fn dropout_statistics_at_quarter_rate() {
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[n]), false);
        let y = tape.dropout(x, 0.25, true, &mut rng).unwrap();
        let data = tape.value(y).data();
        let survivors = data.iter().filter(|&&v| v != 0.0).count() as f64;
        let mean: f64 = data.iter().sum::<f64>() / n as f64;
        // binomial: sigma_frac = sqrt(p(1-p)/n), sigma_mean = sqrt(var/n)
        let sigma_frac = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((survivors / n as f64 - 0.75).abs() < 3.0 * sigma_frac);
        let sigma_mean = ((1.0f64 / 3.0) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma_mean);
    }

    #[test]
    fn dropout_deterministic_for_fixed_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::ones(&[64]), false);
            let y = tape.dropout(x, 0.3, true, &mut rng).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rmse_loss_hand_values() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::from_vec(&[1, 2], vec![3.0, -4.0]), false);
        let target = tape.leaf(Tensor::zeros(&[1, 2]), false);
        let loss = tape.rmse_loss(pred, target, &[true, true]).unwrap();
        assert!((tape.value(loss).item() - (12.5f64).sqrt()).abs() < 1e-6);

        let same = tape.rmse_loss(pred, pred, &[true, true]).unwrap();
        assert!(tape.value(same).item() <= 1e-4); // sqrt(eps)
    }

    #[test]
    fn rmse_loss_empty_mask_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::zeros(&[2]), false);
        let target = tape.leaf(Tensor::zeros(&[2]), false);
        assert!(matches!(
            tape.rmse_loss(pred, target, &[false, false]),
            Err(AutodiffError::EmptyMask)
        ));
    }

    #[test]
    fn rmse_loss_masked_positions_have_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::from_vec(&[4], vec![1.0, 99.0, 3.0, -50.0]), true);
        let target = tape.leaf(Tensor::zeros(&[4]), false);
        let loss = tape.rmse_loss(pred, target, &[true, false, true, false]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(pred).unwrap();
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[3], 0.0);
        assert!(g.data()[0] != 0.0 && g.data()[2] != 0.0);
    }

    #[test]
    fn backward_sum_is_all_ones() {
        let (mut tape, x) = leafed(Tensor::from_vec(&[3], vec![5.0, -1.0, 2.0]));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_reuse() {
        let (mut tape, x) = leafed(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_applies_one_rule_per_node() {
        let (mut tape, x) = leafed(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let a = tape.scale(x, 2.0);
        let b = tape.relu(a);
        let c = tape.add(a, b).unwrap(); // `a` used twice
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        // scale, relu, add, sum_all: one rule each
        assert_eq!(grads.rule_applications(), 4);
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let (tape, x) = leafed(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NotScalar(_))));

        let (mut t1, x1) = leafed(Tensor::scalar(1.0));
        let l1 = t1.sum_all(x1);
        let t2 = Tape::<f64>::new();
        assert!(matches!(t2.backward(l1), Err(AutodiffError::DetachedLoss)));
    }

    #[test]
    fn broken_backward_is_detected() {
        let err = grad_check(
            |tape, vars| {
                let y = tape.broken_scale(vars[0], 2.0);
                Ok(tape.sum_all(y))
            },
            &[Tensor::<f64>::from_vec(&[3], vec![0.4, -1.2, 2.0])],
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "broken rule must produce a large error, got {err}");
    }

    #[test]
    fn permute_roundtrip_and_reshape_share_data() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = tape.leaf(Tensor::from_vec(&[2, 3, 4], data.clone()), false);
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p).shape(), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);

        let r = tape.reshape(x, &[6, 4]).unwrap();
        assert_eq!(tape.value(r).data(), &data[..]);
        assert!(matches!(
            tape.reshape(x, &[5, 5]),
            Err(AutodiffError::ElementCountMismatch { .. })
        ));
    }
}
