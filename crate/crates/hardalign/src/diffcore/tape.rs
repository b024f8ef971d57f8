//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Building an expression records its operation and eagerly computed value;
//! [`Tape::backward`] then walks the nodes once in reverse creation order.
//! Both passes visit data in fixed index order, so gradients are
//! bit-reproducible for a given construction sequence.
//!
//! Shape agreement between operands is an internal invariant and violations
//! panic; numerical failures (non-finite values) are the caller's concern and
//! surface through [`crate::diffcore::Tensor::validate_finite`].

use std::collections::HashMap;

use crate::diffcore::math::{self, sigmoid};
use crate::diffcore::params::{Gradients, ParamStore, SlotId};
use crate::diffcore::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf reading a parameter slot.
    Param(SlotId),
    /// Leaf with no gradient.
    Const,
    /// Matrix-vector product `m · v`.
    MatVec { m: NodeId, v: NodeId },
    /// Inner product of two equal-length vectors.
    Dot { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Elementwise product.
    Mul { a: NodeId, b: NodeId },
    /// Multiplication by a fixed scalar.
    Scale { a: NodeId, k: f64 },
    /// Addition of a fixed scalar (identity in the backward pass).
    Shift { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Exp { a: NodeId },
    Concat { parts: Vec<NodeId> },
    Slice { a: NodeId, start: usize },
    LogSoftmax { a: NodeId },
    /// Scalar element of a vector.
    Pick { a: NodeId, idx: usize },
    /// Sum of scalar nodes, accumulated left to right.
    Sum { parts: Vec<NodeId> },
    /// Linear combination of scalar nodes with fixed coefficients.
    WeightedSum { parts: Vec<NodeId>, coeffs: Vec<f64> },
    /// `log Σ exp(aᵢ)` over scalar nodes, max-shifted for stability.
    LogSumExp { parts: Vec<NodeId> },
    /// `log Bernoulli(outcome | sigmoid(logit))` for a scalar logit.
    BernoulliLogProb { logit: NodeId, outcome: bool },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Expression recorder bound to one parameter store.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Leaf for a parameter slot; repeated calls return the same node so each
    /// slot accumulates its adjoint at a single point.
    pub fn param(&mut self, slot: SlotId) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&slot.0) {
            return id;
        }
        let value = self.store.value(slot).clone();
        let id = self.push(Op::Param(slot), value);
        self.param_nodes.insert(slot.0, id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.push(Op::Const, Tensor::scalar(v))
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (ms, vs) = (self.value(m).shape(), self.value(v).shape());
        assert!(
            ms.len() == 2 && vs.len() == 1 && ms[1] == vs[0],
            "matvec shape mismatch: {ms:?} · {vs:?}"
        );
        let (rows, cols) = (ms[0], ms[1]);
        let md = self.value(m).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = 0.0;
            let row = &md[r * cols..(r + 1) * cols];
            for c in 0..cols {
                acc += row[c] * vd[c];
            }
            out[r] = acc;
        }
        self.push(Op::MatVec { m, v }, Tensor::vector(out))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(
            sa.len() == 1 && sa == sb,
            "dot shape mismatch: {sa:?} · {sb:?}"
        );
        let mut acc = 0.0;
        for (x, y) in self.value(a).data().iter().zip(self.value(b).data()) {
            acc += x * y;
        }
        self.push(Op::Dot { a, b }, Tensor::scalar(acc))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "elementwise shape mismatch"
        );
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(op, Tensor::new(shape, data).expect("shape preserved"))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| f(*x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(op, Tensor::new(shape, data).expect("shape preserved"))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x * k, Op::Scale { a, k })
    }

    pub fn shift(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x + k, Op::Shift { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero parts");
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).shape().len(), 1, "concat expects vectors");
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            Tensor::vector(data),
        )
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.shape().len(), 1, "slice expects a vector");
        assert!(start + len <= v.len(), "slice out of bounds");
        let data = v.data()[start..start + len].to_vec();
        self.push(Op::Slice { a, start }, Tensor::vector(data))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape().len(), 1, "log_softmax expects a vector");
        let out = math::log_softmax(self.value(a).data());
        self.push(Op::LogSoftmax { a }, Tensor::vector(out))
    }

    pub fn pick(&mut self, a: NodeId, idx: usize) -> NodeId {
        let v = self.value(a);
        assert!(
            v.shape().len() == 1 && idx < v.len(),
            "pick index {idx} out of bounds for {:?}",
            v.shape()
        );
        let val = v.data()[idx];
        self.push(Op::Pick { a, idx }, Tensor::scalar(val))
    }

    /// Scalar sum; an empty part list is the empty sum, a constant 0.
    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        if parts.is_empty() {
            return self.scalar_const(0.0);
        }
        let mut acc = 0.0;
        for &p in parts {
            acc += self.scalar(p);
        }
        self.push(
            Op::Sum {
                parts: parts.to_vec(),
            },
            Tensor::scalar(acc),
        )
    }

    /// `Σ coeffs[i] · parts[i]`; gradients flow to the nodes only, so the
    /// coefficients act as stop-gradient signals.
    pub fn weighted_sum(&mut self, parts: &[NodeId], coeffs: &[f64]) -> NodeId {
        assert_eq!(parts.len(), coeffs.len(), "weighted_sum length mismatch");
        assert!(!parts.is_empty(), "weighted_sum of zero parts");
        let mut acc = 0.0;
        for (&p, &c) in parts.iter().zip(coeffs) {
            acc += c * self.scalar(p);
        }
        self.push(
            Op::WeightedSum {
                parts: parts.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            Tensor::scalar(acc),
        )
    }

    pub fn log_sum_exp(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "log_sum_exp of zero parts");
        let vals: Vec<f64> = parts.iter().map(|&p| self.scalar(p)).collect();
        let value = math::logsumexp(&vals);
        self.push(
            Op::LogSumExp {
                parts: parts.to_vec(),
            },
            Tensor::scalar(value),
        )
    }

    /// `log((1/k) Σ exp(aᵢ))` over scalar nodes.
    pub fn log_mean_exp(&mut self, parts: &[NodeId]) -> NodeId {
        let lse = self.log_sum_exp(parts);
        self.shift(lse, -(parts.len() as f64).ln())
    }

    pub fn bernoulli_log_prob(&mut self, logit: NodeId, outcome: bool) -> NodeId {
        assert!(self.value(logit).is_scalar(), "bernoulli logit must be scalar");
        let l = self.scalar(logit);
        let value = math::bernoulli_logprob(l, outcome);
        self.push(Op::BernoulliLogProb { logit, outcome }, Tensor::scalar(value))
    }

    /// Accumulates `d root / d slot` for every parameter slot reachable from
    /// `root`, which must be scalar. Nodes are visited in strictly decreasing
    /// index order and every inner loop runs in index order, so the result is
    /// reproducible bit for bit.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert!(self.value(root).is_scalar(), "backward root must be scalar");
        let mut grads = Gradients::zeros_like(self.store);
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let dy = match adj[i].take() {
                Some(d) => d,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(slot) => {
                    let shape = self.nodes[i].value.shape().to_vec();
                    let dst = grads.slot_or_insert(*slot, &shape).data_mut();
                    for (d, s) in dst.iter_mut().zip(&dy) {
                        *d += s;
                    }
                }
                Op::MatVec { m, v } => {
                    let (rows, cols) = {
                        let s = self.nodes[m.0].value.shape();
                        (s[0], s[1])
                    };
                    let md = self.nodes[m.0].value.data();
                    let vd = self.nodes[v.0].value.data();
                    {
                        let dm = Self::adjoint(&mut adj, m.0, rows * cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dm[r * cols + c] += dy[r] * vd[c];
                            }
                        }
                    }
                    let dv = Self::adjoint(&mut adj, v.0, cols);
                    for c in 0..cols {
                        let mut acc = 0.0;
                        for r in 0..rows {
                            acc += md[r * cols + c] * dy[r];
                        }
                        dv[c] += acc;
                    }
                }
                Op::Dot { a, b } => {
                    let n = self.nodes[a.0].value.len();
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let bd = self.nodes[b.0].value.data().to_vec();
                    {
                        let da = Self::adjoint(&mut adj, a.0, n);
                        for j in 0..n {
                            da[j] += dy[0] * bd[j];
                        }
                    }
                    let db = Self::adjoint(&mut adj, b.0, n);
                    for j in 0..n {
                        db[j] += dy[0] * ad[j];
                    }
                }
                Op::Add { a, b } => {
                    let n = dy.len();
                    {
                        let da = Self::adjoint(&mut adj, a.0, n);
                        for j in 0..n {
                            da[j] += dy[j];
                        }
                    }
                    let db = Self::adjoint(&mut adj, b.0, n);
                    for j in 0..n {
                        db[j] += dy[j];
                    }
                }
                Op::Sub { a, b } => {
                    let n = dy.len();
                    {
                        let da = Self::adjoint(&mut adj, a.0, n);
                        for j in 0..n {
                            da[j] += dy[j];
                        }
                    }
                    let db = Self::adjoint(&mut adj, b.0, n);
                    for j in 0..n {
                        db[j] -= dy[j];
                    }
                }
                Op::Mul { a, b } => {
                    let n = dy.len();
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let bd = self.nodes[b.0].value.data().to_vec();
                    {
                        let da = Self::adjoint(&mut adj, a.0, n);
                        for j in 0..n {
                            da[j] += dy[j] * bd[j];
                        }
                    }
                    let db = Self::adjoint(&mut adj, b.0, n);
                    for j in 0..n {
                        db[j] += dy[j] * ad[j];
                    }
                }
                Op::Scale { a, k } => {
                    let da = Self::adjoint(&mut adj, a.0, dy.len());
                    for (d, s) in da.iter_mut().zip(&dy) {
                        *d += k * s;
                    }
                }
                Op::Shift { a } => {
                    let da = Self::adjoint(&mut adj, a.0, dy.len());
                    for (d, s) in da.iter_mut().zip(&dy) {
                        *d += s;
                    }
                }
                Op::Sigmoid { a } => {
                    let y = self.nodes[i].value.data();
                    let da = Self::adjoint(&mut adj, a.0, dy.len());
                    for j in 0..dy.len() {
                        da[j] += dy[j] * y[j] * (1.0 - y[j]);
                    }
                }
                Op::Tanh { a } => {
                    let y = self.nodes[i].value.data();
                    let da = Self::adjoint(&mut adj, a.0, dy.len());
                    for j in 0..dy.len() {
                        da[j] += dy[j] * (1.0 - y[j] * y[j]);
                    }
                }
                Op::Exp { a } => {
                    let y = self.nodes[i].value.data();
                    let da = Self::adjoint(&mut adj, a.0, dy.len());
                    for j in 0..dy.len() {
                        da[j] += dy[j] * y[j];
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.len();
                        let dp = Self::adjoint(&mut adj, p.0, n);
                        for j in 0..n {
                            dp[j] += dy[offset + j];
                        }
                        offset += n;
                    }
                }
                Op::Slice { a, start } => {
                    let n = self.nodes[a.0].value.len();
                    let da = Self::adjoint(&mut adj, a.0, n);
                    for (j, s) in dy.iter().enumerate() {
                        da[start + j] += s;
                    }
                }
                Op::LogSoftmax { a } => {
                    let y = self.nodes[i].value.data();
                    let total: f64 = dy.iter().sum();
                    let da = Self::adjoint(&mut adj, a.0, dy.len());
                    for j in 0..dy.len() {
                        da[j] += dy[j] - y[j].exp() * total;
                    }
                }
                Op::Pick { a, idx } => {
                    let n = self.nodes[a.0].value.len();
                    let da = Self::adjoint(&mut adj, a.0, n);
                    da[*idx] += dy[0];
                }
                Op::Sum { parts } => {
                    for &p in parts {
                        Self::adjoint(&mut adj, p.0, 1)[0] += dy[0];
                    }
                }
                Op::WeightedSum { parts, coeffs } => {
                    for (&p, &c) in parts.iter().zip(coeffs) {
                        Self::adjoint(&mut adj, p.0, 1)[0] += c * dy[0];
                    }
                }
                Op::LogSumExp { parts } => {
                    let lse = self.nodes[i].value.item();
                    for &p in parts {
                        let w = (self.nodes[p.0].value.item() - lse).exp();
                        Self::adjoint(&mut adj, p.0, 1)[0] += w * dy[0];
                    }
                }
                Op::BernoulliLogProb { logit, outcome } => {
                    let l = self.nodes[logit.0].value.item();
                    let b = if *outcome { 1.0 } else { 0.0 };
                    Self::adjoint(&mut adj, logit.0, 1)[0] += dy[0] * (b - sigmoid(l));
                }
            }
        }
        grads
    }

    fn adjoint<'a>(adj: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
        adj[idx].get_or_insert_with(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::params::ParamStore;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, SlotId) {
        let mut s = ParamStore::new();
        let id = s.insert(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn param_node_is_memoized() {
        let (store, w) = store_with("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new(&store);
        let a = tape.param(w);
        let b = tape.param(w);
        assert_eq!(a, b);
    }

    #[test]
    fn matvec_forward_and_backward() {
        let (mut store, _) =
            store_with("m", Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let v_id = store.insert("v", Tensor::vector(vec![1.0, 0.5, -1.0])).unwrap();
        let m_id = store.slot("m").unwrap();
        let mut tape = Tape::new(&store);
        let m = tape.param(m_id);
        let v = tape.param(v_id);
        let y = tape.matvec(m, v);
        assert_eq!(tape.value(y).data(), &[-1.0, 0.5]);
        let y0 = tape.pick(y, 0);
        let y1 = tape.pick(y, 1);
        let total = tape.sum(&[y0, y1]);
        let g = tape.backward(total);
        // d(Σᵣ yᵣ)/dv_c = Σᵣ m[r][c]
        assert_eq!(g.slot(v_id).unwrap().data(), &[5.0, 7.0, 9.0]);
        // d(Σᵣ yᵣ)/dm[r][c] = v[c]
        assert_eq!(
            g.slot(m_id).unwrap().data(),
            &[1.0, 0.5, -1.0, 1.0, 0.5, -1.0]
        );
    }

    #[test]
    fn backward_through_dot_and_sigmoid() {
        let (store, w) = store_with("w", Tensor::vector(vec![0.3, -0.7]));
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut tape = Tape::new(&store);
        let wn = tape.param(w);
        let xn = tape.constant(x);
        let d = tape.dot(wn, xn);
        let y = tape.sigmoid(d);
        let g = tape.backward(y);
        let z = 0.3 - 1.4;
        let s = sigmoid(z);
        let expect = s * (1.0 - s);
        let gw = g.slot(w).unwrap();
        assert!((gw.data()[0] - expect * 1.0).abs() < 1e-12);
        assert!((gw.data()[1] - expect * 2.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_gradient_is_softmax() {
        let (store, w) = store_with("w", Tensor::vector(vec![0.1, 1.3, -0.4]));
        let mut tape = Tape::new(&store);
        let wn = tape.param(w);
        let parts: Vec<NodeId> = (0..3).map(|j| tape.pick(wn, j)).collect();
        let lse = tape.log_sum_exp(&parts);
        let g = tape.backward(lse);
        let gw = g.slot(w).unwrap().data().to_vec();
        let sum: f64 = gw.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "softmax weights must sum to 1");
        assert!(gw[1] > gw[0] && gw[0] > gw[2]);
    }

    #[test]
    fn weighted_sum_treats_coeffs_as_constants() {
        let (store, w) = store_with("w", Tensor::vector(vec![2.0]));
        let mut tape = Tape::new(&store);
        let wn = tape.param(w);
        let x = tape.pick(wn, 0);
        let y = tape.weighted_sum(&[x, x], &[3.0, -1.0]);
        assert_eq!(tape.scalar(y), 4.0);
        let g = tape.backward(y);
        assert_eq!(g.slot(w).unwrap().data(), &[2.0]);
    }

    #[test]
    fn bernoulli_log_prob_gradient() {
        let (store, w) = store_with("w", Tensor::vector(vec![0.8]));
        let mut tape = Tape::new(&store);
        let wn = tape.param(w);
        let l = tape.pick(wn, 0);
        let lp = tape.bernoulli_log_prob(l, true);
        assert!((tape.scalar(lp) - math::bernoulli_logprob(0.8, true)).abs() < 1e-15);
        let g = tape.backward(lp);
        let expect = 1.0 - sigmoid(0.8);
        assert!((g.slot(w).unwrap().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn shared_param_accumulates_once_per_use() {
        let (store, w) = store_with("w", Tensor::vector(vec![1.5]));
        let mut tape = Tape::new(&store);
        let wn = tape.param(w);
        let x = tape.pick(wn, 0);
        let y = tape.mul(x, x);
        let g = tape.backward(y);
        // d(x²)/dx = 2x = 3.0
        assert!((g.slot(w).unwrap().data()[0] - 3.0).abs() < 1e-12);
    }
}
