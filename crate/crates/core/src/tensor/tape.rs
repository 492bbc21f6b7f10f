//! Define-by-run reverse-mode differentiation tape.
//!
//! A [`Tape`] records every operation as it executes. Values are addressed
//! by lightweight [`Val`] handles into the tape's node list. Calling
//! [`Tape::backward`] seeds the (scalar) loss node with gradient 1 and
//! sweeps the records in reverse, accumulating parameter gradients into the
//! [`ParamStore`] the parameters came from.
//!
//! Broadcasting is deliberately minimal: binary elementwise operations
//! accept equal shapes or one single-element operand, and
//! [`Tape::add_bias`] adds a vector to every row of a matrix. Anything else
//! is a shape error, never silent recycling.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Val(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Copy of a parameter; the tape's dedup map records which store and
    /// name it came from, and gradients are harvested back through that map.
    Param,
    Add { a: Val, b: Val },
    Sub { a: Val, b: Val },
    Mul { a: Val, b: Val },
    Scale { a: Val, c: f64 },
    AddConst { a: Val },
    Tanh { a: Val },
    Relu { a: Val },
    Exp { a: Val },
    Ln { a: Val },
    Rsqrt { a: Val },
    Matmul { a: Val, b: Val },
    AddBias { x: Val, b: Val },
    Transpose { a: Val },
    Softmax { a: Val, axis: usize },
    LayerNorm {
        x: Val,
        gain: Val,
        bias: Val,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum { a: Val },
    Mean { a: Val },
    Concat { parts: Vec<Val> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Records a computation and differentiates it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    /// Dedup map so entering the same parameter twice on one tape reuses
    /// the node (and therefore accumulates gradients correctly).
    param_nodes: HashMap<(u64, String), Val>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// The three legal operand layouts for binary elementwise operations.
enum Broadcast {
    Equal,
    ScalarLeft,
    ScalarRight,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Val {
        let n = value.len();
        self.nodes.push(Node {
            shape,
            value,
            grad: vec![0.0; n],
            op,
        });
        Val(self.nodes.len() - 1)
    }

    /// Enters a constant tensor (no gradient flows out of the tape for it).
    pub fn leaf(&mut self, t: &Tensor) -> Val {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Val> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, v: f64) -> Val {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    /// Enters a named parameter. Re-entering the same parameter on the same
    /// tape returns the existing node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Val> {
        let key = (store.id(), name.to_string());
        if let Some(&v) = self.param_nodes.get(&key) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))?;
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param,
        );
        self.param_nodes.insert(key, v);
        Ok(v)
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Val) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar node, found shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    /// Gradient of a node after [`Tape::backward`] has run.
    pub fn grad(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].grad
    }

    fn classify(&self, op: &'static str, a: Val, b: Val) -> Result<Broadcast> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb {
            Ok(Broadcast::Equal)
        } else if self.nodes[a.0].value.len() == 1 {
            Ok(Broadcast::ScalarLeft)
        } else if self.nodes[b.0].value.len() == 1 {
            Ok(Broadcast::ScalarRight)
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Val,
        b: Val,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Val> {
        let value = match self.classify(op_name, a, b)? {
            Broadcast::Equal => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
            }
            Broadcast::ScalarLeft => {
                let x = self.nodes[a.0].value[0];
                self.nodes[b.0].value.iter().map(|&y| f(x, y)).collect()
            }
            Broadcast::ScalarRight => {
                let y = self.nodes[b.0].value[0];
                self.nodes[a.0].value.iter().map(|&x| f(x, y)).collect()
            }
        };
        let shape = if self.nodes[a.0].value.len() == 1 && self.nodes[b.0].value.len() != 1 {
            self.nodes[b.0].shape.clone()
        } else {
            self.nodes[a.0].shape.clone()
        };
        Ok(self.push(shape, value, op))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Multiplication by a compile-time constant (no gradient for `c`).
    pub fn scale(&mut self, a: Val, c: f64) -> Val {
        let value = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Scale { a, c })
    }

    /// Addition of a compile-time constant.
    pub fn add_const(&mut self, a: Val, c: f64) -> Val {
        let value = self.nodes[a.0].value.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::AddConst { a })
    }

    fn unary(&mut self, a: Val, f: impl Fn(f64) -> f64, op: Op) -> Val {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, op)
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Val) -> Val {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a })
    }

    pub fn exp(&mut self, a: Val) -> Val {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    /// Natural logarithm. Domain errors surface as non-finite values, which
    /// the training loop's divergence guard catches.
    pub fn ln(&mut self, a: Val) -> Val {
        self.unary(a, f64::ln, Op::Ln { a })
    }

    /// Reciprocal square root.
    pub fn rsqrt(&mut self, a: Val) -> Val {
        self.unary(a, |x| 1.0 / x.sqrt(), Op::Rsqrt { a })
    }

    /// Logistic sigmoid, composed from tanh: σ(x) = (tanh(x / 2) + 1) / 2.
    pub fn sigmoid(&mut self, a: Val) -> Val {
        let half = self.scale(a, 0.5);
        let t = self.tanh(half);
        let shifted = self.add_const(t, 1.0);
        self.scale(shifted, 0.5)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            m,
            k,
            n,
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }))
    }

    /// Adds a length-n bias vector to every row of an [m×n] matrix.
    pub fn add_bias(&mut self, x: Val, b: Val) -> Result<Val> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[b.0].shape);
        let cols = match sx.len() {
            2 => sx[1],
            _ => return Err(shape_err("add_bias", sx, sb)),
        };
        if self.nodes[b.0].value.len() != cols {
            return Err(shape_err("add_bias", sx, sb));
        }
        let rows = sx[0];
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(self.nodes[x.0].value[r * cols + c] + self.nodes[b.0].value[c]);
            }
        }
        Ok(self.push(vec![rows, cols], out, Op::AddBias { x, b }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Val) -> Result<Val> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(shape_err("transpose", sa, &[]));
        }
        let (r, c) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose { a }))
    }

    /// Numerically stable softmax along `axis` of a rank-1 or rank-2 tensor.
    ///
    /// The maximum of each lane is subtracted before exponentiation, so
    /// entries of −∞ (attention masks) map to exactly 0. A lane whose every
    /// entry is −∞ is a contract violation.
    pub fn softmax(&mut self, a: Val, axis: usize) -> Result<Val> {
        let sa = self.nodes[a.0].shape.clone();
        if axis >= sa.len() || sa.len() > 2 {
            return Err(Error::contract(format!(
                "softmax axis {axis} invalid for shape {sa:?}"
            )));
        }
        let mut out = self.nodes[a.0].value.clone();
        for lane in lanes(&sa, axis) {
            softmax_lane(&mut out, &lane)?;
        }
        Ok(self.push(sa, out, Op::Softmax { a, axis }))
    }

    /// Layer normalization over the last axis of a rank-2 tensor, with a
    /// learned per-column gain and bias. Variance is the biased (1/n)
    /// estimator.
    pub fn layer_norm(&mut self, x: Val, gain: Val, bias: Val, eps: f64) -> Result<Val> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 2 {
            return Err(shape_err("layer_norm", &sx, &[]));
        }
        let (rows, cols) = (sx[0], sx[1]);
        if self.nodes[gain.0].value.len() != cols || self.nodes[bias.0].value.len() != cols {
            return Err(shape_err("layer_norm", &sx, &self.nodes[gain.0].shape));
        }
        let mut out = vec![0.0; rows * cols];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.nodes[x.0].value[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for c in 0..cols {
                let xhat = (row[c] - mean) * rstd;
                out[r * cols + c] = xhat * self.nodes[gain.0].value[c] + self.nodes[bias.0].value[c];
            }
        }
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, a: Val) -> Val {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a })
    }

    /// Mean of all elements, producing a scalar.
    pub fn mean(&mut self, a: Val) -> Val {
        let n = self.nodes[a.0].value.len() as f64;
        let s: f64 = self.nodes[a.0].value.iter().sum();
        self.push(vec![1], vec![s / n], Op::Mean { a })
    }

    /// Concatenates rank-2 tensors with equal row counts along the column
    /// axis (rank-1 tensors are treated as single rows).
    pub fn concat(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let row_count = |s: &[usize]| if s.len() == 2 { s[0] } else { 1 };
        let rows = row_count(&self.nodes[parts[0].0].shape);
        let mut total_cols = 0usize;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() > 2 || row_count(s) != rows {
                return Err(shape_err("concat", &self.nodes[parts[0].0].shape, s));
            }
            total_cols += self.nodes[p.0].value.len() / rows;
        }
        let mut out = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                let cols = self.nodes[p.0].value.len() / rows;
                out.extend_from_slice(&self.nodes[p.0].value[r * cols..(r + 1) * cols]);
            }
        }
        Ok(self.push(
            vec![rows, total_cols],
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Parameter gradients are accumulated
    /// (`+=`) into `store`; call [`ParamStore::zero_grads`] first if you want
    /// fresh gradients. Repeated calls on the same tape re-accumulate.
    pub fn backward(&mut self, loss: Val, store: &mut ParamStore) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, found shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backprop_node(i)?;
        }

        for ((sid, name), val) in &self.param_nodes {
            if *sid != store.id() {
                continue;
            }
            let node_grad = self.nodes[val.0].grad.clone();
            let t = store
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("parameter {name:?} vanished from store")))?;
            for (dst, src) in t.grad_mut().iter_mut().zip(node_grad.iter()) {
                *dst += *src;
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) -> Result<()> {
        let grad = std::mem::take(&mut self.nodes[i].grad);
        // Most arms only need to read values; mutation happens through
        // `accumulate`, which adds into another node's gradient.
        macro_rules! acc {
            ($target:expr, $idx:expr, $val:expr) => {
                self.nodes[$target.0].grad[$idx] += $val
            };
        }
        // The op record is cloned so gradient accumulation below can borrow
        // the node list mutably.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::Param => {}
            Op::Add { a, b } => {
                self.acc_broadcast(a, &grad, 1.0);
                self.acc_broadcast(b, &grad, 1.0);
            }
            Op::Sub { a, b } => {
                self.acc_broadcast(a, &grad, 1.0);
                self.acc_broadcast(b, &grad, -1.0);
            }
            Op::Mul { a, b } => {
                let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
                if la == lb {
                    for j in 0..grad.len() {
                        let (va, vb) = (self.nodes[a.0].value[j], self.nodes[b.0].value[j]);
                        acc!(a, j, grad[j] * vb);
                        acc!(b, j, grad[j] * va);
                    }
                } else if la == 1 {
                    let va = self.nodes[a.0].value[0];
                    let mut s = 0.0;
                    for j in 0..grad.len() {
                        s += grad[j] * self.nodes[b.0].value[j];
                        acc!(b, j, grad[j] * va);
                    }
                    acc!(a, 0, s);
                } else {
                    let vb = self.nodes[b.0].value[0];
                    let mut s = 0.0;
                    for j in 0..grad.len() {
                        s += grad[j] * self.nodes[a.0].value[j];
                        acc!(a, j, grad[j] * vb);
                    }
                    acc!(b, 0, s);
                }
            }
            Op::Scale { a, c } => {
                for j in 0..grad.len() {
                    acc!(a, j, grad[j] * c);
                }
            }
            Op::AddConst { a } => {
                for j in 0..grad.len() {
                    acc!(a, j, grad[j]);
                }
            }
            Op::Tanh { a } => {
                for j in 0..grad.len() {
                    let y = self.nodes[i].value[j];
                    acc!(a, j, grad[j] * (1.0 - y * y));
                }
            }
            Op::Relu { a } => {
                for j in 0..grad.len() {
                    if self.nodes[a.0].value[j] > 0.0 {
                        acc!(a, j, grad[j]);
                    }
                }
            }
            Op::Exp { a } => {
                for j in 0..grad.len() {
                    let y = self.nodes[i].value[j];
                    acc!(a, j, grad[j] * y);
                }
            }
            Op::Ln { a } => {
                for j in 0..grad.len() {
                    let x = self.nodes[a.0].value[j];
                    acc!(a, j, grad[j] / x);
                }
            }
            Op::Rsqrt { a } => {
                for j in 0..grad.len() {
                    let y = self.nodes[i].value[j];
                    acc!(a, j, grad[j] * (-0.5) * y * y * y);
                }
            }
            Op::Matmul { a, b } => {
                let m = self.nodes[a.0].shape[0];
                let k = self.nodes[a.0].shape[1];
                let n = self.nodes[b.0].shape[1];
                // dA += dC · Bᵀ
                {
                    let bv = &self.nodes[b.0].value;
                    let mut da = vec![0.0; m * k];
                    for i2 in 0..m {
                        for j2 in 0..n {
                            let g = grad[i2 * n + j2];
                            if g == 0.0 {
                                continue;
                            }
                            for k2 in 0..k {
                                da[i2 * k + k2] += g * bv[k2 * n + j2];
                            }
                        }
                    }
                    for (j, v) in da.into_iter().enumerate() {
                        self.nodes[a.0].grad[j] += v;
                    }
                }
                // dB += Aᵀ · dC
                {
                    let av = &self.nodes[a.0].value;
                    let mut db = vec![0.0; k * n];
                    for i2 in 0..m {
                        for k2 in 0..k {
                            let x = av[i2 * k + k2];
                            if x == 0.0 {
                                continue;
                            }
                            for j2 in 0..n {
                                db[k2 * n + j2] += x * grad[i2 * n + j2];
                            }
                        }
                    }
                    for (j, v) in db.into_iter().enumerate() {
                        self.nodes[b.0].grad[j] += v;
                    }
                }
            }
            Op::AddBias { x, b } => {
                let cols = self.nodes[b.0].value.len();
                for (j, &g) in grad.iter().enumerate() {
                    acc!(x, j, g);
                    acc!(b, j % cols, g);
                }
            }
            Op::Transpose { a } => {
                let r = self.nodes[a.0].shape[0];
                let c = self.nodes[a.0].shape[1];
                for i2 in 0..r {
                    for j2 in 0..c {
                        acc!(a, i2 * c + j2, grad[j2 * r + i2]);
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let shape = self.nodes[i].shape.clone();
                let y = self.nodes[i].value.clone();
                for lane in lanes(&shape, axis) {
                    let dot: f64 = lane.iter().map(|&j| grad[j] * y[j]).sum();
                    for &j in &lane {
                        acc!(a, j, y[j] * (grad[j] - dot));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let cols = self.nodes[gain.0].value.len();
                let rows = mean.len();
                for r in 0..rows {
                    let xrow: Vec<f64> =
                        self.nodes[x.0].value[r * cols..(r + 1) * cols].to_vec();
                    let grow = &grad[r * cols..(r + 1) * cols];
                    let mut dxhat = vec![0.0; cols];
                    for c in 0..cols {
                        let xhat = (xrow[c] - mean[r]) * rstd[r];
                        acc!(gain, c, grow[c] * xhat);
                        acc!(bias, c, grow[c]);
                        dxhat[c] = grow[c] * self.nodes[gain.0].value[c];
                    }
                    let m1: f64 = dxhat.iter().sum::<f64>() / cols as f64;
                    let m2: f64 = dxhat
                        .iter()
                        .enumerate()
                        .map(|(c, &d)| d * (xrow[c] - mean[r]) * rstd[r])
                        .sum::<f64>()
                        / cols as f64;
                    for c in 0..cols {
                        let xhat = (xrow[c] - mean[r]) * rstd[r];
                        acc!(x, r * cols + c, rstd[r] * (dxhat[c] - m1 - xhat * m2));
                    }
                }
            }
            Op::Sum { a } => {
                let g = grad[0];
                for j in 0..self.nodes[a.0].value.len() {
                    acc!(a, j, g);
                }
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].value.len();
                let g = grad[0] / n as f64;
                for j in 0..n {
                    acc!(a, j, g);
                }
            }
            Op::Concat { parts } => {
                let total_cols = self.nodes[i].shape[1];
                let rows = self.nodes[i].shape[0];
                let mut col_off = 0usize;
                for p in parts {
                    let cols = self.nodes[p.0].value.len() / rows;
                    for r in 0..rows {
                        for c in 0..cols {
                            acc!(p, r * cols + c, grad[r * total_cols + col_off + c]);
                        }
                    }
                    col_off += cols;
                }
            }
        }
        self.nodes[i].grad = grad;
        Ok(())
    }

    /// Adds `sign * grad` into node `t`, collapsing to a scalar if `t` is a
    /// single element broadcast across `grad`.
    fn acc_broadcast(&mut self, t: Val, grad: &[f64], sign: f64) {
        if self.nodes[t.0].value.len() == 1 && grad.len() != 1 {
            let s: f64 = grad.iter().sum();
            self.nodes[t.0].grad[0] += sign * s;
        } else {
            for (j, &g) in grad.iter().enumerate() {
                self.nodes[t.0].grad[j] += sign * g;
            }
        }
    }
}

/// Row-major C[m×n] += A[m×k] · B[k×n] with C pre-zeroed by the caller.
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for k2 in 0..k {
            let x = a[i * k + k2];
            if x == 0.0 {
                continue;
            }
            let brow = &b[k2 * n..(k2 + 1) * n];
            let crow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += x * brow[j];
            }
        }
    }
}

/// Index sets of each 1-D lane along `axis` for a rank-1/2 shape.
fn lanes(shape: &[usize], axis: usize) -> Vec<Vec<usize>> {
    match (shape.len(), axis) {
        (1, 0) => vec![(0..shape[0]).collect()],
        (2, 1) => (0..shape[0])
            .map(|r| (r * shape[1]..(r + 1) * shape[1]).collect())
            .collect(),
        (2, 0) => (0..shape[1])
            .map(|c| (0..shape[0]).map(|r| r * shape[1] + c).collect())
            .collect(),
        _ => vec![],
    }
}

/// In-place stable softmax over the indices in `lane`.
fn softmax_lane(data: &mut [f64], lane: &[usize]) -> Result<()> {
    let max = lane
        .iter()
        .map(|&j| data[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::contract("softmax lane is entirely masked"));
    }
    let mut sum = 0.0;
    for &j in lane {
        let e = (data[j] - max).exp();
        data[j] = e;
        sum += e;
    }
    for &j in lane {
        data[j] /= sum;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = tape
            .leaf_from(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let b = tape
            .leaf_from(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
        // Identity leaves a matrix unchanged.
        let eye = tape
            .leaf_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let d = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(d), tape.value(a));
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf_from(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.leaf_from(vec![2, 2], vec![0.0; 4]).unwrap();
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_known_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![0.5, -3.0, 0.0]));
        let t = tape.tanh(x);
        let r = tape.relu(x);
        let e = tape.exp(x);
        assert!((tape.value(t)[0] - 0.5_f64.tanh()).abs() < 1e-15);
        assert!((tape.value(t)[0] - 0.46211715726000974).abs() < 1e-15);
        assert_eq!(tape.value(r), &[0.5, 0.0, 0.0]);
        assert!((tape.value(e)[1] - (-3.0_f64).exp()).abs() < 1e-15);

        let q = tape.leaf(&Tensor::from_vec(vec![4.0]));
        let rs = tape.rsqrt(q);
        assert!((tape.value(rs)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scalar_broadcast_and_equal_shape_only() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.leaf(&Tensor::from_vec(vec![3.0, 4.0]));
        let s = tape.scalar(10.0);
        let ab = tape.add(a, b).unwrap();
        assert_eq!(tape.value(ab), &[4.0, 6.0]);
        let a_s = tape.add(a, s).unwrap();
        assert_eq!(tape.value(a_s), &[11.0, 12.0]);
        let s_a = tape.add(s, a).unwrap();
        assert_eq!(tape.value(s_a), &[11.0, 12.0]);
        // [2] vs [3] is rejected, not recycled.
        let c = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn softmax_uniform_stability_and_masking() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2.0, 2.0, 2.0, 2.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let big = tape.leaf(&Tensor::from_vec(vec![1000.0, 0.0, -1000.0]));
        let yb = tape.softmax(big, 0).unwrap();
        assert!(tape.value(yb).iter().all(|v| v.is_finite()));
        assert!(tape.value(yb)[0] > tape.value(yb)[1]);

        let masked = tape.leaf(&Tensor::from_vec(vec![
            1.0,
            f64::NEG_INFINITY,
            2.0,
            f64::NEG_INFINITY,
        ]));
        let ym = tape.softmax(masked, 0).unwrap();
        let v = tape.value(ym);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);

        let all_masked = tape.leaf(&Tensor::from_vec(vec![f64::NEG_INFINITY; 3]));
        assert!(tape.softmax(all_masked, 0).is_err());
    }

    #[test]
    fn softmax_single_valid_entry_is_exactly_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![
            3.7,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_two_point_row() {
        // Row [1, 3]: mean 2, biased variance 1, so output is [-1, 1]
        // up to the epsilon in the denominator.
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let g = tape.leaf(&Tensor::from_vec(vec![1.0, 1.0]));
        let b = tape.leaf(&Tensor::from_vec(vec![0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-6);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-6);

        // Constant row maps to zeros exactly.
        let xc = tape.leaf_from(vec![1, 3], vec![4.0, 4.0, 4.0]).unwrap();
        let g3 = tape.leaf(&Tensor::from_vec(vec![1.0; 3]));
        let b3 = tape.leaf(&Tensor::from_vec(vec![0.0; 3]));
        let yc = tape.layer_norm(xc, g3, b3, 1e-5).unwrap();
        assert_eq!(tape.value(yc), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut store = store_with("x", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let s = tape.sum(x);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_linear_in_input() {
        // d/dx sum(x ⊙ x) = 2x.
        let mut store = store_with("x", Tensor::from_vec(vec![1.5, -2.0, 0.25]));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad().unwrap(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut store = store_with("x", Tensor::from_vec(vec![2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let s = tape.sum(x);
        tape.backward(s, &mut store).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad().unwrap(), &[2.0]);
        store.zero_grads();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad().unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = store_with("x", Tensor::from_vec(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.tanh(x);
        assert!(tape.backward(y, &mut store).is_err());
    }

    #[test]
    fn param_reentry_reuses_node_and_accumulates() {
        // loss = sum(x) + sum(x) should give gradient 2 per component.
        let mut store = store_with("x", Tensor::from_vec(vec![1.0, 1.0]));
        let mut tape = Tape::new();
        let x1 = tape.param(&store, "x").unwrap();
        let x2 = tape.param(&store, "x").unwrap();
        assert_eq!(x1, x2);
        let s1 = tape.sum(x1);
        let s2 = tape.sum(x2);
        let total = tape.add(s1, s2).unwrap();
        tape.backward(total, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn two_stores_keep_gradients_separate() {
        let mut main = store_with("w", Tensor::from_vec(vec![3.0]));
        let frozen = store_with("w", Tensor::from_vec(vec![5.0]));
        let mut tape = Tape::new();
        let a = tape.param(&main, "w").unwrap();
        let b = tape.param(&frozen, "w").unwrap();
        let prod = tape.mul(a, b).unwrap();
        let s = tape.sum(prod);
        tape.backward(s, &mut main).unwrap();
        assert_eq!(main.get("w").unwrap().grad().unwrap(), &[5.0]);
        assert_eq!(frozen.get("w").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn sigmoid_matches_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![-2.0, 0.0, 3.0]));
        let y = tape.sigmoid(x);
        for (v, x) in tape.value(y).iter().zip([-2.0f64, 0.0, 3.0]) {
            let expect = 1.0 / (1.0 + (-x).exp());
            assert!((v - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn concat_and_transpose_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.leaf_from(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = tape.leaf_from(vec![1, 3], vec![3.0, 4.0, 5.0]).unwrap();
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[1, 5]);
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0]);

        let m = tape
            .leaf_from(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let t = tape.transpose(m).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        let tt = tape.transpose(t).unwrap();
        assert_eq!(tape.value(tt), tape.value(m));
    }

    #[test]
    fn add_bias_applies_per_row() {
        let mut tape = Tape::new();
        let x = tape
            .leaf_from(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
            .unwrap();
        let b = tape.leaf(&Tensor::from_vec(vec![10.0, 20.0, 30.0]));
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(y), &[10.0, 20.0, 30.0, 11.0, 21.0, 31.0]);
    }
}
