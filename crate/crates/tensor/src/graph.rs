//! Recording tape and reverse-mode differentiation.
//!
//! Every primitive appends one node to the tape; node inputs are always
//! earlier nodes, so the tape is topologically ordered by construction and
//! `backward` is a single reverse sweep. No op broadcasts implicitly: the
//! two row-wise ops (`add_rows`, and the gain/bias of `layer_norm`) name
//! their alignment explicitly.

use crate::error::{Result, TensorError};
use crate::tensor::{validate_shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Value written into masked-out attention logits. Finite, so the forward
/// stays NaN/Inf free, and large enough that `exp` underflows to exactly 0.
pub const MASK_VALUE: f64 = -1.0e30;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulT {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRows {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CausalMask(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    IndexRows {
        table: Var,
        ids: Vec<usize>,
    },
    GatherLast {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SquaredError(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Minimum(Var, Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// The tape: an append-only list of recorded operations plus gradient buffers.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// First node whose value contains NaN or infinity.
    first_non_finite: Option<usize>,
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("shapes are non-empty")
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m,n] += a[m,k] * b[n,k]^T
fn matmul_t_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

// out[k,n] += a[m,k]^T * b[m,n]
fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(sigmoid(x))`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        orow.iter_mut().for_each(|o| *o /= z);
    }
    out
}

fn log_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(data[offset]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floats held by the tape (node values plus saved layer-norm statistics).
    pub fn stored_floats(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                n.value.len()
                    + match &n.op {
                        Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
                        _ => 0,
                    }
            })
            .sum()
    }

    /// Like [`Graph::stored_floats`] but excluding leaves: the activations.
    pub fn activation_floats(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| {
                n.value.len()
                    + match &n.op {
                        Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
                        _ => 0,
                    }
            })
            .sum()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        if self.first_non_finite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Records a tensor as a leaf; gradients flow to it iff `requires_grad` is set.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        validate_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = self.node(x);
        let value = n.value.iter().map(|&v| f(v)).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        self.push(shape, value, op, ng)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let value = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = na.needs_grad || nb.needs_grad;
        let shape = na.shape.clone();
        Ok(self.push(shape, value, op, ng))
    }

    /// `a[.., k] x b[k, n]`: the leading dimensions of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = last_dim(&sa);
        if sb.len() != 2 || sb[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, n) = (numel(&sa) / k, sb[1]);
        let mut value = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut value, m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, value, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// `a[.., k] x b[n, k]^T`, the layout of a linear layer with weight `[out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = last_dim(&sa);
        if sb.len() != 2 || sb[1] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, n) = (numel(&sa) / k, sb[0]);
        let mut value = vec![0.0; m * n];
        matmul_t_acc(self.value(a), self.value(b), &mut value, m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, value, Op::MatMulT { a, b, m, k, n }, ng))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut value = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..batch {
            matmul_acc(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut value[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            vec![batch, m, n],
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// Elementwise `(a - b)^2`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "squared_error",
            a,
            b,
            |x, y| (x - y) * (x - y),
            Op::SquaredError(a, b),
        )
    }

    /// Adds `bias[n]` to every row of `x[.., n]`.
    pub fn add_rows(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let n = last_dim(&sx);
        if sb != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_rows",
                lhs: sx,
                rhs: sb,
            });
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(r, b)| r + b))
            .collect();
        let ng = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push(sx, value, Op::AddRows { x, bias }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v <= 0.0) {
            return Err(TensorError::NonFinite { op: "log" });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::InvalidArgument(format!(
                "clamp bounds {lo} > {hi}"
            )));
        }
        Ok(self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi }))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let value = softmax_rows(&n.value, last_dim(&n.shape));
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        self.push(shape, value, Op::Softmax(x), ng)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let value = log_softmax_rows(&n.value, last_dim(&n.shape));
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        self.push(shape, value, Op::LogSoftmax(x), ng)
    }

    /// Overwrites entries above the diagonal of the trailing `[T, T]` block
    /// with [`MASK_VALUE`].
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(TensorError::ShapeMismatch {
                op: "causal_mask",
                lhs: shape,
                rhs: vec![],
            });
        }
        let t = shape[r - 1];
        let mut value = self.value(x).to_vec();
        for block in value.chunks_mut(t * t) {
            for i in 0..t {
                for j in (i + 1)..t {
                    block[i * t + j] = MASK_VALUE;
                }
            }
        }
        let ng = self.requires_grad(x);
        Ok(self.push(shape, value, Op::CausalMask(x), ng))
    }

    /// Layer normalization over the last dimension with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = last_dim(&sx);
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sx,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = numel(&sx) / n;
        let mut xhat = Vec::with_capacity(rows * n);
        let mut rstd = Vec::with_capacity(rows);
        let mut value = Vec::with_capacity(rows * n);
        for row in self.value(x).chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                value.push(h * g[j] + b[j]);
            }
        }
        let ng = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            sx,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Gathers rows of `table[r, d]`; the embedding lookup. Output `[ids.len(), d]`.
    pub fn index_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "index_rows",
                lhs: st,
                rhs: vec![],
            });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument(
                "index_rows: empty index list".into(),
            ));
        }
        let (r, d) = (st[0], st[1]);
        let t = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "index_rows",
                    index: i,
                    extent: r,
                });
            }
            value.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let ng = self.requires_grad(table);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            Op::IndexRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Picks `x[.., idx[row]]` from every row of the last dimension.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = last_dim(&sx);
        let rows = numel(&sx) / n;
        if idx.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "gather_last",
                lhs: sx,
                rhs: vec![idx.len()],
            });
        }
        let vx = self.value(x);
        let mut value = Vec::with_capacity(rows);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_last",
                    index: i,
                    extent: n,
                });
            }
            value.push(vx[r * n + i]);
        }
        let shape = if sx.len() > 1 {
            sx[..sx.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let ng = self.requires_grad(x);
        Ok(self.push(
            shape,
            value,
            Op::GatherLast {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.requires_grad(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.requires_grad(x);
        self.push(vec![1], vec![s], Op::Mean(x), ng)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument(format!(
                "concat axis {axis} for rank {}",
                first.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "slice [{start}, {}) on axis {axis} of {sx:?}",
                start + len
            )));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let vx = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sx[axis] + start) * inner;
            value.extend_from_slice(&vx[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let ng = self.requires_grad(x);
        Ok(self.push(shape, value, Op::Slice { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        validate_shape(shape)?;
        if numel(shape) != numel(self.shape(x)) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let ng = self.requires_grad(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), ng))
    }

    /// General axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = perm.len() == sx.len()
            && perm
                .iter()
                .all(|&p| p < sx.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::InvalidArgument(format!(
                "permutation {perm:?} for shape {sx:?}"
            )));
        }
        let (value, shape) = permute_data(self.value(x), &sx, perm);
        let ng = self.requires_grad(x);
        Ok(self.push(
            shape,
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Clears every gradient buffer on the tape.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradient of `v` (if any) into `target`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        if let Some(g) = self.grad(v) {
            target.accumulate_grad(g)?;
        }
        Ok(())
    }

    fn add_grad(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, delta: Vec<f64>) {
        if !nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from the scalar `loss`. Gradients accumulate across calls.
    /// Fails if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(node) => Err(TensorError::NonFiniteNode { node }),
            None => Ok(()),
        }
    }

    /// Rejects non-scalar losses and graphs holding non-finite values.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.check_finite()?;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        // Intermediate gradients of this sweep live apart from the
        // accumulated buffers so repeated calls do not double count.
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.needs_grad {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            Self::backprop_node(nodes, &mut grads, node, &g);
        }
        Ok(())
    }

    fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
        let val = |v: Var| nodes[v.0].value.as_slice();
        let ng = |v: Var| nodes[v.0].needs_grad;
        let elementwise = |x: Var, f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..nodes[x.0].value.len()).map(|i| g[i] * f(i)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if ng(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_t_acc(g, val(b), &mut da, m, n, k);
                    Self::add_grad(grads, nodes, a, da);
                }
                if ng(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(val(a), g, &mut db, m, k, n);
                    Self::add_grad(grads, nodes, b, db);
                }
            }
            &Op::MatMulT { a, b, m, k, n } => {
                if ng(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_acc(g, val(b), &mut da, m, n, k);
                    Self::add_grad(grads, nodes, a, da);
                }
                if ng(b) {
                    // db[n,k] = g[m,n]^T a[m,k]
                    let mut db = vec![0.0; n * k];
                    matmul_tn_acc(g, val(a), &mut db, m, n, k);
                    Self::add_grad(grads, nodes, b, db);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (va, vb) = (val(a), val(b));
                if ng(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        matmul_t_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    Self::add_grad(grads, nodes, a, da);
                }
                if ng(b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        matmul_tn_acc(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    Self::add_grad(grads, nodes, b, db);
                }
            }
            &Op::Add(a, b) => {
                Self::add_grad(grads, nodes, a, g.to_vec());
                Self::add_grad(grads, nodes, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                Self::add_grad(grads, nodes, a, g.to_vec());
                Self::add_grad(grads, nodes, b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                if ng(a) {
                    Self::add_grad(grads, nodes, a, elementwise(a, &|i| vb[i]));
                }
                if ng(b) {
                    Self::add_grad(grads, nodes, b, elementwise(b, &|i| va[i]));
                }
            }
            &Op::AddRows { x, bias } => {
                Self::add_grad(grads, nodes, x, g.to_vec());
                if ng(bias) {
                    let n = nodes[bias.0].value.len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    Self::add_grad(grads, nodes, bias, db);
                }
            }
            &Op::Scale(x, c) => Self::add_grad(grads, nodes, x, g.iter().map(|v| v * c).collect()),
            &Op::AddScalar(x) => Self::add_grad(grads, nodes, x, g.to_vec()),
            &Op::Exp(x) => {
                let y = node.value.as_slice();
                Self::add_grad(grads, nodes, x, elementwise(x, &|i| y[i]));
            }
            &Op::Log(x) => {
                let vx = val(x);
                Self::add_grad(grads, nodes, x, elementwise(x, &|i| 1.0 / vx[i]));
            }
            &Op::Sigmoid(x) => {
                let y = node.value.as_slice();
                Self::add_grad(grads, nodes, x, elementwise(x, &|i| y[i] * (1.0 - y[i])));
            }
            &Op::LogSigmoid(x) => {
                let vx = val(x);
                Self::add_grad(grads, nodes, x, elementwise(x, &|i| sigmoid(-vx[i])));
            }
            &Op::Tanh(x) => {
                let y = node.value.as_slice();
                Self::add_grad(grads, nodes, x, elementwise(x, &|i| 1.0 - y[i] * y[i]));
            }
            &Op::Gelu(x) => {
                let vx = val(x);
                Self::add_grad(grads, nodes, x, elementwise(x, &|i| gelu_grad(vx[i])));
            }
            &Op::Relu(x) => {
                let vx = val(x);
                Self::add_grad(
                    grads,
                    nodes,
                    x,
                    elementwise(x, &|i| if vx[i] > 0.0 { 1.0 } else { 0.0 }),
                );
            }
            &Op::Clamp { x, lo, hi } => {
                let vx = val(x);
                Self::add_grad(
                    grads,
                    nodes,
                    x,
                    elementwise(x, &|i| if vx[i] >= lo && vx[i] <= hi { 1.0 } else { 0.0 }),
                );
            }
            &Op::Minimum(a, b) => {
                let (va, vb) = (val(a), val(b));
                // ties route the gradient to the first argument
                Self::add_grad(
                    grads,
                    nodes,
                    a,
                    elementwise(a, &|i| if va[i] <= vb[i] { 1.0 } else { 0.0 }),
                );
                Self::add_grad(
                    grads,
                    nodes,
                    b,
                    elementwise(b, &|i| if va[i] <= vb[i] { 0.0 } else { 1.0 }),
                );
            }
            &Op::SquaredError(a, b) => {
                let (va, vb) = (val(a), val(b));
                let d: Vec<f64> = (0..va.len())
                    .map(|i| 2.0 * (va[i] - vb[i]) * g[i])
                    .collect();
                if ng(b) {
                    Self::add_grad(grads, nodes, b, d.iter().map(|v| -v).collect());
                }
                Self::add_grad(grads, nodes, a, d);
            }
            &Op::Softmax(x) => {
                let y = node.value.as_slice();
                let n = last_dim(&node.shape);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                Self::add_grad(grads, nodes, x, dx);
            }
            &Op::LogSoftmax(x) => {
                let y = node.value.as_slice();
                let n = last_dim(&node.shape);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                Self::add_grad(grads, nodes, x, dx);
            }
            &Op::CausalMask(x) => {
                let t = last_dim(&node.shape);
                let mut dx = g.to_vec();
                for block in dx.chunks_mut(t * t) {
                    for i in 0..t {
                        for j in (i + 1)..t {
                            block[i * t + j] = 0.0;
                        }
                    }
                }
                Self::add_grad(grads, nodes, x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = last_dim(&node.shape);
                let gv = val(*gain);
                if ng(*gain) {
                    let mut dg = vec![0.0; n];
                    for (hr, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            dg[j] += hr[j] * gr[j];
                        }
                    }
                    Self::add_grad(grads, nodes, *gain, dg);
                }
                if ng(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(d, r)| *d += r);
                    }
                    Self::add_grad(grads, nodes, *bias, db);
                }
                if ng(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, ((hr, gr), dr)) in xhat
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(dx.chunks_mut(n))
                        .enumerate()
                    {
                        let dh: Vec<f64> = (0..n).map(|j| gr[j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dr[j] = rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    Self::add_grad(grads, nodes, *x, dx);
                }
            }
            Op::IndexRows { table, ids } => {
                if ng(*table) {
                    let d = nodes[table.0].shape[1];
                    let mut dt = vec![0.0; nodes[table.0].value.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[r * d + j];
                        }
                    }
                    Self::add_grad(grads, nodes, *table, dt);
                }
            }
            Op::GatherLast { x, idx } => {
                let n = last_dim(&nodes[x.0].shape);
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * n + i] += g[r];
                }
                Self::add_grad(grads, nodes, *x, dx);
            }
            &Op::Sum(x) => {
                let len = nodes[x.0].value.len();
                Self::add_grad(grads, nodes, x, vec![g[0]; len]);
            }
            &Op::Mean(x) => {
                let len = nodes[x.0].value.len();
                Self::add_grad(grads, nodes, x, vec![g[0] / len as f64; len]);
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let width = nodes[v.0].shape[*axis];
                    if ng(v) {
                        let mut dv = Vec::with_capacity(nodes[v.0].value.len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[base..base + width * inner]);
                        }
                        Self::add_grad(grads, nodes, v, dv);
                    }
                    offset += width;
                }
            }
            &Op::Slice { x, axis, start } => {
                let sx = &nodes[x.0].shape;
                let outer: usize = sx[..axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let len = node.shape[axis];
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for o in 0..outer {
                    let base = (o * sx[axis] + start) * inner;
                    let src = o * len * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                Self::add_grad(grads, nodes, x, dx);
            }
            &Op::Reshape(x) => Self::add_grad(grads, nodes, x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (dx, _) = permute_data(g, &node.shape, &inverse);
                Self::add_grad(grads, nodes, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
            .unwrap()
            .with_grad(true)
    }

    #[test]
    fn primitive_values() {
        let mut g = Graph::new();
        let z = g.param(&t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s), &[0.5]);

        let x = g.param(&t(&[3], &[1.0, 1.0, 1.0]));
        let sm = g.softmax(x);
        for &p in g.value(sm) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let a = g.param(&Tensor::ones(&[2, 3]));
        let b = g.param(&Tensor::ones(&[3, 2]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert_eq!(g.value(c), &[3.0; 4]);
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::ones(&[2, 3]));
        let b = g.param(&Tensor::ones(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let c = g.param(&Tensor::ones(&[3]));
        assert!(matches!(
            g.add(a, c),
            Err(TensorError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn sum_gives_ones_and_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 4]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn mse_at_target_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[0.3, -1.0, 2.0]));
        let target = g.constant(&Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap());
        let se = g.squared_error(x, target).unwrap();
        let loss = g.mean(se);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        assert_eq!(g.backward(x), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn permute_roundtrip_and_slice_concat() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.param(&t(&[2, 3, 4], &data));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // p[i, j, k] = x[j, k, i]
        assert_eq!(g.value(p)[6 + 3 + 2], data[12 + 2 * 4 + 1]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), &data[..]);

        let a = g.slice(x, 1, 0, 1).unwrap();
        let b = g.slice(x, 1, 1, 2).unwrap();
        let joined = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(joined), &data[..]);
    }

    #[test]
    fn causal_mask_zeroes_future_attention() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2, 2], &[0.3, 0.7, 0.1, 0.2]));
        let m = g.causal_mask(x).unwrap();
        let p = g.softmax(m);
        assert_eq!(g.value(p)[0], 1.0);
        assert_eq!(g.value(p)[1], 0.0);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }
}
