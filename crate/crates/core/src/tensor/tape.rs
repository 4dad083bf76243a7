use rand::Rng;

use super::kernels::{self, AttnDims, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Affine { x: Var, scale: f64 },
    Gelu(Var),
    Relu(Var),
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Attention { qkv: Var, dims: AttnDims, probs: Vec<f64> },
    StraightThrough { soft: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every input of node `i` has an
/// index below `i` and a single reverse sweep visits each node after all of its
/// consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Records a copy of `t` as a gradient-requiring leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::new(t.shape(), t.data().to_vec()).expect("consistent tensor");
        value.set_requires_grad(true);
        self.push(value, Op::Leaf, true)
    }

    /// Records a copy of `t` that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("consistent tensor");
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.set_requires_grad(needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, x: Var, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let needs = self.any_grad(&[x]);
        self.push(Tensor::new(&shape, data).expect("shape preserved"), op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            MatRef::rows(self.data(a), k),
            MatRef::rows(self.data(b), n),
            0.0,
            &mut out,
        );
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.unary(x, vec![cols, rows], out, Op::Transpose { x, rows, cols }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_grad(&[a, b]);
        self.push(Tensor::new(&shape, data).expect("same shape"), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a `[D]` bias to every row of `x[..., D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::AddBias { x, bias }, needs))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let data = self.data(x).iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        self.unary(x, shape, data, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.unary(x, shape, data, op)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// Natural log; every input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Numeric {
                op: "ln",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map(x, f64::ln, Op::Ln(x)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = self.value(x).last_dim();
        let src = self.data(x);
        if let Some(bad) = src.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: format!("non-finite input {bad}"),
            });
        }
        let mut out = vec![0.0; src.len()];
        for (row, o) in src.chunks(k).zip(out.chunks_mut(k)) {
            kernels::softmax_row(row, o);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.unary(x, shape, out, Op::Softmax(x)))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let rows = src.len() / d.max(1);
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..][..d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().copied().map(Some).collect();
        self.cross_entropy_masked(logits, &t)
    }

    /// Like [`Tape::cross_entropy`], skipping rows whose target is `None`.
    /// The mean is taken over the unmasked rows.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim("cross_entropy", s, &[targets.len()]));
        }
        let k = s[1];
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: k,
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy needs at least one target".into()));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = &src[r * k..][..k];
            if let Some(t) = *t {
                total += kernels::log_sum_exp(row) - row[t];
                kernels::softmax_row(row, &mut probs[r * k..][..k]);
            }
        }
        let loss = total / count as f64;
        let needs = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    /// Gathers rows of a `[V x D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::dim("embedding", s, &[]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                op: "embedding",
                index: bad,
                bound: v,
            });
        }
        let src = self.data(table);
        let data = ids.iter().flat_map(|&i| src[i * d..][..d].iter().copied()).collect();
        Ok(self.unary(
            table,
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.unary(x, shape.to_vec(), data, Op::Reshape(x)))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let needs = self.any_grad(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.unary(x, vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        self.unary(x, vec![], vec![s], Op::Mean(x))
    }

    /// Inverted dropout. A zero rate returns `x` without recording anything.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.unary(x, shape, data, Op::Dropout { x, mask }))
    }

    /// Causal multi-head self-attention over packed `[B*T x 3D]` rows
    /// (queries, keys, values side by side). Position `t` only attends to
    /// positions `<= t`.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(qkv);
        if s.len() != 2 || s[0] != batch * seq || heads == 0 || s[1] % (3 * heads) != 0 {
            return Err(Error::dim("causal_attention", s, &[batch * seq, 3 * heads]));
        }
        let d = s[1] / 3;
        let dims = AttnDims {
            batch,
            seq,
            heads,
            head_dim: d / heads,
        };
        let (out, probs) = kernels::attention_forward(self.data(qkv), dims);
        Ok(self.unary(qkv, vec![batch * seq, d], out, Op::Attention { qkv, dims, probs }))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::dim("straight_through", self.shape(soft), hard.shape()));
        }
        let shape = hard.shape().to_vec();
        Ok(self.unary(soft, shape, hard.into_data(), Op::StraightThrough { soft }))
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Gradients are added to whatever is already stored, so calling this
    /// twice without [`Tape::zero_grad`] doubles every gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("root {} is not on this tape", root.0)));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if let Some(a) = a {
                node.value.accumulate_grad(&a);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = grad_slot(nodes, adj, $v) {
                    $body
                }
            };
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                with_grad!(a, |ga| {
                    kernels::gemm(m, n, k, MatRef::rows(g, n), MatRef::transposed(val(b), n), 1.0, ga);
                });
                with_grad!(b, |gb| {
                    kernels::gemm(k, m, n, MatRef::transposed(val(a), k), MatRef::rows(g, n), 1.0, gb);
                });
            }
            &Op::Transpose { x, rows, cols } => with_grad!(x, |gx| {
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            &Op::Add(a, b) => {
                with_grad!(a, |ga| add_into(ga, g));
                with_grad!(b, |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                with_grad!(a, |ga| add_into(ga, g));
                with_grad!(b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(o, g)| *o -= g);
                });
            }
            &Op::Mul(a, b) => {
                with_grad!(a, |ga| {
                    zip3(ga, g, val(b), |g, y| g * y);
                });
                with_grad!(b, |gb| {
                    zip3(gb, g, val(a), |g, x| g * x);
                });
            }
            &Op::AddBias { x, bias } => {
                with_grad!(x, |gx| add_into(gx, g));
                with_grad!(bias, |gb| {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::Affine { x, scale } => with_grad!(x, |gx| {
                gx.iter_mut().zip(g).for_each(|(o, g)| *o += scale * g);
            }),
            &Op::Gelu(x) => with_grad!(x, |gx| zip3(gx, g, val(x), |g, v| g * kernels::gelu_grad(v))),
            &Op::Relu(x) => with_grad!(x, |gx| zip3(gx, g, val(x), |g, v| if v > 0.0 { g } else { 0.0 })),
            &Op::LeakyRelu { x, slope } => with_grad!(x, |gx| {
                zip3(gx, g, val(x), |g, v| if v > 0.0 { g } else { slope * g })
            }),
            &Op::Sigmoid(x) => with_grad!(x, |gx| zip3(gx, g, node.value.data(), |g, y| g * y * (1.0 - y))),
            &Op::Ln(x) => with_grad!(x, |gx| zip3(gx, g, val(x), |g, v| g / v)),
            &Op::Clamp { x, lo, hi } => with_grad!(x, |gx| {
                zip3(gx, g, val(x), |g, v| if v >= lo && v <= hi { g } else { 0.0 })
            }),
            &Op::Softmax(x) => with_grad!(x, |gx| {
                let k = node.value.last_dim();
                let y = node.value.data();
                for ((gx, g), y) in gx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                    let dotp = kernels::dot(g, y);
                    for c in 0..k {
                        gx[c] += y[c] * (g[c] - dotp);
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gam = val(*gamma);
                with_grad!(*x, |gx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gy = &g[r * d..][..d];
                        let xh = &xhat[r * d..][..d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            let dxh = gy[c] * gam[c];
                            s1 += dxh;
                            s2 += dxh * xh[c];
                        }
                        let inv_d = 1.0 / d as f64;
                        for c in 0..d {
                            let dxh = gy[c] * gam[c];
                            gx[r * d + c] += rs * (dxh - inv_d * s1 - xh[c] * inv_d * s2);
                        }
                    }
                });
                with_grad!(*gamma, |gg| {
                    for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gy[c] * xh[c];
                        }
                    }
                });
                with_grad!(*beta, |gb| {
                    for gy in g.chunks(d) {
                        add_into(gb, gy);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => with_grad!(*logits, |gl| {
                let k = nodes[logits.0].value.last_dim();
                let w = g[0] / *count as f64;
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &mut gl[r * k..][..k];
                        for c in 0..k {
                            row[c] += w * probs[r * k + c];
                        }
                        row[t] -= w;
                    }
                }
            }),
            Op::Embedding { table, ids } => with_grad!(*table, |gt| {
                let d = node.value.last_dim();
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..][..d], &g[r * d..][..d]);
                }
            }),
            &Op::Reshape(x) => with_grad!(x, |gx| add_into(gx, g)),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    with_grad!(p, |gp| add_into(gp, &g[off..][..n]));
                    off += n;
                }
            }
            &Op::Sum(x) => with_grad!(x, |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean(x) => with_grad!(x, |gx| {
                let w = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|o| *o += w);
            }),
            Op::Dropout { x, mask } => with_grad!(*x, |gx| zip3(gx, g, mask, |g, m| g * m)),
            Op::Attention { qkv, dims, probs } => with_grad!(*qkv, |gq| {
                kernels::attention_backward(val(*qkv), probs, g, *dims, gq);
            }),
            &Op::StraightThrough { soft } => with_grad!(soft, |gs| add_into(gs, g)),
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip3(dst: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &g), &o) in dst.iter_mut().zip(g).zip(other) {
        *d += f(g, o);
    }
}
