//! Raw slice kernels shared by the forward and adjoint passes.

/// Row-major strided view of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `[rows x cols]` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }
}

/// `out[m x n] = beta * out + a[m x k] * b[k x n]`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, out: &mut [f64]) {
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|o| *o *= beta);
        return;
    }
    assert!(a.data.len() >= (m - 1) * a.row_stride + (k - 1) * a.col_stride + 1);
    assert!(b.data.len() >= (k - 1) * b.row_stride + (n - 1) * b.col_stride + 1);
    // SAFETY: bounds of all three operands are asserted above for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Max-subtracted softmax of one row, written into `out`.
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// `log(sum(exp(x)))` computed around the row max.
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Geometry of a fused causal self-attention call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Causal multi-head attention over packed `qkv` rows `[B*T x 3D]`.
///
/// Returns the `[B*T x D]` output and the attention probabilities
/// `[B x H x T x T]` (entries above the diagonal are zero).
pub(crate) fn attention_forward(qkv: &[f64], dims: AttnDims) -> (Vec<f64>, Vec<f64>) {
    let AttnDims {
        batch,
        seq,
        heads,
        head_dim,
    } = dims;
    let d = dims.model_dim();
    let stride = 3 * d;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; batch * seq * d];
    let mut probs = vec![0.0; batch * heads * seq * seq];
    let mut scores = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let p_base = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let q = &qkv[(b * seq + i) * stride + h * head_dim..][..head_dim];
                for j in 0..=i {
                    let k = &qkv[(b * seq + j) * stride + d + h * head_dim..][..head_dim];
                    scores[j] = scale * dot(q, k);
                }
                let row = &mut probs[p_base + i * seq..][..seq];
                softmax_row(&scores[..=i], &mut row[..=i]);
                let o = &mut out[(b * seq + i) * d + h * head_dim..][..head_dim];
                for j in 0..=i {
                    let v = &qkv[(b * seq + j) * stride + 2 * d + h * head_dim..][..head_dim];
                    let p = row[j];
                    o.iter_mut().zip(v).for_each(|(o, v)| *o += p * v);
                }
            }
        }
    }
    (out, probs)
}

/// Adjoint of [`attention_forward`]; accumulates into `dqkv`.
pub(crate) fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    dout: &[f64],
    dims: AttnDims,
    dqkv: &mut [f64],
) {
    let AttnDims {
        batch,
        seq,
        heads,
        head_dim,
    } = dims;
    let d = dims.model_dim();
    let stride = 3 * d;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let p_base = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let row = &probs[p_base + i * seq..][..seq];
                let dout_i = &dout[(b * seq + i) * d + h * head_dim..][..head_dim];
                // dP[i, j] = dO_i . V_j ; dV_j += P[i, j] dO_i
                for j in 0..=i {
                    let v_off = (b * seq + j) * stride + 2 * d + h * head_dim;
                    dp[j] = dot(dout_i, &qkv[v_off..][..head_dim]);
                    let p = row[j];
                    dqkv[v_off..][..head_dim]
                        .iter_mut()
                        .zip(dout_i)
                        .for_each(|(g, o)| *g += p * o);
                }
                let weighted: f64 = (0..=i).map(|j| dp[j] * row[j]).sum();
                let q_off = (b * seq + i) * stride + h * head_dim;
                for j in 0..=i {
                    let ds = row[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k_off = (b * seq + j) * stride + d + h * head_dim;
                    for c in 0..head_dim {
                        dqkv[q_off + c] += ds * qkv[k_off + c];
                        dqkv[k_off + c] += ds * qkv[q_off + c];
                    }
                }
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm(2, 2, 2, MatRef::transposed(&a, 2), MatRef::rows(&b, 2), 0.0, &mut out);
        // a^T b = [[1*5+3*7, 1*6+3*8],[2*5+4*7, 2*6+4*8]]
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, MatRef::rows(&a, 2), MatRef::transposed(&b, 2), 1.0, &mut out);
        // + a b^T = [[17,23],[39,53]]
        assert_eq!(out, [43.0, 53.0, 77.0, 97.0]);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-2.0, -0.7, 0.0, 0.3, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
