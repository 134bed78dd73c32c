//! Differentiable operations on [`Tensor`].
//!
//! Shapes are strict: binary elementwise ops require identical shapes, there
//! is no implicit broadcasting. Matrix ops view a 1-D tensor of length c as a
//! single row [1, c].

use super::{Inner, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("operands differ: {:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

/// Elementwise binary op. `dfa`/`dfb` give the partial derivative of one
/// output element with respect to the matching input element.
fn ew_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    dfa: impl Fn(f64, f64) -> f64 + 'static,
    dfb: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let values: Vec<f64> = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_op(
        op,
        a.shape().to_vec(),
        values,
        vec![a.clone(), b.clone()],
        Box::new(move |dout, ctx: &Inner| {
            let av = ctx.parent_values(0);
            let bv = ctx.parent_values(1);
            let ga = ctx.parent_tracks(0).then(|| {
                dout.iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&d, (&x, &y))| d * dfa(x, y))
                    .collect()
            });
            let gb = ctx.parent_tracks(1).then(|| {
                dout.iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&d, (&x, &y))| d * dfb(x, y))
                    .collect()
            });
            vec![ga, gb]
        }),
    )
}

/// Elementwise unary op. `df` sees the input element and the produced output
/// element, whichever is cheaper to differentiate through.
fn ew_unary(
    op: &'static str,
    a: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let values: Vec<f64> = a.values().iter().map(|&x| f(x)).collect();
    Tensor::from_op(
        op,
        a.shape().to_vec(),
        values,
        vec![a.clone()],
        Box::new(move |dout, ctx: &Inner| {
            let av = ctx.parent_values(0);
            let ov = ctx.out_values();
            let g = dout
                .iter()
                .zip(av.iter().zip(ov))
                .map(|(&d, (&x, &y))| d * df(x, y))
                .collect();
            vec![Some(g)]
        }),
    )
}

// Plain row-major matrix products. `mm` is A[m,k]·B[k,n], `mm_nt` is
// A[m,k]·Bᵀ with B[n,k], `mm_tn` is Aᵀ·B with A[p,m], B[p,n].
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn mm_tn(a: &[f64], b: &[f64], p: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        ew_binary("add", self, other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        ew_binary("sub", self, other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        ew_binary("mul", self, other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        ew_binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    /// Elementwise maximum. Ties send the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        ew_binary(
            "maximum",
            self,
            other,
            |a, b| a.max(b),
            |a, b| if a >= b { 1.0 } else { 0.0 },
            |a, b| if a >= b { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise minimum. Ties send the gradient to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        ew_binary(
            "minimum",
            self,
            other,
            |a, b| a.min(b),
            |a, b| if a <= b { 1.0 } else { 0.0 },
            |a, b| if a <= b { 0.0 } else { 1.0 },
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        ew_unary("add_scalar", self, move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        ew_unary("mul_scalar", self, move |x| x * c, move |_, _| c)
    }

    /// Elementwise x^p for constant p.
    pub fn powf_const(&self, p: f64) -> Result<Tensor> {
        ew_unary(
            "powf_const",
            self,
            move |x| x.powf(p),
            move |x, _| {
                if p == 0.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            },
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        ew_unary(
            "relu",
            self,
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn abs(&self) -> Result<Tensor> {
        ew_unary(
            "abs",
            self,
            |x| x.abs(),
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        ew_unary("exp", self, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor> {
        ew_unary("ln", self, |x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        ew_unary("sqrt", self, |x| x.sqrt(), |_, y| 0.5 / y)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        ew_unary(
            "sigmoid",
            self,
            |x| 1.0 / (1.0 + (-x).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    /// ln(1 + e^x), evaluated as max(x, 0) + ln(1 + e^-|x|) so large |x|
    /// neither overflows nor loses the tail.
    pub fn softplus(&self) -> Result<Tensor> {
        ew_unary(
            "softplus",
            self,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.values().iter().sum();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(|dout, ctx: &Inner| {
                let n = ctx.parent_values(0).len();
                vec![Some(vec![dout[0]; n])]
            }),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let total: f64 = self.values().iter().sum();
        Tensor::from_op(
            "mean",
            vec![1],
            vec![total / n as f64],
            vec![self.clone()],
            Box::new(move |dout, _| vec![Some(vec![dout[0] / n as f64; n])]),
        )
    }

    /// Column means of a matrix: [r, c] -> [c].
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols();
        if r == 0 || c == 0 {
            return Err(Error::invalid("mean_rows", "empty tensor"));
        }
        let v = self.values();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += v[i * c + j];
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        Tensor::from_op(
            "mean_rows",
            vec![c],
            out,
            vec![self.clone()],
            Box::new(move |dout, _| {
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = dout[j] / r as f64;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// A[m,k] · B[k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols();
        let (k2, n) = other.rows_cols();
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let values = mm(self.values(), other.values(), m, k, n);
        Tensor::from_op(
            "matmul",
            vec![m, n],
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |dout, ctx: &Inner| {
                let a = ctx.parent_values(0);
                let b = ctx.parent_values(1);
                let ga = ctx
                    .parent_tracks(0)
                    .then(|| mm_nt(dout, b, m, n, k));
                let gb = ctx
                    .parent_tracks(1)
                    .then(|| mm_tn(a, dout, m, k, n));
                vec![ga, gb]
            }),
        )
    }

    /// A[m,k] · Bᵀ with B[n,k] -> [m,n]. Rows of B act as keys.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols();
        let (n, k2) = other.rows_cols();
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("inner dims differ: {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let values = mm_nt(self.values(), other.values(), m, k, n);
        Tensor::from_op(
            "matmul_nt",
            vec![m, n],
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |dout, ctx: &Inner| {
                let a = ctx.parent_values(0);
                let b = ctx.parent_values(1);
                let ga = ctx.parent_tracks(0).then(|| mm(dout, b, m, n, k));
                let gb = ctx.parent_tracks(1).then(|| mm_tn(dout, a, m, n, k));
                vec![ga, gb]
            }),
        )
    }

    /// Affine map y = x·Wᵀ + b with x[r,in], W[out,in], b[out] -> [r,out].
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (r, d_in) = self.rows_cols();
        let (d_out, d_in2) = weight.rows_cols();
        if d_in != d_in2 || bias.numel() != d_out {
            return Err(Error::shape(
                "linear",
                format!(
                    "x {:?}, weight {:?}, bias {:?} are inconsistent",
                    self.shape(),
                    weight.shape(),
                    bias.shape()
                ),
            ));
        }
        let mut values = mm_nt(self.values(), weight.values(), r, d_in, d_out);
        let bv = bias.values();
        for i in 0..r {
            for o in 0..d_out {
                values[i * d_out + o] += bv[o];
            }
        }
        Tensor::from_op(
            "linear",
            vec![r, d_out],
            values,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |dout, ctx: &Inner| {
                let x = ctx.parent_values(0);
                let w = ctx.parent_values(1);
                let gx = ctx.parent_tracks(0).then(|| mm(dout, w, r, d_out, d_in));
                let gw = ctx
                    .parent_tracks(1)
                    .then(|| mm_tn(dout, x, r, d_out, d_in));
                let gb = ctx.parent_tracks(2).then(|| {
                    let mut g = vec![0.0; d_out];
                    for i in 0..r {
                        for o in 0..d_out {
                            g[o] += dout[i * d_out + o];
                        }
                    }
                    g
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Per-row normalization y = (x - mu) / sqrt(var + eps) * gamma + beta.
    /// Variance is the biased (population) estimate over the row.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = self.rows_cols();
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?} with gamma {:?}, beta {:?}",
                    self.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let x = self.values();
        let g = gamma.values();
        let b = beta.values();
        let mut values = vec![0.0; r * c];
        // Cache per-row inverse sigma and the normalized row for backward.
        let mut inv_sigma = vec![0.0; r];
        let mut xhat = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                values[i * c + j] = h * g[j] + b[j];
            }
        }
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            values,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |dout, ctx: &Inner| {
                let g = ctx.parent_values(1);
                let gx = ctx.parent_tracks(0).then(|| {
                    let mut grad = vec![0.0; r * c];
                    for i in 0..r {
                        let dh: Vec<f64> =
                            (0..c).map(|j| dout[i * c + j] * g[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh
                            .iter()
                            .enumerate()
                            .map(|(j, v)| v * xhat[i * c + j])
                            .sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            grad[i * c + j] = inv_sigma[i]
                                * (dh[j] - mean_dh - xhat[i * c + j] * mean_dh_h);
                        }
                    }
                    grad
                });
                let gg = ctx.parent_tracks(1).then(|| {
                    let mut grad = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            grad[j] += dout[i * c + j] * xhat[i * c + j];
                        }
                    }
                    grad
                });
                let gb = ctx.parent_tracks(2).then(|| {
                    let mut grad = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            grad[j] += dout[i * c + j];
                        }
                    }
                    grad
                });
                vec![gx, gg, gb]
            }),
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols();
        let x = self.values();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                values[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                values[i * c + j] /= z;
            }
        }
        Tensor::from_op(
            "softmax_rows",
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |dout, ctx: &Inner| {
                let y = ctx.out_values();
                let mut grad = vec![0.0; r * c];
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| dout[i * c + j] * y[i * c + j]).sum();
                    for j in 0..c {
                        grad[i * c + j] = y[i * c + j] * (dout[i * c + j] - dot);
                    }
                }
                vec![Some(grad)]
            }),
        )
    }

    /// Row-wise log-softmax, the safe path to log-probabilities.
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols();
        let x = self.values();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                values[i * c + j] = row[j] - lse;
            }
        }
        Tensor::from_op(
            "log_softmax_rows",
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |dout, ctx: &Inner| {
                let y = ctx.out_values();
                let mut grad = vec![0.0; r * c];
                for i in 0..r {
                    let dsum: f64 = (0..c).map(|j| dout[i * c + j]).sum();
                    for j in 0..c {
                        grad[i * c + j] = dout[i * c + j] - y[i * c + j].exp() * dsum;
                    }
                }
                vec![Some(grad)]
            }),
        )
    }

    /// Row-wise y = x / max(||x||, eps).
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let (r, c) = self.rows_cols();
        let x = self.values();
        let mut values = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms[i] = n;
            for j in 0..c {
                values[i * c + j] = row[j] / n;
            }
        }
        Tensor::from_op(
            "l2_normalize_rows",
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |dout, ctx: &Inner| {
                let x = ctx.parent_values(0);
                let y = ctx.out_values();
                let mut grad = vec![0.0; r * c];
                for i in 0..r {
                    let n = norms[i];
                    let raw = x[i * c..(i + 1) * c]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    if raw < n {
                        // clamped: norm acts as a constant
                        for j in 0..c {
                            grad[i * c + j] = dout[i * c + j] / n;
                        }
                        continue;
                    }
                    let dot: f64 = (0..c).map(|j| dout[i * c + j] * y[i * c + j]).sum();
                    for j in 0..c {
                        grad[i * c + j] = (dout[i * c + j] - y[i * c + j] * dot) / n;
                    }
                }
                vec![Some(grad)]
            }),
        )
    }

    /// [r, c] -> [c, r].
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols();
        let x = self.values();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = x[i * c + j];
            }
        }
        Tensor::from_op(
            "transpose",
            vec![c, r],
            values,
            vec![self.clone()],
            Box::new(move |dout, _| {
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = dout[j * r + i];
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(), shape),
            ));
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.values().to_vec(),
            vec![self.clone()],
            Box::new(|dout, _| vec![Some(dout.to_vec())]),
        )
    }

    /// Columns [start, end) of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.rows_cols();
        if start > end || end > c {
            return Err(Error::invalid(
                "slice_cols",
                format!("range {start}..{end} out of {c} columns"),
            ));
        }
        let w = end - start;
        let x = self.values();
        let mut values = vec![0.0; r * w];
        for i in 0..r {
            values[i * w..(i + 1) * w].copy_from_slice(&x[i * c + start..i * c + end]);
        }
        Tensor::from_op(
            "slice_cols",
            vec![r, w],
            values,
            vec![self.clone()],
            Box::new(move |dout, _| {
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    g[i * c + start..i * c + end].copy_from_slice(&dout[i * w..(i + 1) * w]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Selected rows, in order, repeats allowed. Backward scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = self.rows_cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of {r}"),
            ));
        }
        let x = self.values();
        let k = indices.len();
        let mut values = vec![0.0; k * c];
        for (o, &i) in indices.iter().enumerate() {
            values[o * c..(o + 1) * c].copy_from_slice(&x[i * c..(i + 1) * c]);
        }
        let idx = indices.to_vec();
        Tensor::from_op(
            "gather_rows",
            vec![k, c],
            values,
            vec![self.clone()],
            Box::new(move |dout, _| {
                let mut g = vec![0.0; r * c];
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        g[i * c + j] += dout[o * c + j];
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Single row as a 1-D tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (_, c) = self.rows_cols();
        self.gather_rows(&[i])?.reshape(&[c])
    }
}

/// Stack matrices vertically. 1-D inputs count as single rows.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_rows", "no inputs"));
    }
    let (_, c) = parts[0].rows_cols();
    let mut total_rows = 0;
    for p in parts {
        let (r, pc) = p.rows_cols();
        if pc != c {
            return Err(Error::shape(
                "concat_rows",
                format!("column counts differ: {} vs {}", c, pc),
            ));
        }
        total_rows += r;
    }
    let mut values = Vec::with_capacity(total_rows * c);
    for p in parts {
        values.extend_from_slice(p.values());
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    Tensor::from_op(
        "concat_rows",
        vec![total_rows, c],
        values,
        parts.to_vec(),
        Box::new(move |dout, _| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut off = 0;
            for &n in &sizes {
                out.push(Some(dout[off..off + n].to_vec()));
                off += n;
            }
            out
        }),
    )
}

/// Concatenate along columns. The result is 1-D iff every input is 1-D.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_cols", "no inputs"));
    }
    let (rows, _) = parts[0].rows_cols();
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.rows_cols();
        if r != rows {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts differ: {} vs {}", rows, r),
            ));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut values = vec![0.0; rows * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pv = p.values();
        for i in 0..rows {
            values[i * total + off..i * total + off + w]
                .copy_from_slice(&pv[i * w..(i + 1) * w]);
        }
        off += w;
    }
    let all_1d = parts.iter().all(|p| p.shape().len() == 1);
    let shape = if all_1d && rows == 1 {
        vec![total]
    } else {
        vec![rows, total]
    };
    let widths_b = widths.clone();
    Tensor::from_op(
        "concat_cols",
        shape,
        values,
        parts.to_vec(),
        Box::new(move |dout, _| {
            let mut out = Vec::with_capacity(widths_b.len());
            let mut off = 0;
            for &w in &widths_b {
                let mut g = vec![0.0; rows * w];
                for i in 0..rows {
                    g[i * w..(i + 1) * w]
                        .copy_from_slice(&dout[i * total + off..i * total + off + w]);
                }
                out.push(Some(g));
                off += w;
            }
            out
        }),
    )
}
