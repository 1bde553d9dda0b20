//! Forward kernels. Every op validates shapes, computes its value in f64,
//! and records itself in the graph for the backward pass.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Op, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::make(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::make(
            self.shape().to_vec(),
            data,
            Op::Sub(self.clone(), other.clone()),
            self.requires_grad() || other.requires_grad(),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::make(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * c).collect();
        Tensor::make(
            self.shape().to_vec(),
            data,
            Op::Scale(self.clone(), c),
            self.requires_grad(),
        )
    }

    /// Adds a row vector to every row of a 2-D tensor. `row` may be shaped
    /// [C] or [1, C].
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("add_row")?;
        if row.numel() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(), row.shape()),
            ));
        }
        let rv = row.data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(self.data()[i * c + j] + rv[j]);
            }
        }
        Ok(Tensor::make(
            vec![r, c],
            data,
            Op::AddRow(self.clone(), row.clone()),
            self.requires_grad() || row.requires_grad(),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = a[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        Ok(Tensor::make(
            vec![m, n],
            out,
            Op::Matmul(self.clone(), other.clone()),
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data()[i * c + j];
            }
        }
        Ok(Tensor::make(
            vec![c, r],
            out,
            Op::Transpose(self.clone()),
            self.requires_grad(),
        ))
    }

    /// Numerically stable softmax along `axis`. For 1-D tensors the only
    /// valid axis is 0; for 2-D, axis 1 normalizes each row, axis 0 each
    /// column.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} invalid for shape {:?}", self.shape()),
            ));
        }
        let (lanes, lane_len, stride, lane_start): (usize, usize, usize, Vec<usize>) =
            match (self.ndim(), axis) {
                (1, 0) => (1, self.numel(), 1, vec![0]),
                (2, 1) => {
                    let (r, c) = (self.shape()[0], self.shape()[1]);
                    (r, c, 1, (0..r).map(|i| i * c).collect())
                }
                (2, 0) => {
                    let (r, c) = (self.shape()[0], self.shape()[1]);
                    (c, r, c, (0..c).collect())
                }
                _ => {
                    return Err(Error::shape(
                        "softmax",
                        format!("unsupported shape {:?}", self.shape()),
                    ))
                }
            };
        let x = self.data();
        let mut out = vec![0.0; self.numel()];
        for lane in 0..lanes {
            let s = lane_start[lane];
            let mut max = f64::NEG_INFINITY;
            for i in 0..lane_len {
                max = max.max(x[s + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..lane_len {
                let e = (x[s + i * stride] - max).exp();
                out[s + i * stride] = e;
                sum += e;
            }
            for i in 0..lane_len {
                out[s + i * stride] /= sum;
            }
        }
        Ok(Tensor::make(
            self.shape().to_vec(),
            out,
            Op::Softmax {
                x: self.clone(),
                axis,
            },
            self.requires_grad(),
        ))
    }

    /// Per-row layer normalization of a 2-D (or single-row 1-D) tensor:
    /// zero mean, unit variance (biased estimator, eps inside the sqrt),
    /// then scale by `gamma` and shift by `beta` (both length C).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = if self.ndim() == 1 {
            (1, self.numel())
        } else {
            self.dims2("layer_norm")?
        };
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::usage(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let x = self.data();
        let g = gamma.data();
        let b = beta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        Ok(Tensor::make(
            self.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
            self.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
        ))
    }

    /// GELU with the tanh approximation (smooth everywhere, which keeps
    /// finite-difference checks tight).
    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| gelu_scalar(v)).collect();
        Tensor::make(
            self.shape().to_vec(),
            data,
            Op::Gelu(self.clone()),
            self.requires_grad(),
        )
    }

    /// Rows [start, start+len) of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows [{start}, {}) out of {r}", start + len),
            ));
        }
        let data = self.data()[start * c..(start + len) * c].to_vec();
        Ok(Tensor::make(
            vec![len, c],
            data,
            Op::SliceRows {
                x: self.clone(),
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols [{start}, {}) out of {c}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data()[i * c + start..i * c + start + len]);
        }
        Ok(Tensor::make(
            vec![r, len],
            data,
            Op::SliceCols {
                x: self.clone(),
                start,
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::make(
            shape,
            self.data().to_vec(),
            Op::Reshape(self.clone()),
            self.requires_grad(),
        ))
    }

    /// Column means of a 2-D tensor, shape [1, C].
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("mean_rows")?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.data()[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        Ok(Tensor::make(
            vec![1, c],
            out,
            Op::MeanRows(self.clone()),
            self.requires_grad(),
        ))
    }

    /// Sum of all elements, as a [1] tensor.
    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::make(
            vec![1],
            vec![s],
            Op::SumAll(self.clone()),
            self.requires_grad(),
        )
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Stacks 2-D tensors with equal column counts on top of each other.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_rows", "no inputs".to_string()));
    }
    let (_, c) = parts[0].dims2("concat_rows")?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, pc) = p.dims2("concat_rows")?;
        if pc != c {
            return Err(Error::shape(
                "concat_rows",
                format!("column counts differ: {c} vs {pc}"),
            ));
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(Tensor::make(
        vec![rows, c],
        data,
        Op::ConcatRows(parts.to_vec()),
        rg,
    ))
}

/// Joins 2-D tensors with equal row counts side by side.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_cols", "no inputs".to_string()));
    }
    let (r, _) = parts[0].dims2("concat_cols")?;
    let mut cols = 0;
    for p in parts {
        let (pr, pc) = p.dims2("concat_cols")?;
        if pr != r {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts differ: {r} vs {pr}"),
            ));
        }
        cols += pc;
    }
    let mut data = Vec::with_capacity(r * cols);
    for i in 0..r {
        for p in parts {
            let pc = p.shape()[1];
            data.extend_from_slice(&p.data()[i * pc..(i + 1) * pc]);
        }
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(Tensor::make(
        vec![r, cols],
        data,
        Op::ConcatCols(parts.to_vec()),
        rg,
    ))
}

/// Mean cross-entropy of row logits against integer targets:
/// mean_i( logsumexp(logits[i]) - logits[i][targets[i]] ).
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2("cross_entropy")?;
    if targets.len() != b {
        return Err(Error::shape(
            "cross_entropy",
            format!("{b} logit rows but {} targets", targets.len()),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::data(format!(
            "cross_entropy: target {t} out of range for {c} classes"
        )));
    }
    let x = logits.data();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &x[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(Tensor::make(
        vec![1],
        vec![total / b as f64],
        Op::CrossEntropy {
            logits: logits.clone(),
            targets: targets.to_vec(),
        },
        logits.requires_grad(),
    ))
}
