//! Reverse-mode differentiation over the recorded op graph.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::numerics::ops::gelu_grad_scalar;
use crate::numerics::tensor::{Op, Tensor};

/// Gradients of one backward pass, keyed by tensor identity. Only tensors on
/// a path from a grad-requiring leaf to the loss appear.
pub struct Gradients {
    map: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` participated.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

}

/// Computes d(loss)/d(x) for every grad-requiring tensor reachable from
/// `loss`. The loss must hold exactly one element. Repeated calls produce
/// independent `Gradients`; accumulation across calls happens in
/// `Parameter::accumulate`.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::shape(
            "backward",
            format!("loss must be scalar, shape is {:?}", loss.shape()),
        ));
    }
    let order = topo_order(loss);
    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);
    for node in order.iter().rev() {
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        propagate(node, &g, &mut grads);
    }
    Ok(Gradients { map: grads })
}

/// Iterative post-order over grad-requiring nodes: inputs precede consumers.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for input in t.0.op.inputs() {
            if input.requires_grad() && !visited.contains(&input.id()) {
                stack.push((input.clone(), false));
            }
        }
    }
    order
}

fn accumulate(grads: &mut HashMap<u64, Vec<f64>>, t: &Tensor, contribution: &[f64]) {
    if !t.requires_grad() {
        return;
    }
    let entry = grads
        .entry(t.id())
        .or_insert_with(|| vec![0.0; t.numel()]);
    for (e, c) in entry.iter_mut().zip(contribution) {
        *e += c;
    }
}

/// Vector-Jacobian product of one node: distributes `g` (gradient w.r.t. the
/// node's output) onto the node's inputs.
fn propagate(node: &Tensor, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    match &node.0.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, a, g);
            accumulate(grads, b, g);
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(grads, b, &neg);
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
            let db: Vec<f64> = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
            accumulate(grads, a, &da);
            accumulate(grads, b, &db);
        }
        Op::Scale(a, c) => {
            let da: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(grads, a, &da);
        }
        Op::AddRow(a, row) => {
            accumulate(grads, a, g);
            let c = row.numel();
            let r = a.shape()[0];
            let mut drow = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    drow[j] += g[i * c + j];
                }
            }
            accumulate(grads, row, &drow);
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                // dA = g . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            da[i * k + kk] += gij * b.data()[kk * n + j];
                        }
                    }
                }
                accumulate(grads, a, &da);
            }
            if b.requires_grad() {
                // dB = A^T . g
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let aik = a.data()[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[kk * n + j] += aik * g[i * n + j];
                        }
                    }
                }
                accumulate(grads, b, &db);
            }
        }
        Op::Transpose(a) => {
            let (c, r) = (node.shape()[0], node.shape()[1]);
            let mut da = vec![0.0; r * c];
            for i in 0..c {
                for j in 0..r {
                    da[j * c + i] = g[i * r + j];
                }
            }
            accumulate(grads, a, &da);
        }
        Op::Softmax { x, axis } => {
            let y = node.data();
            let mut dx = vec![0.0; y.len()];
            let lanes: Vec<(usize, usize, usize)> = match (node.ndim(), axis) {
                (1, 0) => vec![(0, y.len(), 1)],
                (2, 1) => {
                    let (r, c) = (node.shape()[0], node.shape()[1]);
                    (0..r).map(|i| (i * c, c, 1)).collect()
                }
                (2, 0) => {
                    let (r, c) = (node.shape()[0], node.shape()[1]);
                    (0..c).map(|j| (j, r, c)).collect()
                }
                _ => unreachable!("softmax forward validated the shape"),
            };
            for (start, len, stride) in lanes {
                let mut dot = 0.0;
                for i in 0..len {
                    let idx = start + i * stride;
                    dot += g[idx] * y[idx];
                }
                for i in 0..len {
                    let idx = start + i * stride;
                    dx[idx] = y[idx] * (g[idx] - dot);
                }
            }
            accumulate(grads, x, &dx);
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (r, c) = if x.ndim() == 1 {
                (1, x.numel())
            } else {
                (x.shape()[0], x.shape()[1])
            };
            let xd = x.data();
            let gam = gamma.data();
            let mut dx = vec![0.0; r * c];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                let grow = &g[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                let gh: Vec<f64> = grow.iter().zip(gam).map(|(g, w)| g * w).collect();
                let mean_gh = gh.iter().sum::<f64>() / c as f64;
                let mean_gh_xhat =
                    gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    dx[i * c + j] = (gh[j] - mean_gh - xhat[j] * mean_gh_xhat) * inv;
                    dgamma[j] += grow[j] * xhat[j];
                    dbeta[j] += grow[j];
                }
            }
            accumulate(grads, x, &dx);
            accumulate(grads, gamma, &dgamma);
            accumulate(grads, beta, &dbeta);
        }
        Op::Gelu(a) => {
            let dx: Vec<f64> = g
                .iter()
                .zip(a.data())
                .map(|(g, &x)| g * gelu_grad_scalar(x))
                .collect();
            accumulate(grads, a, &dx);
        }
        Op::CrossEntropy { logits, targets } => {
            let (b, c) = (logits.shape()[0], logits.shape()[1]);
            let g0 = g[0];
            let x = logits.data();
            let mut dl = vec![0.0; b * c];
            for (i, &t) in targets.iter().enumerate() {
                let row = &x[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for j in 0..c {
                    let p = (row[j] - max).exp() / sum;
                    let delta = if j == t { 1.0 } else { 0.0 };
                    dl[i * c + j] = g0 * (p - delta) / b as f64;
                }
            }
            accumulate(grads, logits, &dl);
        }
        Op::SliceRows { x, start } => {
            let c = x.shape()[1];
            let mut dx = vec![0.0; x.numel()];
            dx[start * c..start * c + g.len()].copy_from_slice(g);
            accumulate(grads, x, &dx);
        }
        Op::SliceCols { x, start } => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let len = node.shape()[1];
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..len {
                    dx[i * c + start + j] = g[i * len + j];
                }
            }
            accumulate(grads, x, &dx);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = p.numel();
                accumulate(grads, p, &g[offset..offset + n]);
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let r = node.shape()[0];
            let total = node.shape()[1];
            let mut col_offset = 0;
            for p in parts {
                let pc = p.shape()[1];
                if p.requires_grad() {
                    let mut dp = vec![0.0; r * pc];
                    for i in 0..r {
                        for j in 0..pc {
                            dp[i * pc + j] = g[i * total + col_offset + j];
                        }
                    }
                    accumulate(grads, p, &dp);
                }
                col_offset += pc;
            }
        }
        Op::Reshape(a) => {
            accumulate(grads, a, g);
        }
        Op::MeanRows(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    da[i * c + j] = g[j] / r as f64;
                }
            }
            accumulate(grads, a, &da);
        }
        Op::SumAll(a) => {
            let da = vec![g[0]; a.numel()];
            accumulate(grads, a, &da);
        }
    }
}
