//! Dense row-major tensors over f64 with a recorded op graph.
//!
//! Values are immutable once produced. Every op allocates a fresh tensor that
//! keeps handles to its inputs, so the backward pass can replay the graph in
//! reverse. Storage is always f64; a global precision switch rounds every
//! stored element to the nearest f32 when 32-bit mode is selected, while
//! accumulations inside kernels still run in f64.

use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

/// Storage precision for newly produced tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

static PRECISION: AtomicU8 = AtomicU8::new(0);
static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Selects the global storage precision. Affects tensors created after the
/// call; existing tensors keep their values. Not intended to be toggled while
/// other threads are producing tensors.
pub fn set_precision(p: Precision) {
    let v = match p {
        Precision::F64 => 0,
        Precision::F32 => 1,
    };
    PRECISION.store(v, Ordering::Relaxed);
}

pub fn precision() -> Precision {
    if PRECISION.load(Ordering::Relaxed) == 0 {
        Precision::F64
    } else {
        Precision::F32
    }
}

/// Differentiable ops recorded in the graph. Each variant holds the input
/// tensors it needs to compute vector-Jacobian products.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    /// [R,C] plus a length-C row vector broadcast over rows.
    AddRow(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Softmax {
        x: Tensor,
        axis: usize,
    },
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    },
    Gelu(Tensor),
    /// Fused mean cross-entropy over rows of `logits`.
    CrossEntropy {
        logits: Tensor,
        targets: Vec<usize>,
    },
    SliceRows {
        x: Tensor,
        start: usize,
    },
    SliceCols {
        x: Tensor,
        start: usize,
    },
    ConcatRows(Vec<Tensor>),
    ConcatCols(Vec<Tensor>),
    Reshape(Tensor),
    MeanRows(Tensor),
    SumAll(Tensor),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::Matmul(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _) => vec![a],
            Op::Transpose(a) => vec![a],
            Op::Softmax { x, .. } => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Gelu(a) => vec![a],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![x],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().collect(),
            Op::Reshape(a) => vec![a],
            Op::MeanRows(a) => vec![a],
            Op::SumAll(a) => vec![a],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Inner {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Handle to an immutable tensor value plus its provenance in the op graph.
/// Cloning is cheap (reference count bump).
#[derive(Clone, Debug)]
pub struct Tensor(pub(crate) Arc<Inner>);

impl Tensor {
    /// Internal constructor: applies the global precision rounding and
    /// assigns a fresh graph id.
    pub(crate) fn make(shape: Vec<usize>, mut data: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        if precision() == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            op,
            requires_grad,
        }))
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "from_vec",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != len {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {numel} elements, got {len}"),
            ));
        }
        Ok(())
    }

    /// Builds a constant leaf tensor. Rejects empty shapes, length
    /// disagreements, and non-finite values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        Self::check_shape(&shape, data.len())?;
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite tensor element {v}")));
        }
        Ok(Tensor::make(shape, data, Op::Leaf, false))
    }

    /// 2-D convenience constructor from row slices; all rows must have equal
    /// length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::shape("from_rows", "no rows".to_string()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows".to_string()));
        }
        Tensor::from_vec(vec![rows.len(), cols], rows.concat())
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::make(vec![1], vec![v], Op::Leaf, false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::make(shape, vec![0.0; n], Op::Leaf, false)
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::make(shape, vec![1.0; n], Op::Leaf, false)
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::make(shape, vec![v; n], Op::Leaf, false)
    }

    /// Normal samples (Box-Muller) with mean 0 and the given standard
    /// deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // u1 in (0, 1] so the log is finite.
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random::<f64>();
                std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Tensor::make(shape, data, Op::Leaf, false)
    }

    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::make(shape, data, Op::Leaf, false)
    }

    /// Fresh leaf with the same values that participates in gradient
    /// computation. Any op history of `self` is dropped.
    pub fn tracked(&self) -> Tensor {
        Tensor::make(self.shape().to_vec(), self.data().to_vec(), Op::Leaf, true)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Scalar extraction; errors unless the tensor holds exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected a single element, shape is {:?}", self.shape()),
            ));
        }
        Ok(self.0.data[0])
    }

    /// Element of a 2-D tensor by (row, col).
    pub fn get2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 2);
        self.0.data[row * self.0.shape[1] + col]
    }

    /// (rows, cols) of a 2-D tensor; errors otherwise.
    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.ndim() != 2 {
            return Err(Error::shape(
                op,
                format!("expected 2-D tensor, got shape {:?}", self.shape()),
            ));
        }
        Ok((self.0.shape[0], self.0.shape[1]))
    }
}
