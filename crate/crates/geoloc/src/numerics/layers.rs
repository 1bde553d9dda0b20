//! Attention building blocks: linear projections, layer norm, feed-forward,
//! and multi-head attention with pre-norm residual usage in mind.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::concat_cols;
use crate::numerics::param::Parameter;
use crate::numerics::tensor::Tensor;

/// Affine map x[R,in] -> x.W + b with W[in,out], b[out].
#[derive(Debug)]
pub struct Linear {
    weight: Parameter,
    bias: Parameter,
    fan_in: usize,
    fan_out: usize,
}

impl Linear {
    /// Weights and bias drawn from U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Tensor::rand_uniform(vec![fan_in, fan_out], -bound, bound, rng);
        let bias = Tensor::rand_uniform(vec![fan_out], -bound, bound, rng);
        Linear {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
            fan_in,
            fan_out,
        }
    }

    /// All-zero weights and bias (used for zero-initialized classifier
    /// heads).
    pub fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: Parameter::new(format!("{name}.weight"), Tensor::zeros(vec![fan_in, fan_out])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
            fan_in,
            fan_out,
        }
    }

    /// Explicit weights, for tests and closed-form constructions.
    pub fn from_values(name: &str, weight: Tensor, bias: Tensor) -> Result<Linear> {
        let (fan_in, fan_out) = weight.dims2("linear weight")?;
        if bias.numel() != fan_out {
            return Err(Error::shape(
                "linear bias",
                format!("{} vs fan_out {}", bias.numel(), fan_out),
            ));
        }
        Ok(Linear {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(self.weight.value())?.add_row(self.bias.value())
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Learned per-feature scale and shift around row normalization.
#[derive(Debug)]
pub struct LayerNorm {
    gamma: Parameter,
    beta: Parameter,
    eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::ones(vec![dim])),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(vec![dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(self.gamma.value(), self.beta.value(), self.eps)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Two-layer GELU MLP: D -> hidden -> D.
#[derive(Debug)]
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> FeedForward {
        FeedForward {
            lin1: Linear::new(&format!("{name}.lin1"), dim, hidden, rng),
            lin2: Linear::new(&format!("{name}.lin2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.lin2.forward(&self.lin1.forward(x)?.gelu())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.lin1.params();
        p.extend(self.lin2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.lin1.params_mut();
        p.extend(self.lin2.params_mut());
        p
    }
}

/// Attention core: softmax(q k^T / sqrt(d_k)) v.
///
/// Returns the output and the attention probability matrix [Tq, Tk]; rows of
/// the matrix sum to 1.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, dk) = q.dims2("attention")?;
    let (tk, dk2) = k.dims2("attention")?;
    if dk != dk2 {
        return Err(Error::shape(
            "attention",
            format!("q {:?} vs k {:?}", q.shape(), k.shape()),
        ));
    }
    let (tv, _) = v.dims2("attention")?;
    if tv != tk {
        return Err(Error::shape(
            "attention",
            format!("k {:?} vs v {:?}", k.shape(), v.shape()),
        ));
    }
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (dk as f64).sqrt());
    let probs = scores.softmax(1)?;
    let out = probs.matmul(v)?;
    Ok((out, probs))
}

/// Output of one multi-head attention application.
pub struct AttnOutput {
    pub out: Tensor,
    /// First head's attention probabilities [Tq, Tk] (what attention export
    /// reports).
    pub attn: Tensor,
}

/// Multi-head attention with learned Q/K/V/output projections.
///
/// With `values_from_keys` the value path reuses the key projection
/// (softmax(QK^T/sqrt(d_k))K), the literal form of the cross-attention
/// definition this model family is described with; the default is a separate
/// V projection.
#[derive(Debug)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Option<Linear>,
    wo: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        name: &str,
        dim: usize,
        heads: usize,
        values_from_keys: bool,
        rng: &mut impl Rng,
    ) -> Result<MultiHeadAttention> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::usage(format!(
                "attention dim {dim} is not divisible into {heads} heads"
            )));
        }
        let wq = Linear::new(&format!("{name}.wq"), dim, dim, rng);
        let wk = Linear::new(&format!("{name}.wk"), dim, dim, rng);
        let wv = if values_from_keys {
            None
        } else {
            Some(Linear::new(&format!("{name}.wv"), dim, dim, rng))
        };
        let wo = Linear::new(&format!("{name}.wo"), dim, dim, rng);
        Ok(MultiHeadAttention {
            wq,
            wk,
            wv,
            wo,
            heads,
            dim,
        })
    }

    /// Explicit projections, for closed-form tests. `wv: None` reuses keys as
    /// values.
    pub fn from_linears(
        wq: Linear,
        wk: Linear,
        wv: Option<Linear>,
        wo: Linear,
        heads: usize,
    ) -> Result<MultiHeadAttention> {
        let dim = wq.fan_out();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::usage(format!(
                "attention dim {dim} is not divisible into {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq,
            wk,
            wv,
            wo,
            heads,
            dim,
        })
    }

    /// Cross-attention of `queries` against `memory`; self-attention is the
    /// `queries == memory` case.
    pub fn forward(&self, queries: &Tensor, memory: &Tensor) -> Result<AttnOutput> {
        let q = self.wq.forward(queries)?;
        let k = self.wk.forward(memory)?;
        let v = match &self.wv {
            Some(wv) => wv.forward(memory)?,
            None => k.clone(),
        };
        let dh = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut first_attn = None;
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let (oh, probs) = scaled_dot_attention(&qh, &kh, &vh)?;
            if h == 0 {
                first_attn = Some(probs);
            }
            outs.push(oh);
        }
        let out = self.wo.forward(&concat_cols(&outs)?)?;
        Ok(AttnOutput {
            out,
            attn: first_attn.expect("at least one head"),
        })
    }

    pub fn self_attention(&self, x: &Tensor) -> Result<AttnOutput> {
        self.forward(x, x)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.wq.params();
        p.extend(self.wk.params());
        if let Some(wv) = &self.wv {
            p.extend(wv.params());
        }
        p.extend(self.wo.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.wq.params_mut();
        p.extend(self.wk.params_mut());
        if let Some(wv) = &mut self.wv {
            p.extend(wv.params_mut());
        }
        p.extend(self.wo.params_mut());
        p
    }
}
