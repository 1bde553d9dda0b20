//! The query decoder: learned hierarchy-by-scene queries attend to image
//! tokens and emit one classification per hierarchy plus a scene choice.
//!
//! The decoder runs N hierarchy-independent layers, where self-attention
//! spans all H*S query rows jointly, followed by E hierarchy-dependent
//! layers, where each hierarchy's S rows attend only among themselves and
//! pass through that hierarchy's own feed-forward network. Channel 0 of each
//! query row doubles as a scene confidence; the per-hierarchy mean of
//! channel 0 forms the scene logits.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    concat_rows, cross_entropy, FeedForward, LayerNorm, Linear, MultiHeadAttention, Parameter,
    Tensor,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, TrainState};

/// Token source in front of the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderConfig {
    /// Square images patchified and run through a small pre-norm
    /// self-attention stack with learned positional embeddings.
    Patch {
        image_size: usize,
        patch_size: usize,
        depth: usize,
    },
    /// Externally produced tokens, linearly projected to the decoder width.
    Precomputed { input_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// H: number of nested partitions classified jointly.
    pub hierarchies: usize,
    /// S: scene count; 0 disables the scene channel entirely.
    pub scenes: usize,
    /// D: query/token width.
    pub dim: usize,
    pub heads: usize,
    /// N: layers whose self-attention spans all H*S rows.
    pub independent_layers: usize,
    /// E: layers whose self-attention stays within each hierarchy.
    pub dependent_layers: usize,
    pub ffn_hidden: usize,
    /// Class count per hierarchy, coarse to fine, from the partition stack.
    pub classes_per_hierarchy: Vec<usize>,
    pub encoder: EncoderConfig,
    /// Reuse the key projection as the value projection in cross-attention.
    #[serde(default)]
    pub values_from_keys: bool,
    /// Start classifier heads at zero for closed-form initial-loss checks.
    #[serde(default)]
    pub zero_init_heads: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hierarchies == 0 {
            return Err(Error::usage("hierarchies must be at least 1"));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::usage(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.independent_layers + self.dependent_layers == 0 {
            return Err(Error::usage("at least one decoder layer is required"));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::usage("ffn_hidden must be positive"));
        }
        if self.classes_per_hierarchy.len() != self.hierarchies {
            return Err(Error::usage(format!(
                "classes_per_hierarchy has {} entries for {} hierarchies",
                self.classes_per_hierarchy.len(),
                self.hierarchies
            )));
        }
        if self.classes_per_hierarchy.iter().any(|&c| c == 0) {
            return Err(Error::usage("every hierarchy needs at least one class"));
        }
        match self.encoder {
            EncoderConfig::Patch {
                image_size,
                patch_size,
                depth: _,
            } => {
                if patch_size == 0 || image_size == 0 || image_size % patch_size != 0 {
                    return Err(Error::usage(format!(
                        "image size {image_size} is not a multiple of patch size {patch_size}"
                    )));
                }
            }
            EncoderConfig::Precomputed { input_dim } => {
                if input_dim == 0 {
                    return Err(Error::usage("precomputed input_dim must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Query rows per hierarchy: S, or a single row when scenes are off.
    pub fn scene_rows(&self) -> usize {
        self.scenes.max(1)
    }

    pub fn query_rows(&self) -> usize {
        self.hierarchies * self.scene_rows()
    }

    /// Token count for the image path; None for precomputed tokens.
    pub fn token_count(&self) -> Option<usize> {
        match self.encoder {
            EncoderConfig::Patch {
                image_size,
                patch_size,
                ..
            } => {
                let g = image_size / patch_size;
                Some(g * g)
            }
            EncoderConfig::Precomputed { .. } => None,
        }
    }
}

/// One input to the model, matching the configured encoder kind.
#[derive(Clone, Debug)]
pub enum ModelInput {
    /// Image tensor [3, side, side], values in any range.
    Image(Tensor),
    /// Token tensor [T, input_dim].
    Tokens(Tensor),
}

/// Everything one forward pass produces.
#[derive(Debug)]
pub struct ForwardOutput {
    /// Per hierarchy: logits [scene_rows, C_h]; row s is the classification
    /// the model would make if the image were scene s.
    pub geo_logits: Vec<Tensor>,
    /// [S]; None when the model was built with scenes = 0.
    pub scene_logits: Option<Tensor>,
    /// Per decoder layer, first-head cross-attention [H*scene_rows, T];
    /// None unless retention was switched on.
    pub attention: Option<Vec<Tensor>>,
}

#[derive(Debug)]
struct EncoderBlock {
    ln1: LayerNorm,
    msa: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderBlock {
    fn new(prefix: &str, dim: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<EncoderBlock> {
        Ok(EncoderBlock {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), dim),
            msa: MultiHeadAttention::new(&format!("{prefix}.msa"), dim, heads, false, rng)?,
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), dim),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), dim, hidden, rng),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.msa.self_attention(&self.ln1.forward(x)?)?.out.add(x)?;
        self.ffn.forward(&self.ln2.forward(&x)?)?.add(&x)
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.ln1.params();
        p.extend(self.msa.params());
        p.extend(self.ln2.params());
        p.extend(self.ffn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.ln1.params_mut();
        p.extend(self.msa.params_mut());
        p.extend(self.ln2.params_mut());
        p.extend(self.ffn.params_mut());
        p
    }
}

#[derive(Debug)]
enum Encoder {
    Patch {
        embed: Linear,
        pos: Parameter,
        blocks: Vec<EncoderBlock>,
    },
    Precomputed {
        proj: Linear,
    },
}

/// A decoder layer whose self-attention couples all H*S query rows.
#[derive(Debug)]
struct IndependentLayer {
    ln_sa: LayerNorm,
    msa: MultiHeadAttention,
    ln_q: LayerNorm,
    ln_mem: LayerNorm,
    ca: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl IndependentLayer {
    fn new(
        prefix: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        values_from_keys: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<IndependentLayer> {
        Ok(IndependentLayer {
            ln_sa: LayerNorm::new(&format!("{prefix}.ln_sa"), dim),
            msa: MultiHeadAttention::new(&format!("{prefix}.msa"), dim, heads, false, rng)?,
            ln_q: LayerNorm::new(&format!("{prefix}.ln_q"), dim),
            ln_mem: LayerNorm::new(&format!("{prefix}.ln_mem"), dim),
            ca: MultiHeadAttention::new(&format!("{prefix}.ca"), dim, heads, values_from_keys, rng)?,
            ln_ffn: LayerNorm::new(&format!("{prefix}.ln_ffn"), dim),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), dim, hidden, rng),
        })
    }

    fn forward(&self, gq: &Tensor, mem: &Tensor) -> Result<(Tensor, Tensor)> {
        let y_sa = self
            .msa
            .self_attention(&self.ln_sa.forward(gq)?)?
            .out
            .add(gq)?;
        let mem_n = self.ln_mem.forward(mem)?;
        let ca = self.ca.forward(&self.ln_q.forward(&y_sa)?, &mem_n)?;
        let y_ca = ca.out.add(&y_sa)?;
        let out = self.ffn.forward(&self.ln_ffn.forward(&y_ca)?)?.add(&y_ca)?;
        Ok((out, ca.attn))
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.ln_sa.params();
        p.extend(self.msa.params());
        p.extend(self.ln_q.params());
        p.extend(self.ln_mem.params());
        p.extend(self.ca.params());
        p.extend(self.ln_ffn.params());
        p.extend(self.ffn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.ln_sa.params_mut();
        p.extend(self.msa.params_mut());
        p.extend(self.ln_q.params_mut());
        p.extend(self.ln_mem.params_mut());
        p.extend(self.ca.params_mut());
        p.extend(self.ln_ffn.params_mut());
        p.extend(self.ffn.params_mut());
        p
    }
}

/// A decoder layer operating on each hierarchy's rows in isolation.
///
/// Attention and norm weights are shared across hierarchies (only the
/// feed-forward carries a per-hierarchy subscript), but every computation
/// runs per hierarchy block, so rows of one hierarchy can never influence
/// another's output.
#[derive(Debug)]
struct DependentLayer {
    ln_sa: LayerNorm,
    msa: MultiHeadAttention,
    ln_q: LayerNorm,
    ln_mem: LayerNorm,
    ca: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffns: Vec<FeedForward>,
    block_rows: usize,
}

impl DependentLayer {
    fn new(
        prefix: &str,
        hierarchies: usize,
        block_rows: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
        values_from_keys: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<DependentLayer> {
        // Weight draw order matches IndependentLayer::new so that with H=1
        // the two layer kinds are bit-identical given the same rng state.
        Ok(DependentLayer {
            ln_sa: LayerNorm::new(&format!("{prefix}.ln_sa"), dim),
            msa: MultiHeadAttention::new(&format!("{prefix}.msa"), dim, heads, false, rng)?,
            ln_q: LayerNorm::new(&format!("{prefix}.ln_q"), dim),
            ln_mem: LayerNorm::new(&format!("{prefix}.ln_mem"), dim),
            ca: MultiHeadAttention::new(&format!("{prefix}.ca"), dim, heads, values_from_keys, rng)?,
            ln_ffn: LayerNorm::new(&format!("{prefix}.ln_ffn"), dim),
            ffns: (0..hierarchies)
                .map(|h| FeedForward::new(&format!("{prefix}.ffn{h}"), dim, hidden, rng))
                .collect(),
            block_rows,
        })
    }

    fn forward(&self, gq: &Tensor, mem: &Tensor) -> Result<(Tensor, Tensor)> {
        let mem_n = self.ln_mem.forward(mem)?;
        let mut outs = Vec::with_capacity(self.ffns.len());
        let mut attns = Vec::with_capacity(self.ffns.len());
        for (h, ffn) in self.ffns.iter().enumerate() {
            let block = gq.slice_rows(h * self.block_rows, self.block_rows)?;
            let y_sa = self
                .msa
                .self_attention(&self.ln_sa.forward(&block)?)?
                .out
                .add(&block)?;
            let ca = self.ca.forward(&self.ln_q.forward(&y_sa)?, &mem_n)?;
            let y_ca = ca.out.add(&y_sa)?;
            let out = ffn.forward(&self.ln_ffn.forward(&y_ca)?)?.add(&y_ca)?;
            outs.push(out);
            attns.push(ca.attn);
        }
        Ok((concat_rows(&outs)?, concat_rows(&attns)?))
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.ln_sa.params();
        p.extend(self.msa.params());
        p.extend(self.ln_q.params());
        p.extend(self.ln_mem.params());
        p.extend(self.ca.params());
        p.extend(self.ln_ffn.params());
        for ffn in &self.ffns {
            p.extend(ffn.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.ln_sa.params_mut();
        p.extend(self.msa.params_mut());
        p.extend(self.ln_q.params_mut());
        p.extend(self.ln_mem.params_mut());
        p.extend(self.ca.params_mut());
        p.extend(self.ln_ffn.params_mut());
        for ffn in &mut self.ffns {
            p.extend(ffn.params_mut());
        }
        p
    }
}

#[derive(Debug)]
pub struct GeoDecoder {
    config: ModelConfig,
    queries: Parameter,
    encoder: Encoder,
    independent: Vec<IndependentLayer>,
    dependent: Vec<DependentLayer>,
    classifiers: Vec<Linear>,
    retain_attention: bool,
}

impl GeoDecoder {
    /// Builds a freshly initialized model. The same (config, seed) pair
    /// always produces bit-identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<GeoDecoder> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let rows = config.query_rows();
        let queries = Parameter::new(
            "queries",
            Tensor::randn(vec![rows, config.dim], 0.02, &mut rng),
        );
        let encoder = match config.encoder {
            EncoderConfig::Patch {
                image_size,
                patch_size,
                depth,
            } => {
                let g = image_size / patch_size;
                let t = g * g;
                let embed = Linear::new(
                    "encoder.embed",
                    3 * patch_size * patch_size,
                    config.dim,
                    &mut rng,
                );
                let pos = Parameter::new(
                    "encoder.pos",
                    Tensor::randn(vec![t, config.dim], 0.02, &mut rng),
                );
                let blocks = (0..depth)
                    .map(|i| {
                        EncoderBlock::new(
                            &format!("encoder.block{i}"),
                            config.dim,
                            config.heads,
                            config.ffn_hidden,
                            &mut rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Encoder::Patch { embed, pos, blocks }
            }
            EncoderConfig::Precomputed { input_dim } => Encoder::Precomputed {
                proj: Linear::new("encoder.proj", input_dim, config.dim, &mut rng),
            },
        };
        let independent = (0..config.independent_layers)
            .map(|i| {
                IndependentLayer::new(
                    &format!("ind{i}"),
                    config.dim,
                    config.heads,
                    config.ffn_hidden,
                    config.values_from_keys,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let dependent = (0..config.dependent_layers)
            .map(|i| {
                DependentLayer::new(
                    &format!("dep{i}"),
                    config.hierarchies,
                    config.scene_rows(),
                    config.dim,
                    config.heads,
                    config.ffn_hidden,
                    config.values_from_keys,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let classifiers = config
            .classes_per_hierarchy
            .iter()
            .enumerate()
            .map(|(h, &c)| {
                if config.zero_init_heads {
                    Linear::zeros(&format!("head{h}"), config.dim, c)
                } else {
                    Linear::new(&format!("head{h}"), config.dim, c, &mut rng)
                }
            })
            .collect();
        Ok(GeoDecoder {
            config,
            queries,
            encoder,
            independent,
            dependent,
            classifiers,
            retain_attention: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Keep per-layer cross-attention maps in ForwardOutput.
    pub fn set_retain_attention(&mut self, on: bool) {
        self.retain_attention = on;
    }

    /// Image or token input to decoder-width tokens [T, D].
    pub fn encode(&self, input: &ModelInput) -> Result<Tensor> {
        match (&self.encoder, input) {
            (Encoder::Patch { embed, pos, blocks }, ModelInput::Image(img)) => {
                let (image_size, patch_size) = match self.config.encoder {
                    EncoderConfig::Patch {
                        image_size,
                        patch_size,
                        ..
                    } => (image_size, patch_size),
                    EncoderConfig::Precomputed { .. } => unreachable!(),
                };
                let patches = patchify(img, image_size, patch_size)?;
                let mut x = embed.forward(&patches)?.add(pos.value())?;
                for b in blocks {
                    x = b.forward(&x)?;
                }
                Ok(x)
            }
            (Encoder::Precomputed { proj }, ModelInput::Tokens(tokens)) => {
                let (_, d) = tokens.dims2("encode")?;
                if d != proj.fan_in() {
                    return Err(Error::shape(
                        "encode",
                        format!("tokens have width {d}, expected {}", proj.fan_in()),
                    ));
                }
                proj.forward(tokens)
            }
            (Encoder::Patch { .. }, ModelInput::Tokens(_)) => Err(Error::usage(
                "this model encodes images; got precomputed tokens",
            )),
            (Encoder::Precomputed { .. }, ModelInput::Image(_)) => Err(Error::usage(
                "this model ingests precomputed tokens; got an image",
            )),
        }
    }

    /// Runs the decoder stack over already-encoded tokens.
    pub fn forward_tokens(&self, tokens: &Tensor) -> Result<ForwardOutput> {
        let (_, d) = tokens.dims2("forward")?;
        if d != self.config.dim {
            return Err(Error::shape(
                "forward",
                format!("tokens width {d} != model dim {}", self.config.dim),
            ));
        }
        let mut gq = self.queries.value().clone();
        let mut maps = Vec::new();
        for layer in &self.independent {
            let (next, attn) = layer.forward(&gq, tokens)?;
            gq = next;
            if self.retain_attention {
                maps.push(attn);
            }
        }
        for layer in &self.dependent {
            let (next, attn) = layer.forward(&gq, tokens)?;
            gq = next;
            if self.retain_attention {
                maps.push(attn);
            }
        }
        let rows = self.config.scene_rows();
        let mut geo_logits = Vec::with_capacity(self.config.hierarchies);
        for (h, head) in self.classifiers.iter().enumerate() {
            let block = gq.slice_rows(h * rows, rows)?;
            geo_logits.push(head.forward(&block)?);
        }
        let scene_logits = if self.config.scenes >= 1 {
            Some(scene_logits_from_queries(
                &gq,
                self.config.hierarchies,
                self.config.scenes,
            )?)
        } else {
            None
        };
        Ok(ForwardOutput {
            geo_logits,
            scene_logits,
            attention: if self.retain_attention { Some(maps) } else { None },
        })
    }

    pub fn forward(&self, input: &ModelInput) -> Result<ForwardOutput> {
        let tokens = self.encode(input)?;
        self.forward_tokens(&tokens)
    }

    /// Per-item forwards; batch semantics are defined as exactly this.
    pub fn forward_batch(&self, inputs: &[ModelInput]) -> Result<Vec<ForwardOutput>> {
        inputs.iter().map(|i| self.forward(i)).collect()
    }

    /// Combined loss: per-hierarchy cross-entropy at the ground-truth scene
    /// row, plus scene cross-entropy when scenes are enabled.
    pub fn loss(
        &self,
        out: &ForwardOutput,
        labels: &[Option<usize>],
        scene: Option<usize>,
    ) -> Result<Tensor> {
        let h_count = self.config.hierarchies;
        if labels.len() != h_count {
            return Err(Error::data(format!(
                "{} labels for {} hierarchies",
                labels.len(),
                h_count
            )));
        }
        let row = if self.config.scenes == 0 {
            0
        } else {
            let s = scene.ok_or_else(|| Error::data("missing scene label"))?;
            if s >= self.config.scenes {
                return Err(Error::data(format!(
                    "scene label {s} out of range for {} scenes",
                    self.config.scenes
                )));
            }
            s
        };
        let mut total: Option<Tensor> = None;
        for h in 0..h_count {
            let label = labels[h]
                .ok_or_else(|| Error::data(format!("missing class label for hierarchy {h}")))?;
            let logits = out.geo_logits[h].slice_rows(row, 1)?;
            let ce = cross_entropy(&logits, &[label])?;
            total = Some(match total {
                Some(t) => t.add(&ce)?,
                None => ce,
            });
        }
        if let Some(sl) = &out.scene_logits {
            let ce = cross_entropy(&sl.reshape(vec![1, self.config.scenes])?, &[row])?;
            total = Some(match total {
                Some(t) => t.add(&ce)?,
                None => ce,
            });
        }
        total.ok_or_else(|| Error::internal("loss over zero hierarchies"))
    }

    /// First-head cross-attention row of query (h, s) at a decoder layer,
    /// as a flat [T] tensor (reshape to the patch grid for plotting).
    pub fn export_attention(
        &self,
        out: &ForwardOutput,
        layer: usize,
        h: usize,
        s: usize,
    ) -> Result<Tensor> {
        let maps = out
            .attention
            .as_ref()
            .ok_or_else(|| Error::usage("attention retention is disabled for this model"))?;
        let map = maps
            .get(layer)
            .ok_or_else(|| Error::usage(format!("layer {layer} out of range ({} layers)", maps.len())))?;
        let rows = self.config.scene_rows();
        if h >= self.config.hierarchies || s >= rows {
            return Err(Error::usage(format!(
                "query ({h}, {s}) out of range for {} hierarchies x {} rows",
                self.config.hierarchies, rows
            )));
        }
        let t = map.shape()[1];
        map.slice_rows(h * rows + s, 1)?.reshape(vec![t])
    }

    /// All learnable parameters in a stable, name-unique order.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut p = vec![&self.queries];
        match &self.encoder {
            Encoder::Patch { embed, pos, blocks } => {
                p.extend(embed.params());
                p.push(pos);
                for b in blocks {
                    p.extend(b.params());
                }
            }
            Encoder::Precomputed { proj } => p.extend(proj.params()),
        }
        for l in &self.independent {
            p.extend(l.params());
        }
        for l in &self.dependent {
            p.extend(l.params());
        }
        for c in &self.classifiers {
            p.extend(c.params());
        }
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = vec![&mut self.queries];
        match &mut self.encoder {
            Encoder::Patch { embed, pos, blocks } => {
                p.extend(embed.params_mut());
                p.push(pos);
                for b in blocks {
                    p.extend(b.params_mut());
                }
            }
            Encoder::Precomputed { proj } => p.extend(proj.params_mut()),
        }
        for l in &mut self.independent {
            p.extend(l.params_mut());
        }
        for l in &mut self.dependent {
            p.extend(l.params_mut());
        }
        for c in &mut self.classifiers {
            p.extend(c.params_mut());
        }
        p
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }
}

/// Scene logits from final query values: channel 0 of row (h, s), averaged
/// over hierarchies. gq is [(H*S), D] with row(h, s) = h*S + s.
fn scene_logits_from_queries(gq: &Tensor, hierarchies: usize, scenes: usize) -> Result<Tensor> {
    let channel0 = gq.slice_cols(0, 1)?;
    let grid = channel0.reshape(vec![hierarchies, scenes])?;
    grid.mean_rows()?.reshape(vec![scenes])
}

/// Image [3, side, side] to patch rows [T, 3*p*p], channel-major within a
/// patch. Produces a fresh leaf: inputs carry no gradient.
fn patchify(img: &Tensor, image_size: usize, patch: usize) -> Result<Tensor> {
    let shape = img.shape();
    if shape != [3, image_size, image_size] {
        return Err(Error::shape(
            "patchify",
            format!("image shape {shape:?}, expected [3, {image_size}, {image_size}]"),
        ));
    }
    let g = image_size / patch;
    let t = g * g;
    let data = img.data();
    let mut rows = Vec::with_capacity(t * 3 * patch * patch);
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        rows.push(data[c * image_size * image_size + y * image_size + x]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![t, 3 * patch * patch], rows)
}
