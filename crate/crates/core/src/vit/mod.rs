//! Vision transformer over square RSSI images: patching, embedding,
//! multi-head self-attention encoder blocks, pooling and an MLP head.

pub mod checkpoint;
mod model;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Real, Tensor};

pub use model::{
    embed, encoder_block, extract_patches, forward_graph, multi_head, patch_batch, BlockParams,
    VitModel,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum VitError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input does not match the model: {0}")]
    Input(String),
    #[error("weights do not match the config: {0}")]
    Weights(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, VitError>;

/// Upper bound on any single extent; keeps shape arithmetic far from overflow.
pub const MAX_EXTENT: usize = 1 << 16;
pub const MAX_LAYERS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    ClassToken,
}

/// How the attention and MLP sub-block outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Merge {
    /// `y = x + MSA(LN(x)); z = y + MLP(LN(y))`.
    #[default]
    ResidualAdd,
    /// `y = x + MSA(LN(x)); z = [y ‖ MLP(LN(y))]·W + b`.
    ConcatProject,
}

/// Complete architecture of one model, including its class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_blocks: usize,
    pub encoder_mlp_dims: Vec<usize>,
    /// Head layer widths; the last one equals `num_classes`.
    pub head_dims: Vec<usize>,
    pub num_classes: usize,
    pub pooling: Pooling,
    pub merge: Merge,
    pub layer_norm_eps: f64,
}

impl VitConfig {
    /// Number of tokens produced by patching (boundary patches dropped).
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Tokens seen by the encoder, including the class token if any.
    pub fn sequence_len(&self) -> usize {
        self.num_patches() + usize::from(self.pooling == Pooling::ClassToken)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn attention_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VitError::Config(m));
        let extents = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("num_blocks", self.num_blocks),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in extents {
            if v == 0 || v > MAX_EXTENT {
                return bad(format!("{name} must lie in 1..={MAX_EXTENT}"));
            }
        }
        let lists = [&self.encoder_mlp_dims, &self.head_dims];
        if lists
            .iter()
            .any(|l| l.len() > MAX_LAYERS || l.iter().any(|&v| v > MAX_EXTENT))
        {
            return bad(format!(
                "layer lists are limited to {MAX_LAYERS} entries of at most {MAX_EXTENT}"
            ));
        }
        if self.num_blocks > MAX_LAYERS {
            return bad(format!("num_blocks is limited to {MAX_LAYERS}"));
        }
        if self.patch_size > self.image_size {
            return bad(format!(
                "patch_size {} exceeds image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.encoder_mlp_dims.is_empty() || self.encoder_mlp_dims.contains(&0) {
            return bad("encoder_mlp_dims must be non-empty and positive".into());
        }
        if self.merge == Merge::ResidualAdd && self.encoder_mlp_dims.last() != Some(&self.embed_dim)
        {
            return bad(format!(
                "last encoder MLP width {} must equal embed_dim {} for residual_add",
                self.encoder_mlp_dims.last().unwrap(),
                self.embed_dim
            ));
        }
        if self.head_dims.contains(&0) || self.head_dims.last() != Some(&self.num_classes) {
            return bad(format!(
                "head_dims {:?} must be positive and end with num_classes {}",
                self.head_dims, self.num_classes
            ));
        }
        if !(self.layer_norm_eps.is_finite() && self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// Architecture settings without the data-dependent class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_blocks: usize,
    pub encoder_mlp_dims: Vec<usize>,
    /// Hidden head widths; the class layer is appended by [`ModelSpec::build`].
    pub head_hidden_dims: Vec<usize>,
    pub pooling: Pooling,
    pub merge: Merge,
    pub layer_norm_eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            image_size: 206,
            patch_size: 20,
            embed_dim: 64,
            num_heads: 5,
            head_dim: 16,
            num_blocks: 1,
            encoder_mlp_dims: vec![128, 64],
            head_hidden_dims: vec![128],
            pooling: Pooling::Mean,
            merge: Merge::ResidualAdd,
            layer_norm_eps: 1e-6,
        }
    }
}

impl ModelSpec {
    /// Reduced configuration used for desk-scale experiments.
    pub fn scaled() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            ..Self::default()
        }
    }

    pub fn build(&self, num_classes: usize) -> Result<VitConfig> {
        let mut head_dims = self.head_hidden_dims.clone();
        head_dims.push(num_classes);
        let config = VitConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            num_blocks: self.num_blocks,
            encoder_mlp_dims: self.encoder_mlp_dims.clone(),
            head_dims,
            num_classes,
            pooling: self.pooling,
            merge: self.merge,
            layer_norm_eps: self.layer_norm_eps,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over a `[fan_in, fan_out]` matrix.
    Glorot,
    /// Normal(0, 0.02).
    Small,
}

/// Name and shape of one trainable array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn layout_with_init(config: &VitConfig) -> Vec<(ParamSpec, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        out.push((ParamSpec { name, shape }, init));
    };
    let d = config.embed_dim;
    let aw = config.attention_width();
    push(
        "patch_embed.weight".into(),
        vec![config.patch_dim(), d],
        Init::Glorot,
    );
    push("patch_embed.bias".into(), vec![d], Init::Zeros);
    push(
        "pos_embed".into(),
        vec![config.num_patches(), d],
        Init::Small,
    );
    if config.pooling == Pooling::ClassToken {
        push("cls_token".into(), vec![d], Init::Small);
    }
    for b in 0..config.num_blocks {
        let p = format!("blocks.{b}");
        push(format!("{p}.ln1.gamma"), vec![d], Init::Ones);
        push(format!("{p}.ln1.beta"), vec![d], Init::Zeros);
        for w in ["w_q", "w_k", "w_v"] {
            push(format!("{p}.attn.{w}"), vec![d, aw], Init::Glorot);
        }
        push(format!("{p}.attn.w_o"), vec![aw, d], Init::Glorot);
        push(format!("{p}.ln2.gamma"), vec![d], Init::Ones);
        push(format!("{p}.ln2.beta"), vec![d], Init::Zeros);
        let mut fan_in = d;
        for (j, &width) in config.encoder_mlp_dims.iter().enumerate() {
            push(
                format!("{p}.mlp.{j}.weight"),
                vec![fan_in, width],
                Init::Glorot,
            );
            push(format!("{p}.mlp.{j}.bias"), vec![width], Init::Zeros);
            fan_in = width;
        }
        if config.merge == Merge::ConcatProject {
            push(
                format!("{p}.merge.weight"),
                vec![d + fan_in, d],
                Init::Glorot,
            );
            push(format!("{p}.merge.bias"), vec![d], Init::Zeros);
        }
    }
    let mut fan_in = d;
    for (j, &width) in config.head_dims.iter().enumerate() {
        push(
            format!("head.{j}.weight"),
            vec![fan_in, width],
            Init::Glorot,
        );
        push(format!("head.{j}.bias"), vec![width], Init::Zeros);
        fan_in = width;
    }
    out
}

/// Ordered list of every trainable array the config implies.
pub fn param_layout(config: &VitConfig) -> Vec<ParamSpec> {
    layout_with_init(config)
        .into_iter()
        .map(|(s, _)| s)
        .collect()
}

/// Total number of trainable scalars.
pub fn param_count(config: &VitConfig) -> usize {
    param_layout(config).iter().map(ParamSpec::len).sum()
}

/// All trainable arrays of one model, in [`param_layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights<T: Real = f32> {
    config: VitConfig,
    layout: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> VitWeights<T> {
    /// Seeded initialization: Glorot-uniform matrices, zero biases, unit
    /// LayerNorm scales, N(0, 0.02) embeddings.
    pub fn init(config: &VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        let specs = layout_with_init(config);
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, init) in &specs {
            let t = match init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
                Init::Small => {
                    Tensor::from_fn(&spec.shape, |_| T::from_f64(small.sample(&mut rng)))
                }
                Init::Glorot => {
                    let limit = (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit);
                    Tensor::from_fn(&spec.shape, |_| T::from_f64(dist.sample(&mut rng)))
                }
            };
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            layout: specs.into_iter().map(|(s, _)| s).collect(),
            tensors,
        })
    }

    /// Every array zero except LayerNorm scales, which are one.
    pub fn zeros(config: &VitConfig) -> Result<Self> {
        config.validate()?;
        let specs = layout_with_init(config);
        let tensors = specs
            .iter()
            .map(|(s, init)| match init {
                Init::Ones => Tensor::ones(&s.shape),
                _ => Tensor::zeros(&s.shape),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout: specs.into_iter().map(|(s, _)| s).collect(),
            tensors,
        })
    }

    pub fn from_tensors(config: &VitConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(config);
        if layout.len() != tensors.len() {
            return Err(VitError::Weights(format!(
                "expected {} arrays, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (spec, t) in layout.iter().zip(&tensors) {
            if t.shape() != spec.shape.as_slice() {
                return Err(VitError::Weights(format!(
                    "{} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            if !t.all_finite() {
                return Err(VitError::Weights(format!("{} is not finite", spec.name)));
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> VitWeights<U> {
        VitWeights {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Name → position lookup shared by graph builders.
pub(crate) struct LayoutIndex {
    positions: HashMap<String, usize>,
}

impl LayoutIndex {
    pub(crate) fn new(config: &VitConfig) -> Self {
        Self {
            positions: param_layout(config)
                .into_iter()
                .enumerate()
                .map(|(i, s)| (s.name, i))
                .collect(),
        }
    }

    pub(crate) fn get(&self, name: &str) -> usize {
        self.positions[name]
    }
}
