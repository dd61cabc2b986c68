use crate::dam::SquareImage;
use crate::numerics::{argmax, NodeId, Real, Tape, Tensor};

use super::{LayoutIndex, Merge, Pooling, Result, VitConfig, VitError, VitWeights};

/// Cuts an R×R×3 image into non-overlapping P×P tiles in row-major tile
/// order. Each tile is flattened row, column, channel; tiles that would
/// cross the image boundary are dropped. Returns `[N, 3·P²]`.
pub fn extract_patches(image: &SquareImage, patch_size: usize) -> Result<Tensor<f64>> {
    let size = image.size();
    if patch_size == 0 || patch_size > size {
        return Err(VitError::Input(format!(
            "patch size {patch_size} does not fit image size {size}"
        )));
    }
    let per_side = size / patch_size;
    let n = per_side * per_side;
    let mut out = vec![0.0; n * 3 * patch_size * patch_size];
    write_patches(image, patch_size, &mut out);
    Ok(Tensor::new(vec![n, 3 * patch_size * patch_size], out)?)
}

fn write_patches<T: Real>(image: &SquareImage, p: usize, out: &mut [T]) {
    let size = image.size();
    let per_side = size / p;
    let data = image.data();
    let mut k = 0;
    for ti in 0..per_side {
        for tj in 0..per_side {
            for r in 0..p {
                let start = ((ti * p + r) * size + tj * p) * 3;
                for &v in &data[start..start + 3 * p] {
                    out[k] = T::from_f64(v);
                    k += 1;
                }
            }
        }
    }
}

/// Stacks the patches of several images into `[B·N, 3·P²]`.
pub fn patch_batch<T: Real>(images: &[&SquareImage], config: &VitConfig) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(VitError::Input("empty batch".into()));
    }
    let n = config.num_patches();
    let width = config.patch_dim();
    let mut out = vec![T::zero(); images.len() * n * width];
    for (img, chunk) in images.iter().zip(out.chunks_mut(n * width)) {
        if img.size() != config.image_size {
            return Err(VitError::Input(format!(
                "image is {0}×{0}, model expects {1}×{1}",
                img.size(),
                config.image_size
            )));
        }
        write_patches(img, config.patch_size, chunk);
    }
    Ok(Tensor::new(vec![images.len() * n, width], out)?)
}

/// `token_i = patch_i·W + b + pos_i`, for every block of `N` patch rows.
pub fn embed<T: Real>(
    tape: &mut Tape<T>,
    patches: NodeId,
    weight: NodeId,
    bias: NodeId,
    pos: NodeId,
) -> Result<NodeId> {
    let x = tape.linear(patches, weight, Some(bias))?;
    Ok(tape.add_tiled(x, pos)?)
}

/// Multi-head self-attention on every block of `block` rows of `x`:
/// per-head projections `X·W_i`, scaled dot-product attention, head
/// concatenation and output projection `W^O`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    w_o: NodeId,
    heads: usize,
    block: usize,
) -> Result<NodeId> {
    let q = tape.linear(x, w_q, None)?;
    let k = tape.linear(x, w_k, None)?;
    let v = tape.linear(x, w_v, None)?;
    let a = tape.attention(q, k, v, heads, block)?;
    Ok(tape.linear(a, w_o, None)?)
}

/// Parameter handles of one encoder block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: (NodeId, NodeId),
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub ln2: (NodeId, NodeId),
    pub mlp: Vec<(NodeId, NodeId)>,
    pub merge: Option<(NodeId, NodeId)>,
}

impl BlockParams {
    fn bind(config: &VitConfig, index: &LayoutIndex, ids: &[NodeId], block: usize) -> Self {
        let p = format!("blocks.{block}");
        let id = |name: String| ids[index.get(&name)];
        Self {
            ln1: (id(format!("{p}.ln1.gamma")), id(format!("{p}.ln1.beta"))),
            w_q: id(format!("{p}.attn.w_q")),
            w_k: id(format!("{p}.attn.w_k")),
            w_v: id(format!("{p}.attn.w_v")),
            w_o: id(format!("{p}.attn.w_o")),
            ln2: (id(format!("{p}.ln2.gamma")), id(format!("{p}.ln2.beta"))),
            mlp: (0..config.encoder_mlp_dims.len())
                .map(|j| {
                    (
                        id(format!("{p}.mlp.{j}.weight")),
                        id(format!("{p}.mlp.{j}.bias")),
                    )
                })
                .collect(),
            merge: (config.merge == Merge::ConcatProject).then(|| {
                (
                    id(format!("{p}.merge.weight")),
                    id(format!("{p}.merge.bias")),
                )
            }),
        }
    }
}

/// Dense layers with GELU between consecutive layers (none after the last).
fn mlp<T: Real>(tape: &mut Tape<T>, mut x: NodeId, layers: &[(NodeId, NodeId)]) -> Result<NodeId> {
    for (j, &(w, b)) in layers.iter().enumerate() {
        x = tape.linear(x, w, Some(b))?;
        if j + 1 < layers.len() {
            x = tape.gelu(x)?;
        }
    }
    Ok(x)
}

/// One pre-norm encoder block applied to every block of `block` token rows.
pub fn encoder_block<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    params: &BlockParams,
    config: &VitConfig,
    block: usize,
) -> Result<NodeId> {
    let eps = config.layer_norm_eps;
    let h = tape.layernorm(x, params.ln1.0, params.ln1.1, eps)?;
    let msa = multi_head(
        tape,
        h,
        params.w_q,
        params.w_k,
        params.w_v,
        params.w_o,
        config.num_heads,
        block,
    )?;
    let y = tape.add(x, msa)?;
    let h = tape.layernorm(y, params.ln2.0, params.ln2.1, eps)?;
    let m = mlp(tape, h, &params.mlp)?;
    match (config.merge, params.merge) {
        (Merge::ResidualAdd, _) => Ok(tape.add(y, m)?),
        (Merge::ConcatProject, Some((w, b))) => {
            let cat = tape.concat_cols(y, m)?;
            Ok(tape.linear(cat, w, Some(b))?)
        }
        (Merge::ConcatProject, None) => Err(VitError::Weights("missing merge projection".into())),
    }
}

/// Builds the full forward pass. `params` holds one node per array in
/// layout order; `patches` is `[batch·N, 3·P²]`. Returns logits `[batch, C]`.
pub fn forward_graph<T: Real>(
    tape: &mut Tape<T>,
    config: &VitConfig,
    params: &[NodeId],
    patches: NodeId,
    batch: usize,
) -> Result<NodeId> {
    let index = LayoutIndex::new(config);
    let id = |name: &str| params[index.get(name)];
    let n = config.num_patches();
    let shape = tape.value(patches).shape().to_vec();
    if shape != [batch * n, config.patch_dim()] {
        return Err(VitError::Input(format!(
            "patch tensor {shape:?} does not hold {batch} images of {n} patches"
        )));
    }
    let mut x = embed(
        tape,
        patches,
        id("patch_embed.weight"),
        id("patch_embed.bias"),
        id("pos_embed"),
    )?;
    if config.pooling == Pooling::ClassToken {
        x = tape.prepend_row(x, id("cls_token"), n)?;
    }
    let t = config.sequence_len();
    for b in 0..config.num_blocks {
        let bp = BlockParams::bind(config, &index, params, b);
        x = encoder_block(tape, x, &bp, config, t)?;
    }
    let pooled = match config.pooling {
        Pooling::Mean => tape.mean_rows(x, t)?,
        Pooling::ClassToken => tape.take_row(x, t, 0)?,
    };
    let head: Vec<(NodeId, NodeId)> = (0..config.head_dims.len())
        .map(|j| {
            (
                id(&format!("head.{j}.weight")),
                id(&format!("head.{j}.bias")),
            )
        })
        .collect();
    mlp(tape, pooled, &head)
}

/// Inference wrapper around immutable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VitModel<T: Real = f32> {
    weights: VitWeights<T>,
}

impl<T: Real> VitModel<T> {
    pub fn new(weights: VitWeights<T>) -> Self {
        Self { weights }
    }

    pub fn config(&self) -> &VitConfig {
        self.weights.config()
    }

    pub fn weights(&self) -> &VitWeights<T> {
        &self.weights
    }

    pub fn into_weights(self) -> VitWeights<T> {
        self.weights
    }

    /// Logits `[B, C]` for a batch of augmented images.
    pub fn logits(&self, images: &[&SquareImage]) -> Result<Tensor<T>> {
        let config = self.config();
        let patches = patch_batch::<T>(images, config)?;
        let mut tape = Tape::new();
        let params: Vec<NodeId> = self
            .weights
            .tensors()
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let input = tape.constant(patches);
        let out = forward_graph(&mut tape, config, &params, input, images.len())?;
        let logits = tape.value(out).clone();
        Ok(logits.reshape(vec![images.len(), config.num_classes])?)
    }

    /// Most likely class (first wins ties) and the raw logits.
    pub fn predict(&self, image: &SquareImage) -> Result<(usize, Vec<T>)> {
        let logits = self.logits(&[image])?.into_data();
        Ok((argmax(&logits), logits))
    }
}
