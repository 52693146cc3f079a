//! Compact Vision Transformer: patch embedding, interpolatable learned
//! positional encodings, pre-norm transformer blocks, single-pass forward
//! at arbitrary patch-divisible resolution, and a backward pass through
//! the trainable tail.

mod backward;
mod forward;
mod params;

pub use backward::{backward_tail, ParamGrads};
pub use forward::{forward, forward_window, interpolate_pos_encodings};
pub use params::{init_params, load_checkpoint, save_checkpoint};

use std::collections::BTreeSet;

use crate::{Result, SparError};

/// LayerNorm variance epsilon.
pub(crate) const LN_EPS: f64 = 1e-6;

/// Architecture hyperparameters. `native_side` is the square pre-training
/// resolution K; the positional grid has side `K / patch_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub native_side: usize,
    /// Feature dimension d.
    pub channels: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// MLP hidden width as a multiple of `channels`.
    pub mlp_ratio: f64,
    /// Replace the final block's attention matrix with the identity, so
    /// each token attends only to itself while the value and output
    /// projections still apply.
    pub last_attention_identity: bool,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.native_side == 0 || self.channels == 0 {
            return Err(SparError::InvalidArgument(
                "patch size, native side and channels must be positive".into(),
            ));
        }
        if self.native_side % self.patch_size != 0 {
            return Err(SparError::InvalidArgument(format!(
                "native side {} must be divisible by patch size {}",
                self.native_side, self.patch_size
            )));
        }
        if self.num_blocks == 0 || self.num_heads == 0 || self.channels % self.num_heads != 0 {
            return Err(SparError::InvalidArgument(format!(
                "channels {} must be divisible by num_heads {}",
                self.channels, self.num_heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return Err(SparError::InvalidArgument(format!(
                "mlp ratio {} yields an empty hidden layer",
                self.mlp_ratio
            )));
        }
        Ok(())
    }

    /// Positional-grid side k = K / P.
    pub fn grid_side(&self) -> usize {
        self.native_side / self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.channels as f64).round() as usize
    }

    /// Patch vector length fed to the projection: 3 * P * P.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Dense parameter tensor with explicit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Param {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// One transformer block's weights. Linear weights are stored row-major
/// as `[out_dim, in_dim]`, applied as `y = x * W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Param,
    pub ln1_beta: Param,
    /// Packed query/key/value projection, rows `[0,d) | [d,2d) | [2d,3d)`.
    pub qkv_weight: Param,
    pub qkv_bias: Param,
    pub attn_out_weight: Param,
    pub attn_out_bias: Param,
    pub ln2_gamma: Param,
    pub ln2_beta: Param,
    pub fc1_weight: Param,
    pub fc1_bias: Param,
    pub fc2_weight: Param,
    pub fc2_bias: Param,
}

/// Names of the twelve per-block tensors in canonical order.
pub(crate) const BLOCK_FIELDS: [&str; 12] = [
    "ln1.gamma",
    "ln1.beta",
    "qkv.weight",
    "qkv.bias",
    "attn_out.weight",
    "attn_out.bias",
    "ln2.gamma",
    "ln2.beta",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl BlockParams {
    fn fields(&self) -> [(&'static str, &Param); 12] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("qkv.weight", &self.qkv_weight),
            ("qkv.bias", &self.qkv_bias),
            ("attn_out.weight", &self.attn_out_weight),
            ("attn_out.bias", &self.attn_out_bias),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("mlp.fc1.weight", &self.fc1_weight),
            ("mlp.fc1.bias", &self.fc1_bias),
            ("mlp.fc2.weight", &self.fc2_weight),
            ("mlp.fc2.bias", &self.fc2_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Param); 12] {
        [
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("qkv.weight", &mut self.qkv_weight),
            ("qkv.bias", &mut self.qkv_bias),
            ("attn_out.weight", &mut self.attn_out_weight),
            ("attn_out.bias", &mut self.attn_out_bias),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("mlp.fc1.weight", &mut self.fc1_weight),
            ("mlp.fc1.bias", &mut self.fc1_bias),
            ("mlp.fc2.weight", &mut self.fc2_weight),
            ("mlp.fc2.bias", &mut self.fc2_bias),
        ]
    }
}

/// All learnable tensors plus the trainable-subset mask.
///
/// The mask holds canonical tensor names (see [`ModelParams::tensors`])
/// and is empty after [`init_params`] / [`load_checkpoint`]; training
/// code installs the subset it optimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[d, 3*P*P]` patch projection.
    pub patch_weight: Param,
    pub patch_bias: Param,
    /// `[k, k, d]` learned positional grid.
    pub pos_encodings: Param,
    pub blocks: Vec<BlockParams>,
    pub trainable: BTreeSet<String>,
}

pub(crate) fn block_tensor_name(block: usize, field: &str) -> String {
    format!("blocks.{block}.{field}")
}

impl ModelParams {
    /// Canonical `(name, tensor)` listing: patch projection, positional
    /// encodings, then per-block tensors in block order.
    pub fn tensors(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::with_capacity(3 + 12 * self.blocks.len());
        out.push(("patch_projection.weight".to_string(), &self.patch_weight));
        out.push(("patch_projection.bias".to_string(), &self.patch_bias));
        out.push(("pos_encodings".to_string(), &self.pos_encodings));
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, p) in b.fields() {
                out.push((block_tensor_name(i, field), p));
            }
        }
        out
    }

    /// Mutable variant of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::with_capacity(3 + 12 * self.blocks.len());
        out.push(("patch_projection.weight".to_string(), &mut self.patch_weight));
        out.push(("patch_projection.bias".to_string(), &mut self.patch_bias));
        out.push(("pos_encodings".to_string(), &mut self.pos_encodings));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (field, p) in b.fields_mut() {
                out.push((block_tensor_name(i, field), p));
            }
        }
        out
    }

    /// True when any tensor of block `i` is flagged trainable.
    pub(crate) fn block_trainable(&self, i: usize) -> bool {
        BLOCK_FIELDS
            .iter()
            .any(|f| self.trainable.contains(&block_tensor_name(i, f)))
    }

    pub(crate) fn patch_trainable(&self) -> bool {
        self.trainable.contains("patch_projection.weight")
            || self.trainable.contains("patch_projection.bias")
    }

    pub(crate) fn pos_trainable(&self) -> bool {
        self.trainable.contains("pos_encodings")
    }

    /// Earliest pipeline stage the backward pass must reach: block index,
    /// or 0 with `through_embedding` when the patch projection or the
    /// positional grid is trainable. `None` when nothing is trainable.
    pub(crate) fn first_backward_stage(&self, num_blocks: usize) -> Option<usize> {
        if self.patch_trainable() || self.pos_trainable() {
            return Some(0);
        }
        (0..num_blocks).find(|&i| self.block_trainable(i))
    }
}

/// Row-major matrix used for token activations.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Saved activations for one traversed block.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    /// Block input (pre-norm input of the attention half).
    pub input: Mat,
    /// Per-head attention probabilities; empty in identity mode.
    pub attn_probs: Vec<Mat>,
    /// Residual stream after attention (pre-norm input of the MLP half).
    pub mid: Mat,
    /// MLP hidden pre-activation.
    pub mlp_pre: Mat,
}

/// Activations recorded during [`forward`] for the blocks the backward
/// pass traverses, plus the patch matrix when the patch projection is
/// trainable.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) grid_h: usize,
    pub(crate) grid_w: usize,
    pub(crate) channels: usize,
    /// `n x 3P^2` flattened patches; kept only when needed.
    pub(crate) patches: Option<Mat>,
    /// One entry per block; `Some` from the first traversed block on.
    pub(crate) blocks: Vec<Option<BlockCache>>,
}

impl ForwardCache {
    /// Spatial dims `(h, w)` of the forward output this cache belongs to.
    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }
}
