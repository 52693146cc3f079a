//! Single-pass forward at arbitrary patch-divisible resolution.

use super::{BlockCache, BlockParams, ForwardCache, Mat, ModelParams, Param, ViTConfig, LN_EPS};
use crate::tensor::{bilinear_resize, FeatureGrid};
use crate::{Result, SparError};

pub(crate) const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_CUBIC: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let s = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let t = s.tanh();
    let ds = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * ds
}

/// `y = x * W^T + b` with `W` stored `[out_dim, in_dim]` row-major.
pub(crate) fn linear(x: &Mat, w: &Param, b: &Param) -> Mat {
    let (out_dim, in_dim) = (w.dims[0], w.dims[1]);
    debug_assert_eq!(x.cols, in_dim);
    debug_assert_eq!(b.len(), out_dim);
    let mut y = Mat::zeros(x.rows, out_dim);
    for r in 0..x.rows {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for o in 0..out_dim {
            let wrow = &w.data[o * in_dim..(o + 1) * in_dim];
            let mut acc = b.data[o];
            for (xi, wi) in xr.iter().zip(wrow) {
                acc += xi * wi;
            }
            yr[o] = acc;
        }
    }
    y
}

/// Token-wise layer normalization; returns the normalized output.
pub(crate) fn layer_norm(x: &Mat, gamma: &Param, beta: &Param) -> Mat {
    let mut y = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / xr.len() as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / xr.len() as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let yr = y.row_mut(r);
        for (i, &v) in xr.iter().enumerate() {
            yr[i] = gamma.data[i] * (v - mean) * inv + beta.data[i];
        }
    }
    y
}

fn softmax_rows(scores: &mut Mat) {
    for r in 0..scores.rows {
        let row = scores.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Multi-head self attention on the normalized tokens. Returns the
/// concatenated per-head context plus the per-head probability matrices
/// (empty when `identity` short-circuits them to I).
pub(crate) fn attention(
    normed: &Mat,
    block: &BlockParams,
    cfg: &ViTConfig,
    identity: bool,
) -> (Mat, Vec<Mat>) {
    let d = cfg.channels;
    let n = normed.rows;
    let qkv = linear(normed, &block.qkv_weight, &block.qkv_bias);
    if identity {
        // A = I: each token keeps its own value vector
        let mut ctx = Mat::zeros(n, d);
        for t in 0..n {
            ctx.row_mut(t).copy_from_slice(&qkv.row(t)[2 * d..3 * d]);
        }
        return (ctx, Vec::new());
    }
    let heads = cfg.num_heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Mat::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let off_q = h * hd;
        let off_k = d + h * hd;
        let off_v = 2 * d + h * hd;
        let mut scores = Mat::zeros(n, n);
        for i in 0..n {
            let qi = &qkv.row(i)[off_q..off_q + hd];
            let si = scores.row_mut(i);
            for j in 0..n {
                let kj = &qkv.row(j)[off_k..off_k + hd];
                si[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
        }
        softmax_rows(&mut scores);
        for i in 0..n {
            let ai = scores.row(i);
            for j in 0..n {
                let w = ai[j];
                if w == 0.0 {
                    continue;
                }
                let vj = &qkv.row(j)[off_v..off_v + hd];
                let ci = &mut ctx.row_mut(i)[off_q..off_q + hd];
                for (c, &v) in ci.iter_mut().zip(vj) {
                    *c += w * v;
                }
            }
        }
        probs.push(scores);
    }
    (ctx, probs)
}

struct BlockOutput {
    out: Mat,
    cache: Option<BlockCache>,
}

fn block_forward(
    x: Mat,
    block: &BlockParams,
    cfg: &ViTConfig,
    identity: bool,
    want_cache: bool,
) -> BlockOutput {
    let normed = layer_norm(&x, &block.ln1_gamma, &block.ln1_beta);
    let (ctx, probs) = attention(&normed, block, cfg, identity);
    let attn_out = linear(&ctx, &block.attn_out_weight, &block.attn_out_bias);
    let mut mid = x.clone();
    for (m, a) in mid.data.iter_mut().zip(&attn_out.data) {
        *m += a;
    }
    let normed2 = layer_norm(&mid, &block.ln2_gamma, &block.ln2_beta);
    let hidden = linear(&normed2, &block.fc1_weight, &block.fc1_bias);
    let mut activated = hidden.clone();
    for v in activated.data.iter_mut() {
        *v = gelu(*v);
    }
    let mlp_out = linear(&activated, &block.fc2_weight, &block.fc2_bias);
    let mut out = mid.clone();
    for (o, m) in out.data.iter_mut().zip(&mlp_out.data) {
        *o += m;
    }
    let cache = want_cache.then(|| BlockCache {
        input: x,
        attn_probs: probs,
        mid,
        mlp_pre: hidden,
    });
    BlockOutput { out, cache }
}

/// Flattens the image into per-patch pixel vectors, row-major and
/// channel-last within each patch.
pub(crate) fn patchify(image: &FeatureGrid, patch: usize) -> Mat {
    let (h, w, ch) = image.shape();
    let (gh, gw) = (h / patch, w / patch);
    let mut m = Mat::zeros(gh * gw, ch * patch * patch);
    for gr in 0..gh {
        for gc in 0..gw {
            let row = m.row_mut(gr * gw + gc);
            let mut i = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..ch {
                        row[i] = image.get(gr * patch + py, gc * patch + px, c);
                        i += 1;
                    }
                }
            }
        }
    }
    m
}

/// Bilinearly resamples the learned positional grid to `h x w`.
pub fn interpolate_pos_encodings(pe: &FeatureGrid, h: usize, w: usize) -> Result<FeatureGrid> {
    bilinear_resize(pe, h, w)
}

fn pos_grid(params: &ModelParams) -> Result<FeatureGrid> {
    let dims = &params.pos_encodings.dims;
    if dims.len() != 3 {
        return Err(SparError::ShapeMismatch(format!(
            "positional encodings must be rank 3, got rank {}",
            dims.len()
        )));
    }
    FeatureGrid::from_vec(dims[0], dims[1], dims[2], params.pos_encodings.data.clone())
}

/// Full forward pass: patch embedding, interpolated positional encodings,
/// transformer blocks. Output is the `(H/P) x (W/P) x d` feature grid plus
/// the activation cache for the trainable tail.
pub fn forward(
    image: &FeatureGrid,
    params: &ModelParams,
    cfg: &ViTConfig,
) -> Result<(FeatureGrid, ForwardCache)> {
    cfg.validate()?;
    let (h, w, ch) = image.shape();
    if ch != 3 {
        return Err(SparError::ShapeMismatch(format!(
            "expected a 3-channel image, got {ch} channels"
        )));
    }
    if h % cfg.patch_size != 0 {
        return Err(SparError::InvalidArgument(format!(
            "image height {h} is not divisible by patch size {}",
            cfg.patch_size
        )));
    }
    if w % cfg.patch_size != 0 {
        return Err(SparError::InvalidArgument(format!(
            "image width {w} is not divisible by patch size {}",
            cfg.patch_size
        )));
    }
    if params.blocks.len() != cfg.num_blocks {
        return Err(SparError::ShapeMismatch(format!(
            "params hold {} blocks, config expects {}",
            params.blocks.len(),
            cfg.num_blocks
        )));
    }
    let (gh, gw) = (h / cfg.patch_size, w / cfg.patch_size);
    let d = cfg.channels;

    let patches = patchify(image, cfg.patch_size);
    let mut tokens = linear(&patches, &params.patch_weight, &params.patch_bias);
    let pe = interpolate_pos_encodings(&pos_grid(params)?, gh, gw)?;
    for gr in 0..gh {
        for gc in 0..gw {
            let row = tokens.row_mut(gr * gw + gc);
            for (t, p) in row.iter_mut().zip(pe.cell(gr, gc)) {
                *t += p;
            }
        }
    }

    let first_stage = params.first_backward_stage(cfg.num_blocks);
    let keep_patches = params.patch_trainable();
    let mut cache = ForwardCache {
        grid_h: gh,
        grid_w: gw,
        channels: d,
        patches: keep_patches.then(|| patches),
        blocks: Vec::with_capacity(cfg.num_blocks),
    };

    let mut x = tokens;
    for (i, block) in params.blocks.iter().enumerate() {
        let identity = cfg.last_attention_identity && i + 1 == cfg.num_blocks;
        let want_cache = first_stage.is_some_and(|s| i >= s);
        let BlockOutput { out, cache: bc } = block_forward(x, block, cfg, identity, want_cache);
        cache.blocks.push(bc);
        x = out;
    }

    let mut grid = FeatureGrid::zeros(gh, gw, d);
    for gr in 0..gh {
        for gc in 0..gw {
            let row = x.row(gr * gw + gc);
            for (c, &v) in row.iter().enumerate() {
                grid.set(gr, gc, c, v);
            }
        }
    }
    Ok((grid, cache))
}

/// Native-resolution forward over one `K x K` window; identical
/// computation to [`forward`], with the positional grid used at its
/// stored size.
pub fn forward_window(
    window: &FeatureGrid,
    params: &ModelParams,
    cfg: &ViTConfig,
) -> Result<FeatureGrid> {
    let (h, w, _) = window.shape();
    if h != cfg.native_side || w != cfg.native_side {
        return Err(SparError::ShapeMismatch(format!(
            "window must be exactly {0}x{0}, got {h}x{w}",
            cfg.native_side
        )));
    }
    Ok(forward(window, params, cfg)?.0)
}
