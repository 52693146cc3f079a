//! Reverse-mode gradients through the trainable tail of the network.
//!
//! The forward cache stores activations from the first trainable stage
//! onward; everything upstream is a constant. Gradients are produced
//! only for tensors flagged trainable in the parameter mask.

use std::collections::BTreeMap;

use super::forward::{gelu, gelu_grad, linear};
use super::{
    block_tensor_name, BlockCache, BlockParams, ForwardCache, Mat, ModelParams, Param, ViTConfig,
    LN_EPS,
};
use crate::tensor::FeatureGrid;
use crate::{Result, SparError};

/// Gradients keyed by canonical tensor name; only trainable tensors
/// appear.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    pub tensors: BTreeMap<String, Param>,
}

impl ParamGrads {
    pub fn get(&self, name: &str) -> Option<&Param> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// `a^T * b` for `a: n x k`, `b: n x m`, giving `k x m`.
fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.rows, b.rows);
    let mut out = Mat::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let ar = a.row(r);
        let br = b.row(r);
        for (i, &ai) in ar.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let orow = out.row_mut(i);
            for (o, &bj) in orow.iter_mut().zip(br) {
                *o += ai * bj;
            }
        }
    }
    out
}

/// `a * b` for `a: n x k`, `b: k x m`.
fn matmul(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let ar = a.row(r);
        let orow = out.row_mut(r);
        for (i, &ai) in ar.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let brow = b.row(i);
            for (o, &bj) in orow.iter_mut().zip(brow) {
                *o += ai * bj;
            }
        }
    }
    out
}

/// `x * W` with `W` a `[out, in]` parameter interpreted as `out x in`.
fn matmul_param(x: &Mat, w: &Param) -> Mat {
    let view = Mat {
        rows: w.dims[0],
        cols: w.dims[1],
        data: w.data.clone(),
    };
    matmul(x, &view)
}

fn colsum(a: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; a.cols];
    for r in 0..a.rows {
        for (o, &v) in out.iter_mut().zip(a.row(r)) {
            *o += v;
        }
    }
    out
}

/// LayerNorm forward that also returns per-row `1/sqrt(var + eps)` and
/// the normalized coordinates, both needed by the backward formula.
fn layer_norm_detail(x: &Mat, gamma: &Param, beta: &Param) -> (Mat, Vec<f64>, Mat) {
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut inv_std = vec![0.0; x.rows];
    for r in 0..x.rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / xr.len() as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / xr.len() as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = inv;
        let hr = xhat.row_mut(r);
        for (i, &v) in xr.iter().enumerate() {
            hr[i] = (v - mean) * inv;
        }
        let yr = y.row_mut(r);
        for i in 0..xr.len() {
            yr[i] = gamma.data[i] * xhat.row(r)[i] + beta.data[i];
        }
    }
    (y, inv_std, xhat)
}

/// Input gradient of layer normalization given the output gradient.
fn layer_norm_backward(dy: &Mat, gamma: &Param, inv_std: &[f64], xhat: &Mat) -> Mat {
    let cols = dy.cols as f64;
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let hr = xhat.row(r);
        let mut sum_dyh = 0.0;
        let mut sum_dyh_x = 0.0;
        for i in 0..dy.cols {
            let g = gamma.data[i] * dyr[i];
            sum_dyh += g;
            sum_dyh_x += g * hr[i];
        }
        let m1 = sum_dyh / cols;
        let m2 = sum_dyh_x / cols;
        let dxr = dx.row_mut(r);
        for i in 0..dy.cols {
            let g = gamma.data[i] * dyr[i];
            dxr[i] = (g - m1 - hr[i] * m2) * inv_std[r];
        }
    }
    dx
}

fn extract_cols(m: &Mat, offset: usize, width: usize) -> Mat {
    let mut out = Mat::zeros(m.rows, width);
    for r in 0..m.rows {
        out.row_mut(r).copy_from_slice(&m.row(r)[offset..offset + width]);
    }
    out
}

struct GradSink<'a> {
    block: usize,
    params: &'a ModelParams,
    grads: &'a mut BTreeMap<String, Param>,
}

impl GradSink<'_> {
    fn wants(&self, field: &str) -> bool {
        self.params
            .trainable
            .contains(&block_tensor_name(self.block, field))
    }

    fn put(&mut self, field: &str, dims: &[usize], data: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.grads.insert(
            block_tensor_name(self.block, field),
            Param {
                dims: dims.to_vec(),
                data,
            },
        );
    }
}

/// Backward through one block. `dx2` is the gradient at the block output;
/// returns the gradient at the block input.
#[allow(clippy::too_many_arguments)]
fn block_backward(
    bc: &BlockCache,
    dx2: Mat,
    block: &BlockParams,
    cfg: &ViTConfig,
    identity: bool,
    sink: &mut GradSink<'_>,
) -> Result<Mat> {
    let d = cfg.channels;
    let n = bc.input.rows;
    let heads = cfg.num_heads;
    let hd = d / heads;
    if !identity && bc.attn_probs.len() != heads {
        return Err(SparError::ShapeMismatch(format!(
            "cache holds {} attention heads, config expects {heads}",
            bc.attn_probs.len()
        )));
    }

    // recompute cheap intermediates from the cached pre-norm inputs
    let (normed1, inv1, xhat1) = layer_norm_detail(&bc.input, &block.ln1_gamma, &block.ln1_beta);
    let qkv = linear(&normed1, &block.qkv_weight, &block.qkv_bias);
    let (normed2, inv2, xhat2) = layer_norm_detail(&bc.mid, &block.ln2_gamma, &block.ln2_beta);
    let mut activated = bc.mlp_pre.clone();
    for v in activated.data.iter_mut() {
        *v = gelu(*v);
    }
    let ctx = if identity {
        extract_cols(&qkv, 2 * d, d)
    } else {
        let mut ctx = Mat::zeros(n, d);
        for h in 0..heads {
            let v_h = extract_cols(&qkv, 2 * d + h * hd, hd);
            let mixed = matmul(&bc.attn_probs[h], &v_h);
            for r in 0..n {
                ctx.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(mixed.row(r));
            }
        }
        ctx
    };

    // MLP half
    if sink.wants("mlp.fc2.weight") {
        let dw2 = matmul_tn(&dx2, &activated);
        sink.put("mlp.fc2.weight", &block.fc2_weight.dims, dw2.data);
    }
    if sink.wants("mlp.fc2.bias") {
        sink.put("mlp.fc2.bias", &block.fc2_bias.dims, colsum(&dx2));
    }
    let dg = matmul_param(&dx2, &block.fc2_weight);
    let mut dm1 = dg;
    for (v, &pre) in dm1.data.iter_mut().zip(&bc.mlp_pre.data) {
        *v *= gelu_grad(pre);
    }
    if sink.wants("mlp.fc1.weight") {
        let dw1 = matmul_tn(&dm1, &normed2);
        sink.put("mlp.fc1.weight", &block.fc1_weight.dims, dw1.data);
    }
    if sink.wants("mlp.fc1.bias") {
        sink.put("mlp.fc1.bias", &block.fc1_bias.dims, colsum(&dm1));
    }
    let dnormed2 = matmul_param(&dm1, &block.fc1_weight);
    if sink.wants("ln2.gamma") {
        let mut dgamma = vec![0.0; d];
        for r in 0..n {
            for i in 0..d {
                dgamma[i] += dnormed2.row(r)[i] * xhat2.row(r)[i];
            }
        }
        sink.put("ln2.gamma", &block.ln2_gamma.dims, dgamma);
    }
    if sink.wants("ln2.beta") {
        sink.put("ln2.beta", &block.ln2_beta.dims, colsum(&dnormed2));
    }
    let mut dmid = layer_norm_backward(&dnormed2, &block.ln2_gamma, &inv2, &xhat2);
    for (m, &g) in dmid.data.iter_mut().zip(&dx2.data) {
        *m += g; // residual connection around the MLP
    }

    // attention half
    if sink.wants("attn_out.weight") {
        let dwout = matmul_tn(&dmid, &ctx);
        sink.put("attn_out.weight", &block.attn_out_weight.dims, dwout.data);
    }
    if sink.wants("attn_out.bias") {
        sink.put("attn_out.bias", &block.attn_out_bias.dims, colsum(&dmid));
    }
    let dctx = matmul_param(&dmid, &block.attn_out_weight);
    let mut dqkv = Mat::zeros(n, 3 * d);
    if identity {
        for r in 0..n {
            dqkv.row_mut(r)[2 * d..3 * d].copy_from_slice(dctx.row(r));
        }
    } else {
        let scale = 1.0 / (hd as f64).sqrt();
        for h in 0..heads {
            let probs = &bc.attn_probs[h];
            let q_h = extract_cols(&qkv, h * hd, hd);
            let k_h = extract_cols(&qkv, d + h * hd, hd);
            let v_h = extract_cols(&qkv, 2 * d + h * hd, hd);
            let dctx_h = extract_cols(&dctx, h * hd, hd);

            // dA = dctx_h * v_h^T, dv = A^T * dctx_h
            let mut da = Mat::zeros(n, n);
            for i in 0..n {
                let di = dctx_h.row(i);
                let dai = da.row_mut(i);
                for j in 0..n {
                    dai[j] = di.iter().zip(v_h.row(j)).map(|(a, b)| a * b).sum();
                }
            }
            let dv = matmul_tn(probs, &dctx_h);

            // softmax backward: dS = A .* (dA - rowsum(dA .* A))
            let mut ds = Mat::zeros(n, n);
            for i in 0..n {
                let ai = probs.row(i);
                let dai = da.row(i);
                let dot: f64 = ai.iter().zip(dai).map(|(a, b)| a * b).sum();
                let dsi = ds.row_mut(i);
                for j in 0..n {
                    dsi[j] = ai[j] * (dai[j] - dot);
                }
            }
            let mut dq = matmul(&ds, &k_h);
            for v in dq.data.iter_mut() {
                *v *= scale;
            }
            let mut dk = matmul_tn(&ds, &q_h);
            for v in dk.data.iter_mut() {
                *v *= scale;
            }
            for r in 0..n {
                dqkv.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(dq.row(r));
                dqkv.row_mut(r)[d + h * hd..d + (h + 1) * hd].copy_from_slice(dk.row(r));
                dqkv.row_mut(r)[2 * d + h * hd..2 * d + (h + 1) * hd].copy_from_slice(dv.row(r));
            }
        }
    }
    if sink.wants("qkv.weight") {
        let dwqkv = matmul_tn(&dqkv, &normed1);
        sink.put("qkv.weight", &block.qkv_weight.dims, dwqkv.data);
    }
    if sink.wants("qkv.bias") {
        sink.put("qkv.bias", &block.qkv_bias.dims, colsum(&dqkv));
    }
    let dnormed1 = matmul_param(&dqkv, &block.qkv_weight);
    if sink.wants("ln1.gamma") {
        let mut dgamma = vec![0.0; d];
        for r in 0..n {
            for i in 0..d {
                dgamma[i] += dnormed1.row(r)[i] * xhat1.row(r)[i];
            }
        }
        sink.put("ln1.gamma", &block.ln1_gamma.dims, dgamma);
    }
    if sink.wants("ln1.beta") {
        sink.put("ln1.beta", &block.ln1_beta.dims, colsum(&dnormed1));
    }
    let mut dx = layer_norm_backward(&dnormed1, &block.ln1_gamma, &inv1, &xhat1);
    for (x, &g) in dx.data.iter_mut().zip(&dmid.data) {
        *x += g; // residual connection around attention
    }
    Ok(dx)
}

/// Scatter-add transpose of the half-pixel bilinear resize that produced
/// an `gh x gw` grid from a `src_h x src_w` source.
fn bilinear_resize_transpose(
    grad: &Mat,
    gh: usize,
    gw: usize,
    src_h: usize,
    src_w: usize,
    d: usize,
) -> Param {
    let mut out = Param::zeros(&[src_h, src_w, d]);
    let scale_y = src_h as f64 / gh as f64;
    let scale_x = src_w as f64 / gw as f64;
    for r in 0..gh {
        let sy = ((r as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let dy = sy - y0 as f64;
        for c in 0..gw {
            let sx = ((c as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let dx = sx - x0 as f64;
            let grow = grad.row(r * gw + c);
            for ch in 0..d {
                let g = grow[ch];
                out.data[(y0 * src_w + x0) * d + ch] += (1.0 - dy) * (1.0 - dx) * g;
                out.data[(y0 * src_w + x1) * d + ch] += (1.0 - dy) * dx * g;
                out.data[(y1 * src_w + x0) * d + ch] += dy * (1.0 - dx) * g;
                out.data[(y1 * src_w + x1) * d + ch] += dy * dx * g;
            }
        }
    }
    out
}

/// Propagates `grad_output` back through every cached block and returns
/// gradients for the tensors flagged trainable. Frozen tensors are
/// absent from the result.
pub fn backward_tail(
    cache: &ForwardCache,
    grad_output: &FeatureGrid,
    params: &ModelParams,
    cfg: &ViTConfig,
) -> Result<ParamGrads> {
    let (gh, gw) = (cache.grid_h, cache.grid_w);
    if grad_output.shape() != (gh, gw, cache.channels) {
        return Err(SparError::ShapeMismatch(format!(
            "grad output is {:?}, cache expects ({gh}, {gw}, {})",
            grad_output.shape(),
            cache.channels
        )));
    }
    if cache.blocks.len() != cfg.num_blocks || params.blocks.len() != cfg.num_blocks {
        return Err(SparError::ShapeMismatch(format!(
            "cache has {} blocks, params {}, config {}",
            cache.blocks.len(),
            params.blocks.len(),
            cfg.num_blocks
        )));
    }
    if cache.channels != cfg.channels {
        return Err(SparError::ShapeMismatch(format!(
            "cache channel width {} does not match config {}",
            cache.channels, cfg.channels
        )));
    }
    let through_embedding = params.patch_trainable() || params.pos_trainable();
    if through_embedding && cache.blocks.first().is_some_and(|b| b.is_none()) {
        return Err(SparError::ShapeMismatch(
            "cache was produced before the embedding stage became trainable".into(),
        ));
    }

    let n = gh * gw;
    let d = cfg.channels;
    let mut dx = Mat::zeros(n, d);
    for gr in 0..gh {
        for gc in 0..gw {
            let row = dx.row_mut(gr * gw + gc);
            row.copy_from_slice(grad_output.cell(gr, gc));
        }
    }

    let mut grads = BTreeMap::new();
    let mut reached_bottom = true;
    for i in (0..cfg.num_blocks).rev() {
        let Some(bc) = &cache.blocks[i] else {
            reached_bottom = false;
            break;
        };
        let identity = cfg.last_attention_identity && i + 1 == cfg.num_blocks;
        let mut sink = GradSink {
            block: i,
            params,
            grads: &mut grads,
        };
        dx = block_backward(bc, dx, &params.blocks[i], cfg, identity, &mut sink)?;
    }

    if through_embedding && reached_bottom {
        if params.pos_trainable() {
            let k = params.pos_encodings.dims[0];
            grads.insert(
                "pos_encodings".to_string(),
                bilinear_resize_transpose(&dx, gh, gw, k, params.pos_encodings.dims[1], d),
            );
        }
        if params.patch_trainable() {
            let patches = cache.patches.as_ref().ok_or_else(|| {
                SparError::ShapeMismatch(
                    "cache lacks the patch matrix required for patch-projection gradients".into(),
                )
            })?;
            if params.trainable.contains("patch_projection.weight") {
                let dw = matmul_tn(&dx, patches);
                grads.insert(
                    "patch_projection.weight".to_string(),
                    Param {
                        dims: params.patch_weight.dims.clone(),
                        data: dw.data,
                    },
                );
            }
            if params.trainable.contains("patch_projection.bias") {
                grads.insert(
                    "patch_projection.bias".to_string(),
                    Param {
                        dims: params.patch_bias.dims.clone(),
                        data: colsum(&dx),
                    },
                );
            }
        }
    }

    Ok(ParamGrads { tensors: grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::Trainable;
    use crate::tensor::mse;
    use crate::vit::{forward, init_params};

    fn cfg(blocks: usize, identity: bool) -> ViTConfig {
        ViTConfig {
            patch_size: 16,
            native_side: 32,
            channels: 4,
            num_blocks: blocks,
            num_heads: 2,
            mlp_ratio: 2.0,
            last_attention_identity: identity,
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> FeatureGrid {
        let mut s = seed.wrapping_mul(0x2545F4914F6CDD1D).wrapping_add(11);
        FeatureGrid::from_fn(h, w, 3, |_, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 1024) as f64 / 1024.0
        })
    }

    fn target(h: usize, w: usize, d: usize, seed: u64) -> FeatureGrid {
        let mut s = seed.wrapping_mul(0xD1342543DE82EF95).wrapping_add(29);
        FeatureGrid::from_fn(h, w, d, |_, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 2048) as f64 / 1024.0 - 1.0
        })
    }

    fn loss_of(params: &ModelParams, cfg: &ViTConfig, img: &FeatureGrid, tgt: &FeatureGrid) -> f64 {
        let (out, _) = forward(img, params, cfg).unwrap();
        mse(&out, tgt).unwrap()
    }

    fn analytic_grads(
        params: &ModelParams,
        cfg: &ViTConfig,
        img: &FeatureGrid,
        tgt: &FeatureGrid,
    ) -> ParamGrads {
        let (out, cache) = forward(img, params, cfg).unwrap();
        let numel = out.data().len() as f64;
        let (h, w, d) = out.shape();
        let grad = FeatureGrid::from_vec(
            h,
            w,
            d,
            out.data()
                .iter()
                .zip(tgt.data())
                .map(|(s, t)| 2.0 * (s - t) / numel)
                .collect(),
        )
        .unwrap();
        backward_tail(&cache, &grad, params, cfg).unwrap()
    }

    /// Central-difference check over a handful of elements per tensor.
    fn check_gradients(params: &ModelParams, cfg: &ViTConfig, img: &FeatureGrid, tgt: &FeatureGrid) {
        let grads = analytic_grads(params, cfg, img, tgt);
        assert_eq!(grads.len(), params.trainable.len());
        let step = 1e-5;
        for name in params.trainable.clone() {
            let g = grads.get(&name).unwrap();
            let len = g.len();
            let probes = [0, len / 3, len / 2, 2 * len / 3, len - 1];
            for &i in probes.iter() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                for (n, t) in plus.tensors_mut() {
                    if n == name {
                        t.data[i] += step;
                    }
                }
                for (n, t) in minus.tensors_mut() {
                    if n == name {
                        t.data[i] -= step;
                    }
                }
                let fd = (loss_of(&plus, cfg, img, tgt) - loss_of(&minus, cfg, img, tgt))
                    / (2.0 * step);
                let an = g.data[i];
                // the 1e-6 floor absorbs central-difference roundoff
                // (~1e-11 absolute at this step size) on near-zero grads
                let denom = fd.abs().max(an.abs()).max(1e-6);
                let rel = (fd - an).abs() / denom;
                assert!(rel <= 1e-4, "{name}[{i}]: fd={fd} an={an} rel={rel}");
            }
        }
    }

    #[test]
    fn zero_grad_output_yields_zero_gradients() {
        let cfg = cfg(2, false);
        let mut params = init_params(&cfg, 5).unwrap();
        params.trainable = Trainable::All.mask(2);
        let img = image(32, 32, 1);
        let (out, cache) = forward(&img, &params, &cfg).unwrap();
        let (h, w, d) = out.shape();
        let zeros = FeatureGrid::zeros(h, w, d);
        let grads = backward_tail(&cache, &zeros, &params, &cfg).unwrap();
        assert_eq!(grads.len(), params.trainable.len());
        for (name, g) in &grads.tensors {
            assert!(g.data.iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn doubling_grad_output_doubles_gradients() {
        let cfg = cfg(1, false);
        let mut params = init_params(&cfg, 6).unwrap();
        params.trainable = Trainable::All.mask(1);
        let img = image(32, 32, 2);
        let (out, cache) = forward(&img, &params, &cfg).unwrap();
        let (h, w, d) = out.shape();
        let tgt = target(h, w, d, 3);
        let g1 = FeatureGrid::from_vec(
            h,
            w,
            d,
            out.data().iter().zip(tgt.data()).map(|(s, t)| s - t).collect(),
        )
        .unwrap();
        let g2 = FeatureGrid::from_vec(
            h,
            w,
            d,
            g1.data().iter().map(|v| 2.0 * v).collect(),
        )
        .unwrap();
        let a = backward_tail(&cache, &g1, &params, &cfg).unwrap();
        let b = backward_tail(&cache, &g2, &params, &cfg).unwrap();
        for (name, ga) in &a.tensors {
            let gb = b.get(name).unwrap();
            for (x, y) in ga.data.iter().zip(&gb.data) {
                assert_eq!(2.0 * x, *y, "{name}");
            }
        }
    }

    #[test]
    fn finite_differences_all_tensors_one_block() {
        let cfg = cfg(1, false);
        let mut params = init_params(&cfg, 17).unwrap();
        params.trainable = Trainable::All.mask(1);
        let img = image(32, 32, 7);
        let tgt = target(2, 2, 4, 9);
        check_gradients(&params, &cfg, &img, &tgt);
    }

    #[test]
    fn finite_differences_two_blocks_partial_mask() {
        let cfg = cfg(2, false);
        let mut params = init_params(&cfg, 19).unwrap();
        params.trainable = Trainable::LastBlocks(1).mask(2);
        let img = image(32, 48, 8);
        let tgt = target(2, 3, 4, 10);
        check_gradients(&params, &cfg, &img, &tgt);
    }

    #[test]
    fn finite_differences_identity_attention() {
        let cfg = cfg(1, true);
        let mut params = init_params(&cfg, 23).unwrap();
        params.trainable = Trainable::All.mask(1);
        let img = image(32, 32, 11);
        let tgt = target(2, 2, 4, 12);
        check_gradients(&params, &cfg, &img, &tgt);
        // q and k rows of the qkv projection cannot influence the loss
        let grads = analytic_grads(&params, &cfg, &img, &tgt);
        let qkv = grads.get("blocks.0.qkv.weight").unwrap();
        let d = 4;
        for row in 0..2 * d {
            for col in 0..d {
                assert_eq!(qkv.data[row * d + col], 0.0, "q/k row {row}");
            }
        }
        for row in 2 * d..3 * d {
            let nonzero = (0..d).any(|col| qkv.data[row * d + col] != 0.0);
            assert!(nonzero, "v row {row} should receive gradient");
        }
    }

    #[test]
    fn finite_differences_pos_encodings_at_interpolated_resolution() {
        // 64x64 input interpolates the 2x2 positional grid to 4x4, so the
        // resize-transpose path gets exercised
        let cfg = cfg(1, false);
        let mut params = init_params(&cfg, 29).unwrap();
        params.trainable = Trainable::PosEncodings.mask(1);
        let img = image(64, 64, 13);
        let tgt = target(4, 4, 4, 14);
        check_gradients(&params, &cfg, &img, &tgt);
    }

    #[test]
    fn backward_rejects_mismatched_grad_shape() {
        let cfg = cfg(1, false);
        let mut params = init_params(&cfg, 31).unwrap();
        params.trainable = Trainable::All.mask(1);
        let (_, cache) = forward(&image(32, 32, 3), &params, &cfg).unwrap();
        let wrong = FeatureGrid::zeros(3, 3, 4);
        assert!(backward_tail(&cache, &wrong, &params, &cfg).is_err());
    }
}
