//! Sliding-window planning and feature/prediction stitching, including
//! the fractional-stride upsample-by-r scheme.
//!
//! When the stride is not divisible by the patch size, per-window feature
//! maps are upsampled by the smallest factor `r` that makes window
//! placement integral on the fine grid, merged by averaging overlaps, and
//! downsampled by `r` afterwards.

use crate::tensor::{bilinear_resize, FeatureGrid};
use crate::{Result, SparError};

/// Enumerated K x K window origins covering an image at stride `s`,
/// plus the derived upsample factor for feature stitching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub image_h: usize,
    pub image_w: usize,
    /// Window side K in pixels.
    pub window: usize,
    /// Stride s in pixels.
    pub stride: usize,
    /// `(row, col)` pixel origins in row-major order.
    pub origins: Vec<(usize, usize)>,
    /// Number of windows, `origins.len()`.
    pub m: usize,
    /// Smallest r with `P % r == 0` and `s % (P/r) == 0`.
    pub upsample_factor: usize,
}

/// Per-axis origins: multiples of `stride` while a window fits, with a
/// final origin clamped to `dim - window` so coverage reaches the edge.
fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut o = 0;
    while o + window <= dim {
        origins.push(o);
        o += stride;
    }
    let last = dim - window;
    if *origins.last().expect("dim >= window always yields origin 0") != last {
        origins.push(last);
    }
    origins
}

/// Smallest upsample factor `r >= 1` such that `patch % r == 0` and
/// `stride % (patch / r) == 0`. `r = patch` always qualifies, so the
/// search cannot fail.
pub fn min_upsample_factor(stride: usize, patch: usize) -> usize {
    assert!(stride >= 1 && patch >= 1, "stride and patch must be positive");
    for r in 1..=patch {
        if patch % r == 0 && stride % (patch / r) == 0 {
            return r;
        }
    }
    unreachable!("r = patch always satisfies the divisibility conditions")
}

/// Plans the window set covering an `image_h x image_w` image with
/// `window`-sized tiles at the given stride.
pub fn plan_windows(
    image_h: usize,
    image_w: usize,
    window: usize,
    stride: usize,
    patch: usize,
) -> Result<WindowPlan> {
    if patch == 0 || window == 0 || window % patch != 0 {
        return Err(SparError::InvalidArgument(format!(
            "window size {window} must be a positive multiple of patch size {patch}"
        )));
    }
    if stride < 1 || stride > window {
        return Err(SparError::InvalidArgument(format!(
            "stride {stride} must lie in [1, {window}]; larger strides leave gaps"
        )));
    }
    if image_h < window || image_w < window {
        return Err(SparError::ImageSmallerThanWindow {
            height: image_h,
            width: image_w,
            window,
        });
    }
    let rows = axis_origins(image_h, window, stride);
    let cols = axis_origins(image_w, window, stride);
    let mut origins = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            origins.push((r, c));
        }
    }
    let m = origins.len();
    Ok(WindowPlan {
        image_h,
        image_w,
        window,
        stride,
        origins,
        m,
        upsample_factor: min_upsample_factor(stride, patch),
    })
}

/// Upsamples by an integer factor on the aligned grid: output cell `j`
/// bilinearly samples the source at coordinate `j / r`, so every source
/// cell reappears exactly at output index `j = r * i`. The inverse of
/// [`downsample_aligned`] by construction.
fn upsample_aligned(src: &FeatureGrid, r: usize) -> FeatureGrid {
    let (h, w, ch) = src.shape();
    FeatureGrid::from_fn(h * r, w * r, ch, |jr, jc, k| {
        src.sample_clamped(jr as f64 / r as f64, jc as f64 / r as f64, k)
    })
}

/// Inverse of [`upsample_aligned`]: keeps every r-th cell.
fn downsample_aligned(src: &FeatureGrid, r: usize) -> FeatureGrid {
    let (h, w, ch) = src.shape();
    debug_assert!(h % r == 0 && w % r == 0);
    FeatureGrid::from_fn(h / r, w / r, ch, |ir, ic, k| src.get(ir * r, ic * r, k))
}

/// Merges per-window feature maps into the feature layout a single pass
/// over the whole image would produce.
///
/// Each window map is upsampled by the plan's factor `r`, placed at fine
/// origin `(row * r / P, col * r / P)`, overlaps are averaged uniformly
/// through a count grid, and the merged fine grid is downsampled by `r`
/// to `(H/P) x (W/P)`. Accumulation runs in plan order.
pub fn stitch_features(
    window_feats: &[FeatureGrid],
    plan: &WindowPlan,
    patch: usize,
) -> Result<FeatureGrid> {
    if window_feats.len() != plan.m {
        return Err(SparError::ShapeMismatch(format!(
            "plan has {} windows but {} feature maps were supplied",
            plan.m,
            window_feats.len()
        )));
    }
    if plan.image_h % patch != 0 || plan.image_w % patch != 0 {
        return Err(SparError::InvalidArgument(format!(
            "feature stitching needs patch-divisible image dims, got {}x{} with patch {patch}",
            plan.image_h, plan.image_w
        )));
    }
    let k = plan.window / patch;
    let d = window_feats[0].channels();
    for (i, f) in window_feats.iter().enumerate() {
        if f.shape() != (k, k, d) {
            return Err(SparError::ShapeMismatch(format!(
                "window {i} features are {:?}, expected ({k}, {k}, {d})",
                f.shape()
            )));
        }
    }
    let r = plan.upsample_factor;
    let fine_h = plan.image_h * r / patch;
    let fine_w = plan.image_w * r / patch;
    let fine_k = k * r;
    let mut accum = FeatureGrid::zeros(fine_h, fine_w, d);
    let mut counts = vec![0u32; fine_h * fine_w];
    for (feats, &(orow, ocol)) in window_feats.iter().zip(&plan.origins) {
        debug_assert!(orow * r % patch == 0 && ocol * r % patch == 0);
        let upsampled;
        let fine = if r > 1 {
            upsampled = upsample_aligned(feats, r);
            &upsampled
        } else {
            feats
        };
        let fr = orow * r / patch;
        let fc = ocol * r / patch;
        for wr in 0..fine_k {
            for wc in 0..fine_k {
                counts[(fr + wr) * fine_w + fc + wc] += 1;
                for ch in 0..d {
                    let v = accum.get(fr + wr, fc + wc, ch) + fine.get(wr, wc, ch);
                    accum.set(fr + wr, fc + wc, ch, v);
                }
            }
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(SparError::InvalidArgument(format!(
                "plan leaves fine cell ({}, {}) uncovered",
                cell / fine_w,
                cell % fine_w
            )));
        }
        let (cr, cc) = (cell / fine_w, cell % fine_w);
        for ch in 0..d {
            let v = accum.get(cr, cc, ch) / n as f64;
            accum.set(cr, cc, ch, v);
        }
    }
    if r > 1 {
        Ok(downsample_aligned(&accum, r))
    } else {
        Ok(accum)
    }
}

/// Merges per-window similarity maps at pixel resolution by uniform
/// averaging of overlaps. Window maps must already be upsampled to
/// `K x K` pixels.
pub fn stitch_predictions(window_sims: &[FeatureGrid], plan: &WindowPlan) -> Result<FeatureGrid> {
    if window_sims.len() != plan.m {
        return Err(SparError::ShapeMismatch(format!(
            "plan has {} windows but {} similarity maps were supplied",
            plan.m,
            window_sims.len()
        )));
    }
    let kpx = plan.window;
    let c = window_sims[0].channels();
    for (i, s) in window_sims.iter().enumerate() {
        if s.shape() != (kpx, kpx, c) {
            return Err(SparError::ShapeMismatch(format!(
                "window {i} similarities are {:?}, expected ({kpx}, {kpx}, {c})",
                s.shape()
            )));
        }
    }
    let mut accum = FeatureGrid::zeros(plan.image_h, plan.image_w, c);
    let mut counts = vec![0u32; plan.image_h * plan.image_w];
    for (sims, &(orow, ocol)) in window_sims.iter().zip(&plan.origins) {
        for wr in 0..kpx {
            for wc in 0..kpx {
                counts[(orow + wr) * plan.image_w + ocol + wc] += 1;
                for ch in 0..c {
                    let v = accum.get(orow + wr, ocol + wc, ch) + sims.get(wr, wc, ch);
                    accum.set(orow + wr, ocol + wc, ch, v);
                }
            }
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(SparError::InvalidArgument(format!(
                "plan leaves pixel ({}, {}) uncovered",
                cell / plan.image_w,
                cell % plan.image_w
            )));
        }
        let (cr, cc) = (cell / plan.image_w, cell % plan.image_w);
        for ch in 0..c {
            let v = accum.get(cr, cc, ch) / n as f64;
            accum.set(cr, cc, ch, v);
        }
    }
    Ok(accum)
}

/// Bilinear resize kept public for similarity-map upsampling before
/// prediction stitching.
pub fn upsample_to_pixels(sims: &FeatureGrid, window: usize) -> Result<FeatureGrid> {
    bilinear_resize(sims, window, window)
}
