//! Dense numeric grids and the resampling/normalization/reduction
//! primitives shared by every other module.
//!
//! A [`FeatureGrid`] is a rank-3 array in row-major, channel-last order.
//! It carries images (3 channels), token feature maps (d channels),
//! positional-encoding grids and class-similarity maps alike.

use crate::{Result, SparError};

/// Loss values, timings and other single real numbers. Always finite.
pub type Scalar = f64;

/// Dense `height x width x channels` grid, row-major and channel-last:
/// element `(r, c, ch)` lives at `(r * width + c) * channels + ch`.
///
/// All public constructors and operations keep every value finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    /// All-zero grid of the given shape.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(
            height > 0 && width > 0 && channels > 0,
            "grid dimensions must be positive, got {height}x{width}x{channels}"
        );
        FeatureGrid {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Wraps an existing buffer, validating length and finiteness.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(SparError::InvalidArgument(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(SparError::ShapeMismatch(format!(
                "buffer holds {} values, {height}x{width}x{channels} needs {expected}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(SparError::InvalidArgument(format!(
                "grid contains a non-finite value ({bad})"
            )));
        }
        Ok(FeatureGrid {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(row, col, channel)` at every element.
    ///
    /// Panics if `f` produces a non-finite value; producers are internal
    /// code, so that is an invariant violation rather than an input error.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut g = FeatureGrid::zeros(height, width, channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    let v = f(r, c, ch);
                    assert!(v.is_finite(), "non-finite value at ({r},{c},{ch}): {v}");
                    g.data[(r * width + c) * channels + ch] = v;
                }
            }
        }
        g
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)` triple.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col, channel)]
    }

    pub(crate) fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col, channel);
        self.data[i] = value;
    }

    /// Channel vector at one spatial cell.
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        debug_assert!(row < self.height && col < self.width && channel < self.channels);
        (row * self.width + col) * self.channels + channel
    }

    /// Samples channel `ch` at real-valued coordinates with bilinear
    /// weights; coordinates are clamped to the valid index range.
    pub(crate) fn sample_clamped(&self, y: f64, x: f64, ch: usize) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let dy = y - y0 as f64;
        let dx = x - x0 as f64;
        let v00 = self.get(y0, x0, ch);
        let v01 = self.get(y0, x1, ch);
        let v10 = self.get(y1, x0, ch);
        let v11 = self.get(y1, x1, ch);
        let top = v00 + (v01 - v00) * dx;
        let bot = v10 + (v11 - v10) * dx;
        top + (bot - top) * dy
    }
}

/// Resamples `src` to `out_h x out_w` with bilinear interpolation under
/// the half-pixel-center convention: source coordinate
/// `(dst + 0.5) * scale - 0.5`, clamped to the valid range. Channels are
/// resampled independently.
pub fn bilinear_resize(src: &FeatureGrid, out_h: usize, out_w: usize) -> Result<FeatureGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(SparError::InvalidArgument(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    if out_h == src.height && out_w == src.width {
        return Ok(src.clone());
    }
    let scale_y = src.height as f64 / out_h as f64;
    let scale_x = src.width as f64 / out_w as f64;
    let mut out = FeatureGrid::zeros(out_h, out_w, src.channels);
    for r in 0..out_h {
        let sy = (r as f64 + 0.5) * scale_y - 0.5;
        for c in 0..out_w {
            let sx = (c as f64 + 0.5) * scale_x - 0.5;
            for ch in 0..src.channels {
                let v = src.sample_clamped(sy, sx, ch);
                out.set(r, c, ch, v);
            }
        }
    }
    Ok(out)
}

/// Scales every spatial cell's channel vector to unit Euclidean norm.
/// Vectors with norm below `epsilon` are returned unchanged.
pub fn l2_normalize_channels(src: &FeatureGrid, epsilon: f64) -> Result<FeatureGrid> {
    if epsilon <= 0.0 {
        return Err(SparError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut out = src.clone();
    let channels = src.channels;
    for cell in out.data.chunks_mut(channels) {
        let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= epsilon {
            for v in cell.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(out)
}

/// Mean over all elements of the squared difference between two
/// identically shaped grids.
pub fn mse(a: &FeatureGrid, b: &FeatureGrid) -> Result<Scalar> {
    if a.shape() != b.shape() {
        return Err(SparError::ShapeMismatch(format!(
            "mse needs matching shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent scalar-loop reference for the half-pixel formula.
    /// Kept free of any shared helper so it can stand as an oracle.
    fn bilinear_oracle(src: &FeatureGrid, out_h: usize, out_w: usize) -> FeatureGrid {
        let (h, w, ch) = src.shape();
        let mut out = FeatureGrid::zeros(out_h, out_w, ch);
        for r in 0..out_h {
            for c in 0..out_w {
                for k in 0..ch {
                    let mut sy = (r as f64 + 0.5) * (h as f64 / out_h as f64) - 0.5;
                    let mut sx = (c as f64 + 0.5) * (w as f64 / out_w as f64) - 0.5;
                    if sy < 0.0 {
                        sy = 0.0;
                    }
                    if sy > (h - 1) as f64 {
                        sy = (h - 1) as f64;
                    }
                    if sx < 0.0 {
                        sx = 0.0;
                    }
                    if sx > (w - 1) as f64 {
                        sx = (w - 1) as f64;
                    }
                    let y0 = sy.floor() as usize;
                    let x0 = sx.floor() as usize;
                    let y1 = if y0 + 1 < h { y0 + 1 } else { h - 1 };
                    let x1 = if x0 + 1 < w { x0 + 1 } else { w - 1 };
                    let dy = sy - y0 as f64;
                    let dx = sx - x0 as f64;
                    let v = src.get(y0, x0, k) * (1.0 - dy) * (1.0 - dx)
                        + src.get(y0, x1, k) * (1.0 - dy) * dx
                        + src.get(y1, x0, k) * dy * (1.0 - dx)
                        + src.get(y1, x1, k) * dy * dx;
                    out.set(r, c, k, v);
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &FeatureGrid, b: &FeatureGrid) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn resize_identity() {
        let g = FeatureGrid::from_fn(4, 4, 1, |r, c, _| (r * 4 + c) as f64);
        let out = bilinear_resize(&g, 4, 4).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn resize_constant_grid_stays_constant() {
        let g = FeatureGrid::from_fn(3, 5, 2, |_, _, _| 7.0);
        let out = bilinear_resize(&g, 9, 2).unwrap();
        assert!(out.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn resize_matches_scalar_oracle_2x2_to_4x4() {
        let g = FeatureGrid::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let got = bilinear_resize(&g, 4, 4).unwrap();
        let want = bilinear_oracle(&g, 4, 4);
        assert!(max_abs_diff(&got, &want) < 1e-6);
        // spot-check one hand value: output (0,0) samples source (-0.25,-0.25),
        // clamped to (0,0)
        assert!((got.get(0, 0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resize_rejects_zero_target() {
        let g = FeatureGrid::zeros(2, 2, 1);
        assert!(bilinear_resize(&g, 0, 4).is_err());
        assert!(bilinear_resize(&g, 4, 0).is_err());
    }

    #[test]
    fn normalize_pythagorean_cell() {
        let g = FeatureGrid::from_vec(1, 1, 2, vec![3.0, 4.0]).unwrap();
        let out = l2_normalize_channels(&g, 1e-12).unwrap();
        assert!((out.get(0, 0, 0) - 0.6).abs() < 1e-12);
        assert!((out.get(0, 0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn normalize_keeps_unit_vectors() {
        let g = FeatureGrid::from_vec(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let out = l2_normalize_channels(&g, 1e-12).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn normalize_degenerate_vector_unchanged() {
        let g = FeatureGrid::from_vec(1, 2, 3, vec![0.0; 6]).unwrap();
        let out = l2_normalize_channels(&g, 1e-12).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn mse_identity_and_two_element_case() {
        let a = FeatureGrid::from_vec(1, 2, 1, vec![0.0, 0.0]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = FeatureGrid::from_vec(1, 2, 1, vec![2.0, 0.0]).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn mse_matches_double_loop_oracle() {
        let mut next = 17u64;
        let mut rng = move || {
            // xorshift; plenty for test data
            next ^= next << 13;
            next ^= next >> 7;
            next ^= next << 17;
            (next % 1000) as f64 / 500.0 - 1.0
        };
        let a = FeatureGrid::from_fn(3, 3, 4, |_, _, _| rng());
        let b = FeatureGrid::from_fn(3, 3, 4, |_, _, _| rng());
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in 0..3 {
            for c in 0..3 {
                for k in 0..4 {
                    let d = a.get(r, c, k) - b.get(r, c, k);
                    sum += d * d;
                    n += 1;
                }
            }
        }
        let want = sum / n as f64;
        assert!((mse(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let a = FeatureGrid::zeros(2, 2, 1);
        let b = FeatureGrid::zeros(2, 3, 1);
        assert!(mse(&a, &b).is_err());
    }

    #[test]
    fn from_vec_validates() {
        assert!(FeatureGrid::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(FeatureGrid::from_vec(2, 2, 1, vec![0.0, 1.0, f64::NAN, 2.0]).is_err());
        assert!(FeatureGrid::from_vec(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn down_up_round_trip_close_for_smooth_grid() {
        // low-frequency ramp + gentle sine
        let g = FeatureGrid::from_fn(8, 8, 1, |r, c, _| {
            0.5 * r as f64 + 0.25 * c as f64 + (r as f64 * 0.3).sin()
        });
        let up = bilinear_resize(&g, 16, 16).unwrap();
        let back = bilinear_resize(&up, 8, 8).unwrap();
        let num: f64 = g
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den: f64 = g.data().iter().map(|a| a * a).sum();
        assert!((num / den).sqrt() < 0.1, "relative error {}", (num / den).sqrt());
    }

    proptest! {
        #[test]
        fn resize_matches_oracle_on_random_grids(
            h in 1usize..6, w in 1usize..6, ch in 1usize..4,
            oh in 1usize..9, ow in 1usize..9,
            seed in 0u64..1000,
        ) {
            let mut state = seed.wrapping_mul(2654435761).wrapping_add(1);
            let g = FeatureGrid::from_fn(h, w, ch, |_, _, _| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 2048) as f64 / 1024.0 - 1.0
            });
            let got = bilinear_resize(&g, oh, ow).unwrap();
            let want = bilinear_oracle(&g, oh, ow);
            prop_assert!(max_abs_diff(&got, &want) < 1e-6);
        }

        #[test]
        fn resize_respects_min_max_bounds(
            h in 1usize..6, w in 1usize..6,
            oh in 1usize..12, ow in 1usize..12,
            seed in 0u64..1000,
        ) {
            let mut state = seed.wrapping_mul(11400714819323198485).wrapping_add(3);
            let g = FeatureGrid::from_fn(h, w, 1, |_, _, _| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 4096) as f64 / 2048.0 - 1.0
            });
            let lo = g.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = g.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = bilinear_resize(&g, oh, ow).unwrap();
            prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn mse_is_symmetric(seed in 0u64..1000) {
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(9);
            let mut gen = move || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 1000) as f64 / 250.0 - 2.0
            };
            let a = FeatureGrid::from_fn(2, 3, 2, |_, _, _| gen());
            let b = FeatureGrid::from_fn(2, 3, 2, |_, _, _| gen());
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        }

        #[test]
        fn normalize_is_idempotent(seed in 0u64..1000) {
            let mut state = seed.wrapping_mul(1442695040888963407).wrapping_add(5);
            let g = FeatureGrid::from_fn(2, 2, 3, |_, _, _| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 1000) as f64 / 100.0 - 5.0
            });
            let once = l2_normalize_channels(&g, 1e-12).unwrap();
            let twice = l2_normalize_channels(&once, 1e-12).unwrap();
            let diff = once
                .data()
                .iter()
                .zip(twice.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            prop_assert!(diff < 1e-6);
        }
    }
}
