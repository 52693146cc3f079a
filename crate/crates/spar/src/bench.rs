//! Inference-time measurement: warmed-up single-pass and sliding-window
//! timing with sub-batched window processing and CSV/SVG emission.
//!
//! Only forward passes are timed; window planning, cropping, stitching
//! and I/O stay outside the clock.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::tensor::FeatureGrid;
use crate::vit::{forward, forward_window, ModelParams, ViTConfig};
use crate::window::plan_windows;
use crate::{Result, SparError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    SinglePass,
    SlidingWindow,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceMode::SinglePass => write!(f, "single_pass"),
            InferenceMode::SlidingWindow => write!(f, "sliding_window"),
        }
    }
}

/// One timing measurement. For single-pass records `m == 1` and the
/// stride/sub-batch fields are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub mode: InferenceMode,
    pub image_h: usize,
    pub image_w: usize,
    pub window: usize,
    pub stride: usize,
    pub m: usize,
    pub sub_batch: usize,
    pub seconds: f64,
    pub warmup_passes: usize,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub warmup_passes: usize,
    pub sub_batch: usize,
    /// 1 = strictly sequential forwards; >1 runs window forwards on a
    /// local thread pool and is recorded in the output.
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup_passes: 10,
            sub_batch: 60,
            threads: 1,
        }
    }
}

/// Runs `warmup_passes` untimed forwards, then times exactly one.
pub fn time_single_pass(
    params: &ModelParams,
    cfg: &ViTConfig,
    image: &FeatureGrid,
    opts: &BenchOptions,
) -> Result<TimingRecord> {
    for _ in 0..opts.warmup_passes {
        forward(image, params, cfg)?;
    }
    let start = Instant::now();
    forward(image, params, cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let (h, w, _) = image.shape();
    Ok(TimingRecord {
        mode: InferenceMode::SinglePass,
        image_h: h,
        image_w: w,
        window: cfg.native_side,
        stride: 0,
        m: 1,
        sub_batch: 0,
        seconds,
        warmup_passes: opts.warmup_passes,
        threads: 1,
    })
}

fn crop_window(image: &FeatureGrid, r0: usize, c0: usize, side: usize) -> FeatureGrid {
    FeatureGrid::from_fn(side, side, image.channels(), |r, c, k| {
        image.get(r0 + r, c0 + c, k)
    })
}

/// Plans windows, crops them untimed, then accumulates forward time over
/// sub-batches of `opts.sub_batch` windows. Warm-up mirrors the
/// single-pass protocol.
pub fn time_sliding_window(
    params: &ModelParams,
    cfg: &ViTConfig,
    image: &FeatureGrid,
    stride: usize,
    opts: &BenchOptions,
) -> Result<TimingRecord> {
    let (h, w, _) = image.shape();
    let plan = plan_windows(h, w, cfg.native_side, stride, cfg.patch_size)?;
    let crops: Vec<FeatureGrid> = plan
        .origins
        .iter()
        .map(|&(r0, c0)| crop_window(image, r0, c0, cfg.native_side))
        .collect();
    for _ in 0..opts.warmup_passes {
        forward_window(&crops[0], params, cfg)?;
    }
    let sub_batch = opts.sub_batch.max(1);
    let mut seconds = 0.0;
    if opts.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| SparError::InvalidArgument(format!("thread pool: {e}")))?;
        for group in crops.chunks(sub_batch) {
            let start = Instant::now();
            pool.install(|| {
                group
                    .par_iter()
                    .map(|c| forward_window(c, params, cfg).map(|_| ()))
                    .collect::<Result<Vec<()>>>()
            })?;
            seconds += start.elapsed().as_secs_f64();
        }
    } else {
        for group in crops.chunks(sub_batch) {
            let start = Instant::now();
            for c in group {
                forward_window(c, params, cfg)?;
            }
            seconds += start.elapsed().as_secs_f64();
        }
    }
    Ok(TimingRecord {
        mode: InferenceMode::SlidingWindow,
        image_h: h,
        image_w: w,
        window: cfg.native_side,
        stride,
        m: plan.m,
        sub_batch,
        seconds,
        warmup_passes: opts.warmup_passes,
        threads: opts.threads,
    })
}

/// One sliding-window record per stride plus a final single-pass record.
pub fn sweep(
    params: &ModelParams,
    cfg: &ViTConfig,
    image: &FeatureGrid,
    strides: &[usize],
    opts: &BenchOptions,
) -> Result<Vec<TimingRecord>> {
    if strides.is_empty() {
        return Err(SparError::InvalidArgument("stride list is empty".into()));
    }
    for &s in strides {
        if s == 0 || s > cfg.native_side {
            return Err(SparError::InvalidArgument(format!(
                "stride {s} outside [1, {}]",
                cfg.native_side
            )));
        }
    }
    let mut records = Vec::with_capacity(strides.len() + 1);
    for &s in strides {
        records.push(time_sliding_window(params, cfg, image, s, opts)?);
    }
    records.push(time_single_pass(params, cfg, image, opts)?);
    Ok(records)
}

pub const CSV_HEADER: &str = "mode,H,W,K,s,m,sub_batch,warmup,seconds,threads";

/// Writes records as CSV, one line per record after the header.
pub fn write_csv(records: &[TimingRecord], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{CSV_HEADER}").map_err(|e| SparError::io("writing csv", e))?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.mode,
            r.image_h,
            r.image_w,
            r.window,
            r.stride,
            r.m,
            r.sub_batch,
            r.warmup_passes,
            r.seconds,
            r.threads
        )
        .map_err(|e| SparError::io("writing csv", e))?;
    }
    Ok(())
}

/// Minimal scatter plot of `(seconds, metric)` points with text labels.
pub fn svg_scatter(points: &[(f64, f64, String)], x_label: &str, y_label: &str) -> String {
    let (width, height, margin) = (640.0, 420.0, 50.0);
    let (x_lo, x_hi) = bounds(points.iter().map(|p| p.0));
    let (y_lo, y_hi) = bounds(points.iter().map(|p| p.1));
    let sx = |x: f64| margin + (x - x_lo) / (x_hi - x_lo).max(1e-12) * (width - 2.0 * margin);
    let sy = |y: f64| height - margin - (y - y_lo) / (y_hi - y_lo).max(1e-12) * (height - 2.0 * margin);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = margin,
        b = height - margin,
        r = width - margin,
        t = margin
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n",
        width / 2.0,
        height - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 14 {})\">{y_label}</text>\n",
        height / 2.0,
        height / 2.0
    ));
    for (x, y, label) in points {
        let (px, py) = (sx(*x), sy(*y));
        svg.push_str(&format!(
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"4\" fill=\"#2196F3\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{label}</text>\n",
            px + 6.0,
            py - 6.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::init_params;

    fn tiny() -> (ViTConfig, ModelParams) {
        let cfg = ViTConfig {
            patch_size: 16,
            native_side: 32,
            channels: 4,
            num_blocks: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            last_attention_identity: false,
        };
        let params = init_params(&cfg, 12).unwrap();
        (cfg, params)
    }

    fn image(side: usize) -> FeatureGrid {
        FeatureGrid::from_fn(side, side, 3, |r, c, k| {
            ((r * 7 + c * 3 + k) % 101) as f64 / 101.0
        })
    }

    #[test]
    fn single_pass_record_fields() {
        let (cfg, params) = tiny();
        let opts = BenchOptions {
            warmup_passes: 1,
            ..BenchOptions::default()
        };
        let img = image(64);
        let a = time_single_pass(&params, &cfg, &img, &opts).unwrap();
        let b = time_single_pass(&params, &cfg, &img, &opts).unwrap();
        assert_eq!(a.m, 1);
        assert_eq!(a.mode, InferenceMode::SinglePass);
        assert!(a.seconds >= 0.0);
        // identical metadata, only seconds may differ
        assert_eq!(
            (a.image_h, a.image_w, a.window, a.stride, a.m, a.sub_batch, a.warmup_passes),
            (b.image_h, b.image_w, b.window, b.stride, b.m, b.sub_batch, b.warmup_passes)
        );
    }

    #[test]
    fn sliding_window_count_matches_plan() {
        let (cfg, params) = tiny();
        let opts = BenchOptions {
            warmup_passes: 1,
            sub_batch: 3,
            threads: 1,
        };
        let img = image(64);
        let rec = time_sliding_window(&params, &cfg, &img, 16, &opts).unwrap();
        let plan = plan_windows(64, 64, 32, 16, 16).unwrap();
        assert_eq!(rec.m, plan.m);
        assert_eq!(rec.stride, 16);
    }

    #[test]
    fn sweep_emits_one_row_per_stride_plus_single_pass() {
        let (cfg, params) = tiny();
        let opts = BenchOptions {
            warmup_passes: 0,
            sub_batch: 60,
            threads: 1,
        };
        let img = image(64);
        let records = sweep(&params, &cfg, &img, &[16, 32], &opts).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records[0].m >= records[1].m, "m must not grow with stride");
        assert_eq!(records[2].mode, InferenceMode::SinglePass);

        let mut csv = Vec::new();
        write_csv(&records, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with(CSV_HEADER));
    }

    #[test]
    fn larger_inputs_take_longer() {
        let (cfg, params) = tiny();
        let opts = BenchOptions {
            warmup_passes: 1,
            ..BenchOptions::default()
        };
        let small = image(32);
        let large = image(256);
        let med = |img: &FeatureGrid| {
            let mut ts: Vec<f64> = (0..5)
                .map(|_| time_single_pass(&params, &cfg, img, &opts).unwrap().seconds)
                .collect();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ts[2]
        };
        assert!(med(&small) < med(&large));
    }

    #[test]
    fn svg_contains_points_and_labels() {
        let svg = svg_scatter(
            &[(0.1, 30.0, "s=256".into()), (1.0, 40.0, "s=24".into())],
            "seconds",
            "mIoU",
        );
        assert!(svg.contains("<circle"));
        assert!(svg.contains("s=24"));
        assert!(svg.contains("</svg>"));
    }
}
