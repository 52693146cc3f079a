//! Configuration-driven command implementations behind the `spar` binary.
//!
//! The config file is flat `section.key = value` text; unknown keys are
//! rejected so typos fail fast. Every command validates the paths it
//! needs before doing any work.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{self, BenchOptions, InferenceMode, TimingRecord};
use crate::distill::{self, FeatureStore, TrainConfig, Trainable};
use crate::pnm;
use crate::segment::{self, ClassEmbeddings, EvalReport, SegMask};
use crate::tensor::{bilinear_resize, FeatureGrid};
use crate::vit::{self, ModelParams, ViTConfig};
use crate::window::{plan_windows, stitch_predictions};
use crate::{Result, SparError};

/// Process exit code for an error, per the documented convention:
/// 1 usage/config, 2 data, 3 internal invariant violation.
pub fn exit_code(err: &SparError) -> i32 {
    match err {
        SparError::Config(_) | SparError::InvalidArgument(_) => 1,
        _ => 2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub vit: ViTConfig,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub train: TrainConfig,
    pub dataset_dir: Option<PathBuf>,
    pub store_path: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSection {
    pub window: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub images_dir: Option<PathBuf>,
    pub masks_dir: Option<PathBuf>,
    pub class_embeddings: Option<PathBuf>,
    pub ignore_index: Option<u32>,
    pub report_csv: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSection {
    pub strides: Vec<usize>,
    pub sub_batch: usize,
    pub warmup: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub csv_path: PathBuf,
}

/// Parsed `section.key = value` run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub teacher: TeacherSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection {
                vit: ViTConfig {
                    patch_size: 16,
                    native_side: 512,
                    channels: 8,
                    num_blocks: 2,
                    num_heads: 2,
                    mlp_ratio: 4.0,
                    last_attention_identity: false,
                },
                checkpoint: None,
            },
            train: TrainSection {
                train: TrainConfig::default(),
                dataset_dir: None,
                store_path: None,
                checkpoint_out: None,
                log_path: None,
            },
            teacher: TeacherSection {
                window: 512,
                stride: 24,
            },
            eval: EvalSection {
                images_dir: None,
                masks_dir: None,
                class_embeddings: None,
                ignore_index: Some(255),
                report_csv: PathBuf::from("eval_report.csv"),
            },
            bench: BenchSection {
                strides: vec![32, 64, 128, 256, 512],
                sub_batch: 60,
                warmup: 10,
                image_h: 1024,
                image_w: 2048,
                csv_path: PathBuf::from("bench.csv"),
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SparError::Config(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(SparError::Config(format!(
            "key `{key}`: expected a boolean, got `{value}`"
        ))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| SparError::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SparError::Config(format!("line {}: expected `section.key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value)?;
        }
        cfg.model.vit.validate()?;
        cfg.train.train.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.patch_size" => self.model.vit.patch_size = parse_num(key, value)?,
            "model.native_side" => self.model.vit.native_side = parse_num(key, value)?,
            "model.channels" => self.model.vit.channels = parse_num(key, value)?,
            "model.num_blocks" => self.model.vit.num_blocks = parse_num(key, value)?,
            "model.num_heads" => self.model.vit.num_heads = parse_num(key, value)?,
            "model.mlp_ratio" => self.model.vit.mlp_ratio = parse_num(key, value)?,
            "model.last_attention_identity" => {
                self.model.vit.last_attention_identity = parse_bool(key, value)?
            }
            "model.checkpoint" => self.model.checkpoint = Some(PathBuf::from(value)),
            "train.epochs" => self.train.train.epochs = parse_num(key, value)?,
            "train.learning_rate" => self.train.train.learning_rate = parse_num(key, value)?,
            "train.weight_decay" => self.train.train.weight_decay = parse_num(key, value)?,
            "train.adam_beta1" => self.train.train.adam_beta1 = parse_num(key, value)?,
            "train.adam_beta2" => self.train.train.adam_beta2 = parse_num(key, value)?,
            "train.adam_epsilon" => self.train.train.adam_epsilon = parse_num(key, value)?,
            "train.trainable" => self.train.train.trainable = Trainable::parse(value)?,
            "train.seed" => self.train.train.seed = parse_num(key, value)?,
            "train.resize_short_min" => self.train.train.resize_short_min = parse_num(key, value)?,
            "train.resize_short_max" => self.train.train.resize_short_max = parse_num(key, value)?,
            "train.crop_min" => self.train.train.crop_min = parse_num(key, value)?,
            "train.flip_prob" => self.train.train.flip_prob = parse_num(key, value)?,
            "train.crop_prob" => self.train.train.crop_prob = parse_num(key, value)?,
            "train.dataset_dir" => self.train.dataset_dir = Some(PathBuf::from(value)),
            "train.store_path" => self.train.store_path = Some(PathBuf::from(value)),
            "train.checkpoint_out" => self.train.checkpoint_out = Some(PathBuf::from(value)),
            "train.log_path" => self.train.log_path = Some(PathBuf::from(value)),
            "teacher.k" => self.teacher.window = parse_num(key, value)?,
            "teacher.s" => self.teacher.stride = parse_num(key, value)?,
            "eval.images_dir" => self.eval.images_dir = Some(PathBuf::from(value)),
            "eval.masks_dir" => self.eval.masks_dir = Some(PathBuf::from(value)),
            "eval.class_embeddings" => self.eval.class_embeddings = Some(PathBuf::from(value)),
            "eval.ignore_index" => {
                self.eval.ignore_index = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "eval.report_csv" => self.eval.report_csv = PathBuf::from(value),
            "bench.strides" => {
                let strides: Result<Vec<usize>> = value
                    .split(',')
                    .map(|t| parse_num::<usize>(key, t.trim()))
                    .collect();
                self.bench.strides = strides?;
            }
            "bench.sub_batch" => self.bench.sub_batch = parse_num(key, value)?,
            "bench.warmup" => self.bench.warmup = parse_num(key, value)?,
            "bench.image_h" => self.bench.image_h = parse_num(key, value)?,
            "bench.image_w" => self.bench.image_w = parse_num(key, value)?,
            "bench.csv_path" => self.bench.csv_path = PathBuf::from(value),
            _ => {
                return Err(SparError::Config(format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }

    fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| SparError::Config(format!("config key `{key}` is required")))
    }

    fn require_exists<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        let p = Self::require(path, key)?;
        if !p.exists() {
            return Err(SparError::Config(format!(
                "`{key}` points to missing path {}",
                p.display()
            )));
        }
        Ok(p)
    }
}

/// Loads a dataset image: P6 color, or P5 grayscale replicated to three
/// channels.
fn load_image(path: &Path) -> Result<FeatureGrid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => pnm::read_ppm(path),
        Some("pgm") => {
            let (h, w, bytes) = pnm::read_pgm(path)?;
            Ok(FeatureGrid::from_fn(h, w, 3, |r, c, _| {
                bytes[r * w + c] as f64 / 255.0
            }))
        }
        _ => Err(SparError::Format {
            format: "pnm",
            detail: format!("{}: unsupported extension", path.display()),
        }),
    }
}

/// Sorted (id, image) pairs from every readable PPM/PGM in `dir`.
/// Unreadable files are skipped with a warning; the error case is
/// "every file failed".
fn load_dataset(dir: &Path) -> Result<Vec<(String, FeatureGrid)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| SparError::io(format!("listing {}", dir.display()), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm") | Some("pgm")
            )
        })
        .collect();
    paths.sort();
    let mut dataset = Vec::new();
    let mut failures = 0usize;
    for path in &paths {
        match load_image(path) {
            Ok(img) => {
                let id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("unnamed")
                    .to_string();
                dataset.push((id, img));
            }
            Err(e) => {
                failures += 1;
                eprintln!("warning: skipping {}: {e}", path.display());
            }
        }
    }
    if dataset.is_empty() && failures > 0 {
        return Err(SparError::Format {
            format: "dataset",
            detail: format!("all {failures} images in {} failed to load", dir.display()),
        });
    }
    Ok(dataset)
}

fn load_model(cfg: &RunConfig) -> Result<(ViTConfig, ModelParams)> {
    let path = RunConfig::require_exists(&cfg.model.checkpoint, "model.checkpoint")?;
    let (vit_cfg, params) = vit::load_checkpoint(path)?;
    Ok((vit_cfg, params))
}

/// `init-params`: writes a freshly initialized checkpoint.
pub fn cmd_init_params(cfg: &RunConfig, seed: u64) -> Result<()> {
    let path = RunConfig::require(&cfg.model.checkpoint, "model.checkpoint")?;
    let params = vit::init_params(&cfg.model.vit, seed)?;
    vit::save_checkpoint(path, &cfg.model.vit, &params)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// `precompute`: teacher features for every dataset image into the store.
pub fn cmd_precompute(cfg: &RunConfig, seed: u64, threads: usize) -> Result<()> {
    let dataset_dir = RunConfig::require_exists(&cfg.train.dataset_dir, "train.dataset_dir")?;
    let store_path = RunConfig::require(&cfg.train.store_path, "train.store_path")?;
    let (vit_cfg, params) = load_model(cfg)?;
    let dataset = load_dataset(dataset_dir)?;
    if dataset.is_empty() {
        eprintln!("warning: dataset {} holds no images", dataset_dir.display());
    }
    let mut train_cfg = cfg.train.train.clone();
    train_cfg.seed = seed;
    let store = distill::precompute_teacher(
        &dataset,
        &params,
        &vit_cfg,
        &train_cfg,
        cfg.teacher.window,
        cfg.teacher.stride,
        store_path,
        threads,
    )?;
    let bytes = fs::metadata(store_path)
        .map_err(|e| SparError::io(format!("stat {}", store_path.display()), e))?
        .len();
    println!("{} records, {} bytes", store.len(), bytes);
    Ok(())
}

/// `train`: distills the student against the stored teacher features.
pub fn cmd_train(cfg: &RunConfig, seed: u64, _threads: usize) -> Result<()> {
    let dataset_dir = RunConfig::require_exists(&cfg.train.dataset_dir, "train.dataset_dir")?;
    let store_path = RunConfig::require_exists(&cfg.train.store_path, "train.store_path")?;
    let out_path = RunConfig::require(&cfg.train.checkpoint_out, "train.checkpoint_out")?;
    let (vit_cfg, params) = load_model(cfg)?;
    let dataset = load_dataset(dataset_dir)?;
    let store = FeatureStore::read(store_path)?;
    let mut train_cfg = cfg.train.train.clone();
    train_cfg.seed = seed;
    let mut log: Box<dyn Write> = match &cfg.train.log_path {
        Some(p) => Box::new(
            fs::File::create(p).map_err(|e| SparError::io(format!("creating {}", p.display()), e))?,
        ),
        None => Box::new(std::io::stdout()),
    };
    let trained = distill::train(
        &train_cfg,
        &vit_cfg,
        &dataset,
        &store,
        params,
        cfg.teacher.window,
        &mut log,
    )?;
    vit::save_checkpoint(out_path, &vit_cfg, &trained)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

/// Rounds both sides down to patch multiples (minimum one patch).
fn to_patch_grid(image: &FeatureGrid, patch: usize) -> Result<FeatureGrid> {
    let (h, w, _) = image.shape();
    let fh = ((h / patch) * patch).max(patch);
    let fw = ((w / patch) * patch).max(patch);
    bilinear_resize(image, fh, fw)
}

/// Per-pixel class scores for one image in the requested mode.
fn image_scores(
    image: &FeatureGrid,
    params: &ModelParams,
    vit_cfg: &ViTConfig,
    classes: &ClassEmbeddings,
    mode: InferenceMode,
    teacher: &TeacherSection,
    forward_seconds: &mut f64,
) -> Result<FeatureGrid> {
    match mode {
        InferenceMode::SinglePass => {
            let input = to_patch_grid(image, vit_cfg.patch_size)?;
            let start = Instant::now();
            let (feats, _) = vit::forward(&input, params, vit_cfg)?;
            *forward_seconds += start.elapsed().as_secs_f64();
            segment::class_similarities(&feats, classes)
        }
        InferenceMode::SlidingWindow => {
            let input = to_patch_grid(image, vit_cfg.patch_size)?;
            let input = distill::ensure_min_side(&input, teacher.window, vit_cfg.patch_size)?;
            let (h, w, _) = input.shape();
            let plan = plan_windows(h, w, teacher.window, teacher.stride, vit_cfg.patch_size)?;
            let mut sims = Vec::with_capacity(plan.m);
            for &(r0, c0) in &plan.origins {
                let crop = FeatureGrid::from_fn(teacher.window, teacher.window, 3, |r, c, k| {
                    input.get(r0 + r, c0 + c, k)
                });
                let start = Instant::now();
                let feats = vit::forward_window(&crop, params, vit_cfg)?;
                *forward_seconds += start.elapsed().as_secs_f64();
                let sim = segment::class_similarities(&feats, classes)?;
                sims.push(bilinear_resize(&sim, teacher.window, teacher.window)?);
            }
            stitch_predictions(&sims, &plan)
        }
    }
}

/// `eval`: mIoU over aligned image/mask pairs, printed and saved as CSV.
pub fn cmd_eval(cfg: &RunConfig, mode: InferenceMode, _threads: usize) -> Result<EvalReport> {
    let images_dir = RunConfig::require_exists(&cfg.eval.images_dir, "eval.images_dir")?;
    let masks_dir = RunConfig::require_exists(&cfg.eval.masks_dir, "eval.masks_dir")?;
    let classes_path =
        RunConfig::require_exists(&cfg.eval.class_embeddings, "eval.class_embeddings")?;
    let (vit_cfg, params) = load_model(cfg)?;
    let classes = ClassEmbeddings::read(classes_path)?;
    let dataset = load_dataset(images_dir)?;
    if dataset.is_empty() {
        return Err(SparError::Format {
            format: "dataset",
            detail: format!("no images in {}", images_dir.display()),
        });
    }
    let mut missing = Vec::new();
    for (id, _) in &dataset {
        if !masks_dir.join(format!("{id}.pgm")).exists() {
            missing.push(format!("{id}.pgm"));
        }
    }
    if !missing.is_empty() {
        return Err(SparError::Format {
            format: "dataset",
            detail: format!("missing masks in {}: {}", masks_dir.display(), missing.join(", ")),
        });
    }

    let mut preds = Vec::with_capacity(dataset.len());
    let mut gts = Vec::with_capacity(dataset.len());
    let mut forward_seconds = 0.0;
    for (id, image) in &dataset {
        let (mh, mw, bytes) = pnm::read_pgm(&masks_dir.join(format!("{id}.pgm")))?;
        let gt = SegMask::new(mh, mw, bytes.into_iter().map(u32::from).collect())?;
        let scores = image_scores(
            image,
            &params,
            &vit_cfg,
            &classes,
            mode,
            &cfg.teacher,
            &mut forward_seconds,
        )?;
        preds.push(segment::predict_mask(&scores, mh, mw)?);
        gts.push(gt);
    }
    let mut report = segment::miou(&preds, &gts, classes.len(), cfg.eval.ignore_index)?;
    let (h0, w0, _) = dataset[0].1.shape();
    report.timings.push(TimingRecord {
        mode,
        image_h: h0,
        image_w: w0,
        window: cfg.teacher.window,
        stride: match mode {
            InferenceMode::SinglePass => 0,
            InferenceMode::SlidingWindow => cfg.teacher.stride,
        },
        m: 0,
        sub_batch: 0,
        seconds: forward_seconds,
        warmup_passes: 0,
        threads: 1,
    });

    let mut csv = String::from("class,iou\n");
    println!("class                            IoU");
    for (i, iou) in report.per_class.iter().enumerate() {
        let name = &classes.names()[i];
        match iou {
            Some(v) => {
                println!("{name:<32} {v:.4}");
                csv.push_str(&format!("{name},{v}\n"));
            }
            None => {
                println!("{name:<32} absent");
                csv.push_str(&format!("{name},absent\n"));
            }
        }
    }
    println!("mean IoU: {:.4} ({mode})", report.mean_iou);
    csv.push_str(&format!("mean,{}\n", report.mean_iou));
    fs::write(&cfg.eval.report_csv, csv)
        .map_err(|e| SparError::io(format!("writing {}", cfg.eval.report_csv.display()), e))?;
    Ok(report)
}

/// Deterministic synthetic benchmark image.
fn bench_image(h: usize, w: usize, seed: u64) -> FeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBE9C);
    let mut data = Vec::with_capacity(h * w * 3);
    for _ in 0..h * w * 3 {
        data.push(rng.random_range(0.0..1.0));
    }
    FeatureGrid::from_vec(h, w, 3, data).expect("finite synthetic image")
}

/// `bench`: stride sweep on a synthetic image, CSV out, optional SVG.
pub fn cmd_bench(
    cfg: &RunConfig,
    seed: u64,
    threads: usize,
    svg_out: Option<&Path>,
    metric_csv: Option<&Path>,
) -> Result<Vec<TimingRecord>> {
    let (vit_cfg, params) = match &cfg.model.checkpoint {
        Some(p) if p.exists() => vit::load_checkpoint(p)?,
        _ => {
            let params = vit::init_params(&cfg.model.vit, seed)?;
            (cfg.model.vit.clone(), params)
        }
    };
    let image = bench_image(cfg.bench.image_h, cfg.bench.image_w, seed);
    let opts = BenchOptions {
        warmup_passes: cfg.bench.warmup,
        sub_batch: cfg.bench.sub_batch,
        threads,
    };
    let records = bench::sweep(&params, &vit_cfg, &image, &cfg.bench.strides, &opts)?;
    let mut out = Vec::new();
    bench::write_csv(&records, &mut out)?;
    fs::write(&cfg.bench.csv_path, &out)
        .map_err(|e| SparError::io(format!("writing {}", cfg.bench.csv_path.display()), e))?;
    print!("{}", String::from_utf8_lossy(&out));

    if let Some(svg_path) = svg_out {
        let metrics = match metric_csv {
            Some(p) => parse_metric_csv(p)?,
            None => Vec::new(),
        };
        let mut points = Vec::new();
        for r in &records {
            let metric = metrics
                .iter()
                .find(|(s, _)| *s == r.stride)
                .map(|(_, v)| *v)
                .unwrap_or(r.m as f64);
            let label = match r.mode {
                InferenceMode::SinglePass => "single_pass".to_string(),
                InferenceMode::SlidingWindow => format!("s={}", r.stride),
            };
            points.push((r.seconds, metric, label));
        }
        let y_label = if metric_csv.is_some() { "metric" } else { "windows" };
        fs::write(svg_path, bench::svg_scatter(&points, "seconds", y_label))
            .map_err(|e| SparError::io(format!("writing {}", svg_path.display()), e))?;
        println!("wrote {}", svg_path.display());
    }
    Ok(records)
}

/// Metric file for the trade-off plot: lines of `stride,value`, where
/// stride 0 refers to the single-pass record.
fn parse_metric_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| SparError::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("s,") {
            continue;
        }
        let (s, v) = line.split_once(',').ok_or_else(|| SparError::Format {
            format: "metric csv",
            detail: format!("bad line `{line}`"),
        })?;
        out.push((
            parse_num::<usize>("metric stride", s.trim())?,
            parse_num::<f64>("metric value", v.trim())?,
        ));
    }
    Ok(out)
}

/// `pca-viz`: projects single-pass features onto the PCA basis of the
/// sliding-window representation of the same image and writes a PPM.
pub fn cmd_pca_viz(cfg: &RunConfig, image_path: &Path, out_path: &Path, threads: usize) -> Result<()> {
    if !image_path.exists() {
        return Err(SparError::Config(format!(
            "image {} does not exist",
            image_path.display()
        )));
    }
    let (vit_cfg, params) = load_model(cfg)?;
    let image = load_image(image_path)?;
    let input = to_patch_grid(&image, vit_cfg.patch_size)?;
    let input = distill::ensure_min_side(&input, cfg.teacher.window, vit_cfg.patch_size)?;
    let basis = distill::teacher_features(&input, &params, &vit_cfg, cfg.teacher.stride, threads)?;
    let (feats, _) = vit::forward(&input, &params, &vit_cfg)?;
    let projected = segment::pca_project(&feats, &basis)?;
    let (h, w, _) = input.shape();
    let upsampled = bilinear_resize(&projected, h, w)?;
    pnm::write_ppm(out_path, &upsampled)?;
    println!("wrote {}", out_path.display());
    Ok(())
}
