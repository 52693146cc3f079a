//! Zero-shot open-vocabulary scoring, pixel-level prediction, mIoU
//! evaluation, and PCA feature visualization.

use std::fs;
use std::path::Path;

use crate::bench::TimingRecord;
use crate::tensor::{bilinear_resize, l2_normalize_channels, FeatureGrid};
use crate::{Result, SparError};

const NORM_EPS: f64 = 1e-12;

/// Precomputed text-encoder vectors, one per class name.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    names: Vec<String>,
    dim: usize,
    /// Row-major `[C, dim]`.
    vectors: Vec<f64>,
}

impl ClassEmbeddings {
    pub fn new(names: Vec<String>, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if names.len() * dim != vectors.len() {
            return Err(SparError::ShapeMismatch(format!(
                "{} classes x {dim} dims needs {} values, got {}",
                names.len(),
                names.len() * dim,
                vectors.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &names {
            if !seen.insert(name.clone()) {
                return Err(SparError::Format {
                    format: "class embeddings",
                    detail: format!("duplicate class name `{name}`"),
                });
            }
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(SparError::Format {
                format: "class embeddings",
                detail: "non-finite vector component".into(),
            });
        }
        Ok(ClassEmbeddings { names, dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vector(&self, class: usize) -> &[f64] {
        &self.vectors[class * self.dim..(class + 1) * self.dim]
    }

    /// Text format: header `SPARCLS1 C d`, then per class one name line
    /// and one line of `d` space-separated reals.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SparError::io(format!("reading {}", path.display()), e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| SparError::Format {
            format: "class embeddings",
            detail: "empty file".into(),
        })?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("SPARCLS1") {
            return Err(SparError::Format {
                format: "class embeddings",
                detail: format!("bad header `{header}`"),
            });
        }
        let count: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| SparError::Format {
                format: "class embeddings",
                detail: "missing class count".into(),
            })?;
        let dim: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| SparError::Format {
                format: "class embeddings",
                detail: "missing dimension".into(),
            })?;
        let mut names = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count * dim);
        for i in 0..count {
            let name = lines.next().ok_or_else(|| SparError::Format {
                format: "class embeddings",
                detail: format!("missing name line for class {i}"),
            })?;
            names.push(name.trim().to_string());
            let vec_line = lines.next().ok_or_else(|| SparError::Format {
                format: "class embeddings",
                detail: format!("missing vector line for class `{}`", names[i]),
            })?;
            let values: Vec<f64> = vec_line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| SparError::Format {
                    format: "class embeddings",
                    detail: format!("bad vector component for class `{}`", names[i]),
                })?;
            if values.len() != dim {
                return Err(SparError::Format {
                    format: "class embeddings",
                    detail: format!(
                        "class `{}` has {} components, expected {dim}",
                        names[i],
                        values.len()
                    ),
                });
            }
            vectors.extend(values);
        }
        ClassEmbeddings::new(names, dim, vectors)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = format!("SPARCLS1 {} {}\n", self.len(), self.dim);
        for (i, name) in self.names.iter().enumerate() {
            out.push_str(name);
            out.push('\n');
            let row: Vec<String> = self.vector(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| SparError::io(format!("writing {}", path.display()), e))
    }
}

/// Per-pixel class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(SparError::ShapeMismatch(format!(
                "{height}x{width} mask needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(SegMask {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }
}

/// Global confusion counts; rows index ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
    pub ignore_index: Option<u32>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore_index: Option<u32>) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
            ignore_index,
        }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    fn accumulate(&mut self, gt: &SegMask, pred: &SegMask) -> Result<()> {
        if (gt.height, gt.width) != (pred.height, pred.width) {
            return Err(SparError::ShapeMismatch(format!(
                "mask {}x{} vs prediction {}x{}",
                gt.height, gt.width, pred.height, pred.width
            )));
        }
        for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
            if Some(g) == self.ignore_index {
                continue;
            }
            if g as usize >= self.classes || p as usize >= self.classes {
                return Err(SparError::InvalidArgument(format!(
                    "label pair (gt {g}, pred {p}) outside the {}-class universe",
                    self.classes
                )));
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }
}

/// Evaluation summary: per-class IoUs (`None` = class absent from both
/// ground truth and prediction), their mean, the confusion matrix, and
/// any timing records collected alongside.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub confusion: ConfusionMatrix,
    pub timings: Vec<TimingRecord>,
}

/// Cosine similarity between every feature cell and every class vector.
/// Output values lie in `[-1, 1]`.
pub fn class_similarities(features: &FeatureGrid, classes: &ClassEmbeddings) -> Result<FeatureGrid> {
    let (h, w, d) = features.shape();
    if d != classes.dim() {
        return Err(SparError::ShapeMismatch(format!(
            "features have {d} channels, class vectors have {}",
            classes.dim()
        )));
    }
    let v = l2_normalize_channels(features, NORM_EPS)?;
    let c = classes.len();
    let mut normed_classes = vec![0.0; c * d];
    for i in 0..c {
        let row = classes.vector(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let target = &mut normed_classes[i * d..(i + 1) * d];
        if norm >= NORM_EPS {
            for (t, &x) in target.iter_mut().zip(row) {
                *t = x / norm;
            }
        } else {
            target.copy_from_slice(row);
        }
    }
    Ok(FeatureGrid::from_fn(h, w, c, |r, col, cls| {
        let cell = v.cell(r, col);
        let cvec = &normed_classes[cls * d..(cls + 1) * d];
        let dot: f64 = cell.iter().zip(cvec).map(|(a, b)| a * b).sum();
        dot.clamp(-1.0, 1.0)
    }))
}

/// Upsamples the similarity map to pixel resolution and takes the
/// per-pixel argmax; ties resolve to the lowest class index.
pub fn predict_mask(similarities: &FeatureGrid, out_h: usize, out_w: usize) -> Result<SegMask> {
    let up = bilinear_resize(similarities, out_h, out_w)?;
    let mut labels = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        for col in 0..out_w {
            let cell = up.cell(r, col);
            let mut best = 0usize;
            for (i, &v) in cell.iter().enumerate().skip(1) {
                if v > cell[best] {
                    best = i;
                }
            }
            labels.push(best as u32);
        }
    }
    SegMask::new(out_h, out_w, labels)
}

/// Accumulates a global confusion matrix over all pairs and reports
/// per-class and mean IoU. Classes absent from both ground truth and
/// prediction are excluded from the mean.
pub fn miou(
    preds: &[SegMask],
    gts: &[SegMask],
    classes: usize,
    ignore_index: Option<u32>,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(SparError::ShapeMismatch(format!(
            "{} predictions vs {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut confusion = ConfusionMatrix::new(classes, ignore_index);
    for (pred, gt) in preds.iter().zip(gts) {
        confusion.accumulate(gt, pred)?;
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..classes {
        let tp = confusion.count(c, c);
        let row: u64 = (0..classes).map(|p| confusion.count(c, p)).sum();
        let col: u64 = (0..classes).map(|g| confusion.count(g, c)).sum();
        let denom = row + col - tp;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            counted += 1;
        }
    }
    let mean_iou = if counted > 0 { sum / counted as f64 } else { 0.0 };
    Ok(EvalReport {
        per_class,
        mean_iou,
        confusion,
        timings: Vec::new(),
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and row-major eigenvectors (row i pairs with value i),
/// sorted by descending eigenvalue.
fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let idx = |r: usize, c: usize| r * n + c;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[idx(p, q)] * a[idx(p, q)];
            }
        }
        let scale: f64 = (0..n).map(|i| a[idx(i, i)].abs()).fold(1e-300, f64::max);
        if off.sqrt() < 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[idx(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[idx(q, q)] - a[idx(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[idx(k, p)];
                    let akq = a[idx(k, q)];
                    a[idx(k, p)] = c * akp - s * akq;
                    a[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[idx(p, k)];
                    let aqk = a[idx(q, k)];
                    a[idx(p, k)] = c * apk - s * aqk;
                    a[idx(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[idx(k, p)];
                    let vkq = v[idx(k, q)];
                    v[idx(k, p)] = c * vkp - s * vkq;
                    v[idx(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[idx(j, j)].partial_cmp(&a[idx(i, i)]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| a[idx(i, i)]).collect();
    let mut eigvecs = vec![0.0; n * n];
    for (row, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigvecs[row * n + k] = v[idx(k, src)];
        }
    }
    (eigvals, eigvecs)
}

/// Projects features onto the top-3 principal directions of
/// `basis_source`'s cells, then min-max scales each output channel to
/// `[0, 1]`. Errors when the basis covariance has rank below 3.
pub fn pca_project(features: &FeatureGrid, basis_source: &FeatureGrid) -> Result<FeatureGrid> {
    let projected = pca_project_unscaled(features, basis_source)?;
    let (fh, fw, _) = projected.shape();
    let mut out = FeatureGrid::zeros(fh, fw, 3);
    for j in 0..3 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in 0..fh {
            for c in 0..fw {
                lo = lo.min(projected.get(r, c, j));
                hi = hi.max(projected.get(r, c, j));
            }
        }
        let span = hi - lo;
        for r in 0..fh {
            for c in 0..fw {
                let v = if span > 0.0 {
                    (projected.get(r, c, j) - lo) / span
                } else {
                    0.0
                };
                out.set(r, c, j, v);
            }
        }
    }
    Ok(out)
}

/// Raw top-3 projection with mean centering, before min-max scaling.
fn pca_project_unscaled(features: &FeatureGrid, basis_source: &FeatureGrid) -> Result<FeatureGrid> {
    let d = features.channels();
    if d < 3 {
        return Err(SparError::InvalidArgument(format!(
            "PCA projection needs at least 3 channels, got {d}"
        )));
    }
    if basis_source.channels() != d {
        return Err(SparError::ShapeMismatch(format!(
            "basis has {} channels, features have {d}",
            basis_source.channels()
        )));
    }
    let (bh, bw, _) = basis_source.shape();
    let cells = bh * bw;
    let mut mean = vec![0.0; d];
    for r in 0..bh {
        for c in 0..bw {
            for (m, &x) in mean.iter_mut().zip(basis_source.cell(r, c)) {
                *m += x;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= cells as f64;
    }
    let mut cov = vec![0.0; d * d];
    for r in 0..bh {
        for c in 0..bw {
            let cell = basis_source.cell(r, c);
            for i in 0..d {
                let xi = cell[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += xi * (cell[j] - mean[j]);
                }
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= cells as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (eigvals, eigvecs) = symmetric_eigen(cov, d);
    let lambda_max = eigvals.first().copied().unwrap_or(0.0).max(0.0);
    let tol = lambda_max * 1e-9;
    let rank = eigvals.iter().filter(|&&l| l > tol && l > 0.0).count();
    if rank < 3 {
        return Err(SparError::DegenerateCovariance { rank });
    }

    // fix eigenvector signs for determinism
    let mut basis = vec![0.0; 3 * d];
    for j in 0..3 {
        let vec_j = &eigvecs[j * d..(j + 1) * d];
        let pivot = vec_j
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let flip = if vec_j[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (t, &x) in basis[j * d..(j + 1) * d].iter_mut().zip(vec_j) {
            *t = flip * x;
        }
    }

    let (fh, fw, _) = features.shape();
    let mut projected = FeatureGrid::zeros(fh, fw, 3);
    for r in 0..fh {
        for c in 0..fw {
            let cell = features.cell(r, c);
            for j in 0..3 {
                let b = &basis[j * d..(j + 1) * d];
                let dot: f64 = cell
                    .iter()
                    .zip(&mean)
                    .zip(b)
                    .map(|((x, m), v)| (x - m) * v)
                    .sum();
                projected.set(r, c, j, dot);
            }
        }
    }
    Ok(projected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embeddings(rows: &[(&str, &[f64])]) -> ClassEmbeddings {
        let dim = rows[0].1.len();
        ClassEmbeddings::new(
            rows.iter().map(|(n, _)| n.to_string()).collect(),
            dim,
            rows.iter().flat_map(|(_, v)| v.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn orthonormal_similarities() {
        let feats = FeatureGrid::from_vec(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let classes = embeddings(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        let sims = class_similarities(&feats, &classes).unwrap();
        assert!((sims.get(0, 0, 0) - 1.0).abs() < 1e-12);
        assert!(sims.get(0, 0, 1).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let feats = FeatureGrid::from_vec(1, 1, 3, vec![5.0, 10.0, -5.0]).unwrap();
        let classes = embeddings(&[("a", &[1.0, 2.0, -1.0])]);
        let sims = class_similarities(&feats, &classes).unwrap();
        assert!((sims.get(0, 0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarities_match_double_loop_oracle() {
        let mut s = 123u64;
        let mut gen = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 1000) as f64 / 500.0 - 1.0
        };
        let feats = FeatureGrid::from_fn(2, 2, 3, |_, _, _| gen());
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| gen()).collect()).collect();
        let classes = ClassEmbeddings::new(
            (0..4).map(|i| format!("c{i}")).collect(),
            3,
            rows.iter().flatten().copied().collect(),
        )
        .unwrap();
        let sims = class_similarities(&feats, &classes).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let cell = feats.cell(r, c);
                let cn = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (k, row) in rows.iter().enumerate() {
                    let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = cell.iter().zip(row).map(|(a, b)| a * b).sum();
                    let want = dot / (cn * rn);
                    assert!(
                        (sims.get(r, c, k) - want).abs() < 1e-9,
                        "cell ({r},{c}) class {k}"
                    );
                }
            }
        }
    }

    #[test]
    fn similarity_bounds_hold() {
        let feats = FeatureGrid::from_vec(1, 2, 2, vec![3.0, -4.0, 0.1, 0.2]).unwrap();
        let classes = embeddings(&[("a", &[-3.0, 4.0]), ("b", &[1.0, 1.0])]);
        let sims = class_similarities(&feats, &classes).unwrap();
        assert!(sims.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!((sims.get(0, 0, 0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn predict_constant_and_tie_rules() {
        let mut y = FeatureGrid::zeros(2, 2, 4);
        for r in 0..2 {
            for c in 0..2 {
                y.set(r, c, 2, 1.0);
            }
        }
        let mask = predict_mask(&y, 2, 2).unwrap();
        assert!(mask.labels.iter().all(|&l| l == 2));

        let tie = FeatureGrid::from_vec(1, 1, 4, vec![0.0, 0.7, 0.1, 0.7]).unwrap();
        let mask = predict_mask(&tie, 1, 1).unwrap();
        assert_eq!(mask.labels[0], 1, "ties break toward the lowest index");
    }

    #[test]
    fn predict_matches_composed_oracle() {
        let y = FeatureGrid::from_vec(
            2,
            2,
            2,
            vec![0.9, 0.1, 0.2, 0.8, 0.4, 0.6, 0.7, 0.3],
        )
        .unwrap();
        let mask = predict_mask(&y, 4, 4).unwrap();
        let up = bilinear_resize(&y, 4, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let cell = up.cell(r, c);
                let want = if cell[1] > cell[0] { 1 } else { 0 };
                assert_eq!(mask.get(r, c), want, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let y = FeatureGrid::from_vec(1, 2, 3, vec![0.1, 0.5, 0.2, 0.9, 0.3, 0.4]).unwrap();
        let scaled =
            FeatureGrid::from_vec(1, 2, 3, y.data().iter().map(|v| v * 4.5).collect()).unwrap();
        assert_eq!(
            predict_mask(&y, 3, 5).unwrap(),
            predict_mask(&scaled, 3, 5).unwrap()
        );
    }

    fn mask(h: usize, w: usize, labels: &[u32]) -> SegMask {
        SegMask::new(h, w, labels.to_vec()).unwrap()
    }

    #[test]
    fn miou_identity_and_disjoint() {
        let a = mask(2, 2, &[0, 1, 1, 0]);
        let report = miou(&[a.clone()], &[a.clone()], 2, None).unwrap();
        assert_eq!(report.mean_iou, 1.0);

        let pred = mask(1, 4, &[0, 0, 0, 0]);
        let gt = mask(1, 4, &[1, 1, 1, 1]);
        let report = miou(&[pred], &[gt], 2, None).unwrap();
        assert_eq!(report.per_class, vec![Some(0.0), Some(0.0)]);
        assert_eq!(report.mean_iou, 0.0);
    }

    #[test]
    fn miou_hand_case_with_confusion_oracle() {
        let pred = mask(2, 2, &[0, 0, 1, 1]);
        let gt = mask(2, 2, &[0, 1, 1, 1]);
        let report = miou(&[pred.clone()], &[gt.clone()], 2, None).unwrap();
        // independent per-pixel confusion loop
        let mut counts = [[0u64; 2]; 2];
        for (g, p) in gt.labels.iter().zip(&pred.labels) {
            counts[*g as usize][*p as usize] += 1;
        }
        let iou0 = counts[0][0] as f64
            / (counts[0][0] + counts[0][1] + counts[1][0]) as f64;
        let iou1 = counts[1][1] as f64
            / (counts[1][1] + counts[1][0] + counts[0][1]) as f64;
        assert_eq!(report.per_class[0], Some(iou0));
        assert_eq!(report.per_class[1], Some(iou1));
        assert!((report.per_class[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((report.per_class[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.mean_iou - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn miou_respects_ignore_index() {
        let pred = mask(1, 4, &[0, 1, 0, 1]);
        let gt = mask(1, 4, &[0, 255, 255, 1]);
        let report = miou(&[pred], &[gt], 2, Some(255)).unwrap();
        assert_eq!(report.mean_iou, 1.0);
        let total: u64 = report.confusion.counts.iter().sum();
        assert_eq!(total, 2);
    }

    #[test]
    fn miou_absent_classes_excluded() {
        let pred = mask(1, 2, &[0, 0]);
        let gt = mask(1, 2, &[0, 0]);
        let report = miou(&[pred], &[gt], 3, None).unwrap();
        assert_eq!(report.per_class, vec![Some(1.0), None, None]);
        assert_eq!(report.mean_iou, 1.0);
    }

    #[test]
    fn miou_split_halves_matches_joint() {
        let pred = mask(2, 4, &[0, 1, 2, 0, 1, 1, 2, 0]);
        let gt = mask(2, 4, &[0, 1, 1, 0, 1, 2, 2, 1]);
        let joint = miou(&[pred.clone()], &[gt.clone()], 3, None).unwrap();
        let top_p = mask(1, 4, &pred.labels[..4]);
        let bot_p = mask(1, 4, &pred.labels[4..]);
        let top_g = mask(1, 4, &gt.labels[..4]);
        let bot_g = mask(1, 4, &gt.labels[4..]);
        let split = miou(&[top_p, bot_p], &[top_g, bot_g], 3, None).unwrap();
        assert_eq!(joint.per_class, split.per_class);
        assert_eq!(joint.mean_iou, split.mean_iou);
    }

    #[test]
    fn miou_relabel_permutation() {
        let pred = mask(2, 2, &[0, 1, 2, 0]);
        let gt = mask(2, 2, &[0, 2, 2, 1]);
        let base = miou(&[pred.clone()], &[gt.clone()], 3, None).unwrap();
        // permutation 0->1, 1->2, 2->0
        let perm = |l: u32| (l + 1) % 3;
        let pred_p = mask(2, 2, &pred.labels.iter().map(|&l| perm(l)).collect::<Vec<_>>());
        let gt_p = mask(2, 2, &gt.labels.iter().map(|&l| perm(l)).collect::<Vec<_>>());
        let permuted = miou(&[pred_p], &[gt_p], 3, None).unwrap();
        for c in 0..3 {
            assert_eq!(base.per_class[c], permuted.per_class[perm(c as u32) as usize]);
        }
        assert!((base.mean_iou - permuted.mean_iou).abs() < 1e-12);
    }

    #[test]
    fn miou_rejects_out_of_range_labels() {
        let pred = mask(1, 1, &[5]);
        let gt = mask(1, 1, &[0]);
        assert!(miou(&[pred], &[gt], 2, None).is_err());
    }

    #[test]
    fn pca_eigenvalue_ordering_on_own_basis() {
        let mut s = 9u64;
        let mut gen = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 1000) as f64 / 200.0 - 2.5
        };
        let basis = FeatureGrid::from_fn(6, 6, 5, |_, _, _| gen());
        let raw = pca_project_unscaled(&basis, &basis).unwrap();
        let n = 36.0;
        let mut variances = [0.0f64; 3];
        for (j, var) in variances.iter_mut().enumerate() {
            let mean: f64 =
                (0..36).map(|i| raw.get(i / 6, i % 6, j)).sum::<f64>() / n;
            *var = (0..36)
                .map(|i| {
                    let v = raw.get(i / 6, i % 6, j) - mean;
                    v * v
                })
                .sum::<f64>()
                / n;
        }
        assert!(variances[0] >= variances[1] - 1e-12);
        assert!(variances[1] >= variances[2] - 1e-12);

        let scaled = pca_project(&basis, &basis).unwrap();
        assert_eq!(scaled.shape(), (6, 6, 3));
        assert!(scaled.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pca_first_channel_tracks_dominant_axis() {
        // cells vary strongly along e1, with tiny full-rank noise on e2/e3
        let n = 64;
        let mut s = 31u64;
        let mut noise = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            ((s % 1000) as f64 / 500.0 - 1.0) * 1e-3
        };
        let basis = FeatureGrid::from_fn(8, 8, 3, |r, c, k| {
            let t = (r * 8 + c) as f64 / (n - 1) as f64 * 2.0 - 1.0;
            match k {
                0 => t,
                _ => noise(),
            }
        });
        let out = pca_project(&basis, &basis).unwrap();
        // Pearson correlation between channel 0 and the e1 coordinate
        let xs: Vec<f64> = (0..64).map(|i| out.get(i / 8, i % 8, 0)).collect();
        let ys: Vec<f64> = (0..64)
            .map(|i| i as f64 / (n - 1) as f64 * 2.0 - 1.0)
            .collect();
        let mx = xs.iter().sum::<f64>() / 64.0;
        let my = ys.iter().sum::<f64>() / 64.0;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let r = cov / (vx * vy).sqrt();
        assert!(r.abs() > 0.99, "Pearson r = {r}");
    }

    #[test]
    fn pca_rejects_degenerate_covariance() {
        let constant = FeatureGrid::from_fn(4, 4, 3, |_, _, _| 2.0);
        match pca_project(&constant, &constant) {
            Err(SparError::DegenerateCovariance { rank }) => assert_eq!(rank, 0),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(5, 2, 1) conjugated by a permutation-ish rotation stays easy
        let a = vec![4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0];
        let (vals, vecs) = symmetric_eigen(a.clone(), 3);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        // verify A v = lambda v for each pair
        for j in 0..3 {
            let v = &vecs[j * 3..(j + 1) * 3];
            for r in 0..3 {
                let av: f64 = (0..3).map(|c| a[r * 3 + c] * v[c]).sum();
                assert!((av - vals[j] * v[r]).abs() < 1e-9, "row {r} vec {j}");
            }
        }
    }

    #[test]
    fn embeddings_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classes.txt");
        let classes = embeddings(&[("cat", &[0.25, -1.5, 3.0]), ("dog", &[1.0, 0.0, -0.125])]);
        classes.write(&path).unwrap();
        let loaded = ClassEmbeddings::read(&path).unwrap();
        assert_eq!(classes, loaded);
    }

    #[test]
    fn embeddings_reject_duplicates_and_bad_headers() {
        assert!(ClassEmbeddings::new(
            vec!["a".into(), "a".into()],
            1,
            vec![1.0, 2.0]
        )
        .is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "WRONG 1 2\nname\n0 1\n").unwrap();
        assert!(ClassEmbeddings::read(&path).is_err());
    }
}
