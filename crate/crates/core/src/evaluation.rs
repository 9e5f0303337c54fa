//! Regression metrics and embedding-space diagnostics.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_similarity, dot, norm, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{FusionModel, ModalityMask};

// ----- metrics -----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub mae: f64,
    pub corr: f64,
    pub acc7: f64,
    pub acc2_nonneg: f64,
    pub f1_nonneg: f64,
    pub acc2_pos: f64,
    pub f1_pos: f64,
    /// Predictions or labels were constant, so `corr` is reported as 0.
    pub corr_degenerate: bool,
    /// No sample had a non-zero label, so the `pos` variants are 0.
    pub pos_degenerate: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_classes(
        pred: impl Iterator<Item = bool>,
        truth: impl Iterator<Item = bool>,
    ) -> Self {
        let mut c = Confusion::default();
        for (p, t) in pred.zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// Binary F1 of the positive class; 1 when there are no errors at all.
    pub fn f1(&self) -> f64 {
        if self.fp + self.fn_ == 0 {
            return if self.total() == 0 { 0.0 } else { 1.0 };
        }
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

/// Pearson correlation, or `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn seven_class(v: f64) -> i32 {
    v.clamp(-3.0, 3.0).round() as i32
}

pub fn compute_metrics(pred: &[f64], y: &[f64]) -> Result<MetricsBundle> {
    if pred.len() != y.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "metrics need equal non-empty lengths, got {} predictions and {} labels",
            pred.len(),
            y.len()
        )));
    }
    let n = y.len() as f64;
    let mae = pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let corr = pearson(pred, y);
    let acc7 = pred
        .iter()
        .zip(y)
        .filter(|(p, t)| seven_class(**p) == seven_class(**t))
        .count() as f64
        / n;

    let nonneg =
        Confusion::from_classes(pred.iter().map(|&p| p >= 0.0), y.iter().map(|&t| t >= 0.0));
    let nonzero: Vec<(f64, f64)> = pred
        .iter()
        .zip(y)
        .filter(|(_, t)| **t != 0.0)
        .map(|(p, t)| (*p, *t))
        .collect();
    let pos = Confusion::from_classes(
        nonzero.iter().map(|(p, _)| *p > 0.0),
        nonzero.iter().map(|(_, t)| *t > 0.0),
    );
    let pos_degenerate = nonzero.is_empty();

    Ok(MetricsBundle {
        mae,
        corr: corr.unwrap_or(0.0),
        acc7,
        acc2_nonneg: nonneg.accuracy(),
        f1_nonneg: nonneg.f1(),
        acc2_pos: if pos_degenerate { 0.0 } else { pos.accuracy() },
        f1_pos: if pos_degenerate { 0.0 } else { pos.f1() },
        corr_degenerate: corr.is_none(),
        pos_degenerate,
    })
}

// ----- PCA -----

pub const PCA_TOLERANCE: f64 = 1e-9;
pub const PCA_MAX_ITERATIONS: usize = 1000;

#[derive(Clone, Debug)]
pub struct Pca {
    /// `n × k` projected coordinates.
    pub coords: Tensor,
    /// Unit principal directions, one per row; zero rows past the data rank.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// Power-iteration steps spent on each component.
    pub iterations: Vec<usize>,
    /// Every non-degenerate component met the tolerance within the iteration cap.
    pub converged: bool,
}

/// Top-`k` principal components by power iteration with deflation.
/// A component is settled once `‖Cv − λv‖ ≤ PCA_TOLERANCE·|λ|`.
///
/// Each component's largest-magnitude loading is made positive.
pub fn pca_project(x: &Tensor, k: usize) -> Result<Pca> {
    if x.rank() != 2 {
        return Err(Error::dim("pca_project", format!("{:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.cols());
    if k == 0 || n < k {
        return Err(Error::Contract(format!(
            "PCA needs n >= k >= 1, got n={n}, k={k}"
        )));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<f64> = (0..n)
        .flat_map(|i| {
            x.row(i)
                .iter()
                .zip(&mean)
                .map(|(v, m)| v - m)
                .collect::<Vec<_>>()
        })
        .collect();
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = vec![0.0; d * d];
    for row in centered.chunks(d) {
        for a in 0..d {
            if row[a] == 0.0 {
                continue;
            }
            for b in a..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= denom;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    let negligible = trace.abs() * 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1ab1e);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut iterations = Vec::with_capacity(k);
    let mut converged = true;
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthogonalize(&mut v, &components);
        let (mut lambda, mut iters, mut ok) = (0.0, 0, false);
        if let Some(unit) = normalized(&v) {
            v = unit;
            for it in 1..=PCA_MAX_ITERATIONS {
                iters = it;
                let mut w = symmetric_apply(&cov, &v, d);
                orthogonalize(&mut w, &components);
                let next_lambda = dot(&v, &w);
                let Some(unit) = normalized(&w) else {
                    lambda = 0.0;
                    ok = true;
                    break;
                };
                let residual = w
                    .iter()
                    .zip(&v)
                    .map(|(wi, vi)| (wi - next_lambda * vi).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let settled = residual <= PCA_TOLERANCE * next_lambda.abs().max(1e-300);
                lambda = next_lambda;
                v = unit;
                if settled {
                    ok = true;
                    break;
                }
            }
        }
        if lambda <= negligible {
            lambda = 0.0;
            v = vec![0.0; d];
            ok = true;
        } else {
            // deflate
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] -= lambda * v[a] * v[b];
                }
            }
            let pivot =
                v.iter().enumerate().fold(
                    0,
                    |best, (i, x)| if x.abs() > v[best].abs() { i } else { best },
                );
            if v[pivot] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        converged &= ok;
        components.push(v);
        eigenvalues.push(lambda);
        iterations.push(iters);
    }

    let mut coords = Vec::with_capacity(n * k);
    for row in centered.chunks(d) {
        for c in &components {
            coords.push(dot(row, c));
        }
    }
    let explained_ratio = eigenvalues
        .iter()
        .map(|l| if trace > 0.0 { l / trace } else { 0.0 })
        .collect();
    Ok(Pca {
        coords: Tensor::matrix(n, k, coords)?,
        components,
        eigenvalues,
        explained_ratio,
        iterations,
        converged,
    })
}

fn symmetric_apply(m: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|a| dot(&m[a * d..(a + 1) * d], v)).collect()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 1e-150).then(|| v.iter().map(|x| x / n).collect())
}

// ----- geometry score -----

pub const GEOMETRY_MIN_SAMPLES: usize = 10;
pub const GEOMETRY_MAX_PAIRS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryScore {
    pub score: f64,
    pub degenerate: bool,
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

/// Spearman correlation between pairwise cosine distance `1 − cos(h_i, h_j)`
/// and label gap `|y_i − y_j|` over pairs `i < j`.
///
/// Above [`GEOMETRY_MAX_PAIRS`] pairs, every `⌈pairs / max⌉`-th pair in
/// row-major order is used.
pub fn geometry_score(h: &Tensor, y: &[f64]) -> Result<GeometryScore> {
    let n = h.rows();
    if h.rank() != 2 || n != y.len() {
        return Err(Error::dim(
            "geometry_score",
            format!("{:?} vectors for {} labels", h.shape(), y.len()),
        ));
    }
    if n < GEOMETRY_MIN_SAMPLES {
        return Err(Error::Contract(format!(
            "geometry score needs at least {GEOMETRY_MIN_SAMPLES} samples, got {n}"
        )));
    }
    let total = n * (n - 1) / 2;
    let stride = total.div_ceil(GEOMETRY_MAX_PAIRS);
    let mut dist = Vec::with_capacity(total / stride + 1);
    let mut gap = Vec::with_capacity(total / stride + 1);
    let mut idx = 0;
    for i in 0..n {
        for j in i + 1..n {
            if idx % stride == 0 {
                dist.push(1.0 - cosine_similarity(h.row(i), h.row(j))?);
                gap.push((y[i] - y[j]).abs());
            }
            idx += 1;
        }
    }
    Ok(match spearman(&dist, &gap) {
        Some(score) => GeometryScore {
            score,
            degenerate: false,
        },
        None => GeometryScore {
            score: 0.0,
            degenerate: true,
        },
    })
}

// ----- embedding export -----

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub variant: String,
    pub y: f64,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EmbeddingDump {
    pub rows: Vec<EmbeddingRow>,
}

/// The full fusion plus the six masked forms, in that order.
pub fn all_variants() -> Vec<ModalityMask> {
    let mut v = vec![ModalityMask::NONE];
    v.extend(ModalityMask::singles());
    v.extend(ModalityMask::doubles());
    v
}

/// Fusion vectors per variant, each variant PCA-projected on its own.
pub fn export_embeddings(
    model: &FusionModel,
    dataset: &Dataset,
    variants: &[ModalityMask],
) -> Result<EmbeddingDump> {
    if dataset.is_empty() {
        return Err(Error::Contract(
            "cannot export embeddings of an empty dataset".into(),
        ));
    }
    let mut rows = Vec::with_capacity(dataset.len() * variants.len());
    for &mask in variants {
        let fused = model.infer_dataset(dataset, mask)?.fused;
        let pca = pca_project(&fused, 2.min(dataset.len()))?;
        let tag = mask.to_string();
        for (i, u) in dataset.utterances.iter().enumerate() {
            let c = pca.coords.row(i);
            rows.push(EmbeddingRow {
                id: u.id.clone(),
                variant: tag.clone(),
                y: u.y,
                pc1: c[0],
                pc2: c.get(1).copied().unwrap_or(0.0),
            });
        }
    }
    Ok(EmbeddingDump { rows })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EmbeddingDump {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,variant,y,pc1,pc2\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                csv_field(&r.id),
                r.variant,
                r.y,
                r.pc1,
                r.pc2
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// One scatter panel per variant, points colored by label.
    pub fn to_svg(&self) -> String {
        const PANEL: f64 = 320.0;
        const PAD: f64 = 24.0;
        let mut variants: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant.as_str()) {
                variants.push(&r.variant);
            }
        }
        let width = PANEL * variants.len().max(1) as f64;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL}" viewBox="0 0 {width} {PANEL}">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        for (p, variant) in variants.iter().enumerate() {
            let pts: Vec<&EmbeddingRow> =
                self.rows.iter().filter(|r| r.variant == *variant).collect();
            let span = |f: fn(&EmbeddingRow) -> f64| {
                let lo = pts.iter().map(|r| f(r)).fold(f64::INFINITY, f64::min);
                let hi = pts.iter().map(|r| f(r)).fold(f64::NEG_INFINITY, f64::max);
                (lo, (hi - lo).max(1e-12))
            };
            let (x0, xs) = span(|r| r.pc1);
            let (y0, ys) = span(|r| r.pc2);
            let left = p as f64 * PANEL;
            let inner = PANEL - 2.0 * PAD;
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="16" font-family="sans-serif" font-size="12">{variant}</text>"#,
                left + PAD
            );
            for r in pts {
                let cx = left + PAD + (r.pc1 - x0) / xs * inner;
                let cy = PANEL - PAD - (r.pc2 - y0) / ys * inner;
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{}" fill-opacity="0.8"/>"#,
                    sentiment_color(r.y)
                );
            }
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn write_svg(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_svg()).map_err(|e| Error::io(path, e))
    }
}

/// Diverging color: blue at −3, gray at 0, red at +3.
pub fn sentiment_color(y: f64) -> String {
    const BLUE: [f64; 3] = [33.0, 102.0, 172.0];
    const GRAY: [f64; 3] = [160.0, 160.0, 160.0];
    const RED: [f64; 3] = [178.0, 24.0, 43.0];
    let t = (y / 3.0).clamp(-1.0, 1.0);
    let (from, to, w) = if t < 0.0 {
        (GRAY, BLUE, -t)
    } else {
        (GRAY, RED, t)
    };
    let c: Vec<u8> = (0..3)
        .map(|i| (from[i] + (to[i] - from[i]) * w).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [-2.0, -0.5, 0.0, 1.5, 3.0];
        let m = compute_metrics(&y, &y).unwrap();
        assert_eq!(m.mae, 0.0);
        assert!(m.corr_degenerate || (m.corr - 1.0).abs() < 1e-12);
        assert_eq!(
            (m.acc7, m.acc2_nonneg, m.acc2_pos, m.f1_nonneg, m.f1_pos),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn rounding_rule_for_seven_classes() {
        let m = compute_metrics(&[2.6], &[3.0]).unwrap();
        assert_eq!(m.acc7, 1.0);
        assert!((m.mae - 0.4).abs() < 1e-12);
        assert!(m.corr_degenerate);
        assert_eq!(m.corr, 0.0);
    }

    #[test]
    fn hand_computed_confusion() {
        let m = compute_metrics(&[1.0, -1.0, 1.0, -1.0], &[1.0, -1.0, -1.0, 1.0]).unwrap();
        assert_eq!(m.acc2_pos, 0.5);
        assert_eq!(m.f1_pos, 0.5);
    }

    #[test]
    fn zero_labels_only_count_as_nonnegative() {
        let m = compute_metrics(&[0.5, -0.5], &[0.0, 0.0]).unwrap();
        assert!(m.pos_degenerate);
        assert_eq!(m.acc2_nonneg, 0.5);
    }

    #[test]
    fn metrics_reject_bad_lengths() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn pca_identical_points() {
        let x = Tensor::filled(&[5, 3], 2.5);
        let p = pca_project(&x, 2).unwrap();
        assert!(p.coords.data().iter().all(|&c| c == 0.0));
        assert_eq!(p.explained_ratio, vec![0.0, 0.0]);
    }

    #[test]
    fn pca_needs_enough_rows() {
        assert!(pca_project(&Tensor::zeros(&[1, 3]), 2).is_err());
    }

    #[test]
    fn color_scale_endpoints() {
        assert_eq!(sentiment_color(-3.0), "#2166ac");
        assert_eq!(sentiment_color(0.0), "#a0a0a0");
        assert_eq!(sentiment_color(3.0), "#b2182b");
    }
}
