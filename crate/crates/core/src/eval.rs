//! Desk-scale metrics: Gaussian Fréchet distance, intra-category diversity,
//! nearest-centroid augmentation score and 2-D PCA.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{psd_sqrt, thin_svd, Matrix};

/// Equal-length feature vectors with a source label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    label: String,
    vectors: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(label: impl Into<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let label = label.into();
        let first = vectors
            .first()
            .ok_or_else(|| invalid(format!("feature set {label:?} is empty")))?;
        let dim = first.len();
        if dim == 0 {
            return Err(invalid(format!("feature set {label:?} has zero-length vectors")));
        }
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(invalid(format!("feature set {label:?} has vectors of unequal length")));
        }
        if vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(invalid(format!("feature set {label:?} has non-finite values")));
        }
        Ok(Self { label, vectors })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn mean(&self) -> Vec<f64> {
        mean_of(&self.vectors)
    }

    /// Unbiased covariance, or its diagonal when there are fewer than
    /// `dim + 1` vectors. A single vector gives zero covariance.
    pub fn covariance(&self) -> Matrix {
        let d = self.dim();
        let n = self.len();
        let mu = self.mean();
        let mut c = Matrix::zeros(d, d);
        if n < 2 {
            return c;
        }
        let diagonal_only = n < d + 1;
        for v in &self.vectors {
            for i in 0..d {
                let di = v[i] - mu[i];
                if diagonal_only {
                    c.set(i, i, c.get(i, i) + di * di);
                } else {
                    for j in i..d {
                        c.set(i, j, c.get(i, j) + di * (v[j] - mu[j]));
                    }
                }
            }
        }
        let s = 1.0 / (n as f64 - 1.0);
        for i in 0..d {
            for j in i..d {
                let x = c.get(i, j) * s;
                c.set(i, j, x);
                c.set(j, i, x);
            }
        }
        c
    }
}

fn mean_of(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, x) in m.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vs.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁+Σ₂−2(Σ₁Σ₂)^{1/2})`, clamped at zero.
pub fn frechet_from_moments(mu1: &[f64], cov1: &Matrix, mu2: &[f64], cov2: &Matrix) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(invalid("frechet: dimension mismatch"));
    }
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    // Tr((Σ₁Σ₂)^{1/2}) = Tr((S Σ₂ S)^{1/2}) with S = Σ₁^{1/2}
    let s1 = psd_sqrt(cov1)?;
    let inner = s1.matmul(cov2)?.matmul(&s1)?;
    let inner = Matrix::from_fn(d, d, |i, j| 0.5 * (inner.get(i, j) + inner.get(j, i)));
    let cross = psd_sqrt(&inner)?;
    let trace: f64 = (0..d).map(|i| cov1.get(i, i) + cov2.get(i, i) - 2.0 * cross.get(i, i)).sum();
    Ok((mean_term + trace).max(0.0))
}

pub fn frechet(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid(format!(
            "frechet: feature dimensions differ ({} vs {})",
            a.dim(),
            b.dim()
        )));
    }
    frechet_from_moments(&a.mean(), &a.covariance(), &b.mean(), &b.covariance())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean over categories of the mean pairwise distance within each category.
pub fn intra_diversity(sets: &[FeatureSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(invalid("intra_diversity of no categories"));
    }
    let mut total = 0.0;
    for s in sets {
        let n = s.len();
        if n < 2 {
            return Err(invalid(format!("category {:?} has fewer than 2 items", s.label())));
        }
        let v = s.vectors();
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += euclid(&v[i], &v[j]);
            }
        }
        total += acc / (n * (n - 1) / 2) as f64;
    }
    Ok(total / sets.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub category: String,
    pub standard: f64,
    pub augmented: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NasReport {
    pub standard_accuracy: f64,
    pub augmented_accuracy: f64,
    pub per_category: Vec<CategoryAccuracy>,
    pub seed: u64,
}

/// Per-category feature splits keyed by category id.
pub type Split = BTreeMap<String, Vec<Vec<f64>>>;

fn centroids(parts: &[&Split], ids: &[String]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|id| {
            let all: Vec<Vec<f64>> = parts.iter().flat_map(|p| p[id].iter().cloned()).collect();
            mean_of(&all)
        })
        .collect()
}

fn classify(x: &[f64], cents: &[Vec<f64>]) -> usize {
    // ids are sorted, so the first minimum is the lexicographically smallest
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in cents.iter().enumerate() {
        let d: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Nearest-centroid accuracy trained on `real_train` alone and on
/// `real_train ∪ generated`, scored on `test`. Overall accuracy is pooled over
/// all test items.
pub fn nas(real_train: &Split, generated: &Split, test: &Split, seed: u64) -> Result<NasReport> {
    let ids: Vec<String> = test.keys().cloned().collect();
    if ids.is_empty() {
        return Err(invalid("nas: no test categories"));
    }
    let mut dim = None;
    for (name, split) in [("real_train", real_train), ("generated", generated), ("test", test)] {
        if split.keys().ne(ids.iter()) {
            return Err(invalid(format!("nas: {name} categories differ from the test categories")));
        }
        for (id, vs) in split {
            if vs.is_empty() && name != "generated" {
                return Err(invalid(format!("nas: category {id:?} has no {name} items")));
            }
            for v in vs {
                if *dim.get_or_insert(v.len()) != v.len() {
                    return Err(invalid("nas: feature dimensions differ"));
                }
            }
        }
    }
    let standard = centroids(&[real_train], &ids);
    let augmented = centroids(&[real_train, generated], &ids);
    let mut per_category = Vec::with_capacity(ids.len());
    let (mut hit_s, mut hit_a, mut n) = (0usize, 0usize, 0usize);
    for (k, id) in ids.iter().enumerate() {
        let items = &test[id];
        let s = items.iter().filter(|x| classify(x, &standard) == k).count();
        let a = items.iter().filter(|x| classify(x, &augmented) == k).count();
        hit_s += s;
        hit_a += a;
        n += items.len();
        per_category.push(CategoryAccuracy {
            category: id.clone(),
            standard: s as f64 / items.len() as f64,
            augmented: a as f64 / items.len() as f64,
        });
    }
    Ok(NasReport {
        standard_accuracy: hit_s as f64 / n as f64,
        augmented_accuracy: hit_a as f64 / n as f64,
        per_category,
        seed,
    })
}

/// Projection of centred data onto its top two right-singular directions.
pub fn pca2d(codes: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if codes.len() < 3 {
        return Err(invalid(format!("pca2d needs at least 3 vectors, got {}", codes.len())));
    }
    let d = codes[0].len();
    if d == 0 || codes.iter().any(|c| c.len() != d) {
        return Err(invalid("pca2d: vectors must share a positive length"));
    }
    let mu = mean_of(codes);
    let x = Matrix::from_fn(codes.len(), d, |i, j| codes[i][j] - mu[j]);
    let (_, _, v) = thin_svd(&x)?;
    let k = v.cols().min(2);
    let mut out = Vec::with_capacity(codes.len());
    for i in 0..codes.len() {
        let row = x.row(i);
        let mut p = [0.0; 2];
        for (a, slot) in p.iter_mut().enumerate().take(k) {
            *slot = (0..d).map(|j| row[j] * v.get(j, a)).sum();
        }
        out.push(p);
    }
    Ok(out)
}

pub fn metrics_csv(rows: &[(String, String, f64)]) -> String {
    let mut s = String::from("metric,scope,value\n");
    for (m, scope, v) in rows {
        let _ = writeln!(s, "{m},{scope},{v}");
    }
    s
}

pub fn nas_csv(report: &NasReport) -> String {
    let mut s = String::from("category,standard_acc,augmented_acc\n");
    for c in &report.per_category {
        let _ = writeln!(s, "{},{},{}", c.category, c.standard, c.augmented);
    }
    let _ = writeln!(s, "__overall__,{},{}", report.standard_accuracy, report.augmented_accuracy);
    s
}

pub fn pca_csv(labels: &[String], points: &[[f64; 2]]) -> Result<String> {
    if labels.len() != points.len() {
        return Err(invalid("pca_csv: label and point counts differ"));
    }
    let mut s = String::from("label,x,y\n");
    for (l, p) in labels.iter().zip(points) {
        let _ = writeln!(s, "{l},{},{}", p[0], p[1]);
    }
    Ok(s)
}
