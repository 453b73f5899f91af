//! Dense linear algebra: thin SVD, pseudo-inverse, PSD square root.
//!
//! Everything here is deterministic for a fixed input. The SVD is a one-sided
//! Jacobi iteration and the symmetric eigensolver is cyclic Jacobi.

use crate::error::{invalid, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid(format!("matrix must be non-empty, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("matrix has non-finite entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(invalid("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let c = cols.len();
        let r = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|col| col.len() != r) {
            return Err(invalid("ragged columns"));
        }
        let m = Self::from_fn(r, c, |i, j| cols[j][i]);
        Self::new(r, c, m.data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        for (i, x) in v.iter().enumerate() {
            self.set(i, j, *x);
        }
    }

    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |i, k| self.get(i, idx[k]))
    }

    pub fn leading_columns(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.rows, k, |i, j| self.get(i, j))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(invalid(format!(
                "matmul shape mismatch {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn tr_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(invalid(format!(
                "transposed matmul shape mismatch {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, a) in arow.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(invalid(format!(
                "matvec length {} vs {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(invalid(format!(
                "transposed matvec length {} vs {} rows",
                x.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            axpy(*xi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn scale(&self, a: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| a * x).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(invalid(format!("{op}: matrix has non-finite entries")))
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Thin singular value decomposition `m = u·diag(s)·vᵀ`.
///
/// For an `r×c` input with `k = min(r, c)`, `u` is `r×k`, `s` has length `k`
/// (descending) and `v` is `c×k`. The largest-magnitude entry of every `u`
/// column is non-negative (first index wins on ties).
pub fn thin_svd(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    m.ensure_finite("thin_svd")?;
    let (u, s, v) = if m.rows >= m.cols {
        jacobi_tall(m)
    } else {
        let (u, s, v) = jacobi_tall(&m.transpose());
        (v, s, u)
    };
    Ok(fix_signs(u, s, v))
}

fn jacobi_tall(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (rows, n) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    const TOL: f64 = 1e-15;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let smax = norms[order[0]];
    let cutoff = smax * 1e-13;

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > cutoff && s > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            ucols.push(vec![0.0; rows]);
            degenerate.push(slot);
        }
    }
    complete_basis(&mut ucols, &degenerate);

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u = Matrix::from_fn(rows, n, |i, k| ucols[k][i]);
    let v = Matrix::from_fn(n, n, |i, k| vcols[order[k]][i]);
    (u, s, v)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Replaces the listed columns with unit vectors orthogonal to all others.
fn complete_basis(cols: &mut [Vec<f64>], slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut fixed: Vec<usize> = (0..cols.len()).filter(|i| !slots.contains(i)).collect();
    let mut candidate = 0;
    for &slot in slots {
        while candidate < dim {
            let mut v = vec![0.0; dim];
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &f in &fixed {
                    let proj = dot(&cols[f], &v);
                    axpy(-proj, &cols[f].clone(), &mut v);
                }
            }
            let nv = norm(&v);
            if nv > 0.5 {
                cols[slot] = v.iter().map(|x| x / nv).collect();
                fixed.push(slot);
                break;
            }
        }
    }
}

fn fix_signs(mut u: Matrix, s: Vec<f64>, mut v: Matrix) -> (Matrix, Vec<f64>, Matrix) {
    for k in 0..u.cols() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..u.rows() {
            let a = u.get(i, k).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u.get(best, k) < 0.0 {
            for i in 0..u.rows() {
                u.set(i, k, -u.get(i, k));
            }
            for i in 0..v.rows() {
                v.set(i, k, -v.get(i, k));
            }
        }
    }
    (u, s, v)
}

/// Moore–Penrose pseudo-inverse via [`thin_svd`].
///
/// Singular values below `max(rows, cols) · s_max · 1e-10` count as zero.
pub fn pseudo_inverse(m: &Matrix) -> Result<Matrix> {
    let (u, s, v) = thin_svd(m)?;
    let smax = s.first().copied().unwrap_or(0.0);
    let tol = m.rows.max(m.cols) as f64 * smax * 1e-10;
    let inv: Vec<f64> = s
        .iter()
        .map(|&x| if x > tol && x > 0.0 { 1.0 / x } else { 0.0 })
        .collect();
    Ok(Matrix::from_fn(m.cols, m.rows, |i, j| {
        (0..s.len()).map(|k| v.get(i, k) * inv[k] * u.get(j, k)).sum()
    }))
}

/// Symmetric eigendecomposition by cyclic Jacobi.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    m.ensure_finite("symmetric_eigen")?;
    let n = m.rows;
    if m.cols != n {
        return Err(invalid(format!("symmetric_eigen needs a square matrix, got {:?}", m.shape())));
    }
    let mut a = m.clone();
    let mut vecs = Matrix::identity(n);
    let total: f64 = m.data.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 { 1.0 } else { -1.0 }
                    / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (vecs.get(k, p), vecs.get(k, q));
                    vecs.set(k, p, c * vkp - s * vkq);
                    vecs.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let vals: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| vals[y].total_cmp(&vals[x]).then(x.cmp(&y)));
    let sorted_vals = order.iter().map(|&i| vals[i]).collect();
    let sorted_vecs = vecs.select_columns(&order);
    Ok((sorted_vals, sorted_vecs))
}

/// Square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues in `[-1e-8·scale, 0)` are clamped to zero, where `scale` is
/// `max(1, max|m_ij|)`.
pub fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    m.ensure_finite("psd_sqrt")?;
    if m.rows != m.cols {
        return Err(invalid(format!("psd_sqrt needs a square matrix, got {:?}", m.shape())));
    }
    let scale = m.data.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
    let n = m.rows;
    for i in 0..n {
        for j in i + 1..n {
            if (m.get(i, j) - m.get(j, i)).abs() > 1e-8 * scale {
                return Err(invalid(format!("psd_sqrt: matrix not symmetric at ({i},{j})")));
            }
        }
    }
    let sym = Matrix::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    let (vals, vecs) = symmetric_eigen(&sym)?;
    if let Some(min) = vals.last() {
        if *min < -1e-8 * scale {
            return Err(invalid(format!("psd_sqrt: matrix is indefinite (eigenvalue {min})")));
        }
    }
    let roots: Vec<f64> = vals.iter().map(|x| x.max(0.0).sqrt()).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v: f64 = (0..n).map(|k| vecs.get(i, k) * roots[k] * vecs.get(j, k)).sum();
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

/// Orthonormalizes columns by modified Gram–Schmidt with one re-orthogonalization
/// pass. Columns whose residual norm falls below `drop_tol` are discarded.
pub fn orthonormalize_columns(cols: &[Vec<f64>], drop_tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in cols {
        let mut v = c.clone();
        let n0 = norm(&v);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(b, &v);
                axpy(-p, b, &mut v);
            }
        }
        let nv = norm(&v);
        if nv > drop_tol * n0.max(f64::MIN_POSITIVE) && nv > 0.0 {
            basis.push(v.iter().map(|x| x / nv).collect());
        }
    }
    basis
}
