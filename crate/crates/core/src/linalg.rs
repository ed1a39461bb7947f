//! Matrix algebra: products, least squares and PCA.
//!
//! Least squares and PCA share one route: a tall-skinny QR (Householder,
//! computed chunk-wise and merged) reduces the data to a small triangular
//! factor, and a one-sided Jacobi SVD of that factor yields singular values
//! and right singular vectors. Everything runs in f64.

use rayon::prelude::*;

use crate::error::{ensure_dim, Error, Result};
use crate::tensor::Tensor;

/// Default relative cutoff for singular values in [`lstsq`].
pub const DEFAULT_RCOND: f64 = 1e-6;

/// Small dense f64 matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dim!(data.len() == rows * cols, "{}x{} matrix needs {} values, got {}", rows, cols, rows * cols, data.len());
        Ok(Self { rows, cols, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (r, c) = t.dims2()?;
        Ok(Self {
            rows: r,
            cols: c,
            data: t.to_f64(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.rows, self.cols], &self.data).expect("consistent shape")
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat64 {
        let mut out = Mat64::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`
    pub fn matmul(&self, other: &Mat64) -> Mat64 {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let n = other.cols;
        let mut out = Mat64::zeros(self.rows, n);
        out.data.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, orow)| {
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        });
        out
    }

    /// `self^T * other`
    pub fn t_matmul(&self, other: &Mat64) -> Mat64 {
        assert_eq!(self.rows, other.rows, "t_matmul row count");
        let mut out = Mat64::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bj) in orow.iter_mut().zip(b) {
                    *o += ai * bj;
                }
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Matrix product of two 2-D tensors with f64 accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    ensure_dim!(k == k2, "matmul inner dimensions differ: {}x{} * {}x{}", m, k, k2, n);
    linear(a, b, None)
}

/// Affine map `x * w + bias` over the rows of `x`, bias added in the f64
/// accumulator before rounding.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    let (m, k) = (x.rows(), x.last_dim());
    let (k2, n) = w.dims2()?;
    ensure_dim!(k == k2, "linear input has {} features, weight expects {}", k, k2);
    if let Some(b) = bias {
        ensure_dim!(b.len() == n, "bias length {} vs output width {}", b.len(), n);
    }
    let mut out = vec![0.0f32; m * n];
    if n > 0 {
        let wd = w.data();
        let kernel = |acc: &mut Vec<f64>, (i, orow): (usize, &mut [f32])| {
            match bias {
                Some(b) => acc.iter_mut().zip(b).for_each(|(a, &bv)| *a = bv as f64),
                None => acc.iter_mut().for_each(|a| *a = 0.0),
            }
            for (kk, &xv) in x.row(i).iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let xv = xv as f64;
                for (s, &wv) in acc.iter_mut().zip(&wd[kk * n..(kk + 1) * n]) {
                    *s += xv * wv as f64;
                }
            }
            for (o, &s) in orow.iter_mut().zip(acc.iter()) {
                *o = s as f32;
            }
        };
        if m * n * k >= 1 << 16 {
            out.par_chunks_mut(n).enumerate().for_each_init(|| vec![0.0f64; n], kernel);
        } else {
            let mut acc = vec![0.0f64; n];
            out.chunks_mut(n).enumerate().for_each(|item| kernel(&mut acc, item));
        }
    }
    let mut shape = x.shape().to_vec();
    if shape.is_empty() {
        shape.push(n);
    } else {
        *shape.last_mut().unwrap() = n;
    }
    Tensor::new(shape, out)
}

/// Rows per leaf in the tall-skinny QR. Fixed (never derived from the thread
/// count) so results do not depend on scheduling.
const TSQR_MIN_LEAF: usize = 2048;

/// Upper-triangular factor `R` (`cols x cols`, zero-padded) of a tall matrix
/// given as column-major leaves.
fn tsqr(rows: usize, cols: usize, fetch: &(dyn Fn(usize, usize) -> Vec<f64> + Sync)) -> Vec<f64> {
    let leaf = TSQR_MIN_LEAF.max(4 * cols);
    let starts: Vec<usize> = (0..rows).step_by(leaf.max(1)).collect();
    let mut factors: Vec<(usize, Vec<f64>)> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + leaf).min(rows);
            let mut colmajor = fetch(s, e);
            let m = e - s;
            householder_r(&mut colmajor, m, cols)
        })
        .collect();
    // merge: stack the small factors and reduce again until one remains
    while factors.len() > 1 {
        let group = (leaf / cols.max(1)).max(2);
        factors = factors
            .par_chunks(group)
            .map(|chunk| {
                let m: usize = chunk.iter().map(|(r, _)| *r).sum();
                let mut stacked = vec![0.0; m * cols];
                let mut off = 0;
                for (r, f) in chunk {
                    for j in 0..cols {
                        stacked[j * m + off..j * m + off + r].copy_from_slice(&f[j * r..(j + 1) * r]);
                    }
                    off += r;
                }
                householder_r(&mut stacked, m, cols)
            })
            .collect();
    }
    let (r, f) = factors.pop().unwrap_or((0, Vec::new()));
    // row-major, zero padded to cols x cols
    let mut out = vec![0.0; cols * cols];
    for i in 0..r.min(cols) {
        for j in 0..cols {
            out[i * cols + j] = f[j * r + i];
        }
    }
    out
}

/// In-place Householder QR of an `m x n` column-major matrix; returns the
/// `min(m, n) x n` upper-triangular factor, column-major.
fn householder_r(a: &mut [f64], m: usize, n: usize) -> (usize, Vec<f64>) {
    let kmax = m.min(n);
    let mut v = vec![0.0; m];
    for k in 0..kmax {
        let col = &a[k * m..(k + 1) * m];
        let norm = col[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if col[k] > 0.0 { -norm } else { norm };
        v[k..].copy_from_slice(&col[k..]);
        v[k] -= alpha;
        let vnorm2: f64 = v[k..].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..n {
            let cj = &mut a[j * m..(j + 1) * m];
            let dot: f64 = v[k..].iter().zip(&cj[k..]).map(|(x, y)| x * y).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, &vi) in cj[k..].iter_mut().zip(&v[k..]) {
                *c -= f * vi;
            }
        }
    }
    let mut r = vec![0.0; kmax * n];
    for j in 0..n {
        for i in 0..kmax.min(j + 1) {
            r[j * kmax + i] = a[j * m + i];
        }
    }
    (kmax, r)
}

/// Singular values (descending) and right singular vectors of a small
/// square matrix.
pub struct Svd {
    pub singular_values: Vec<f64>,
    /// Left singular vectors as columns, scaled by nothing (unit length).
    pub u: Mat64,
    /// Right singular vectors as columns.
    pub v: Mat64,
}

/// One-sided Jacobi SVD of a square (or tall) matrix.
pub fn jacobi_svd(a: &Mat64) -> Svd {
    let (m, n) = (a.rows, a.cols);
    // column-major working copies
    let mut u: Vec<f64> = a.transpose().data;
    let mut v: Vec<f64> = Mat64::eye(n).data;
    const TOL: f64 = 1e-15;
    for _sweep in 0..100 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (ci, cj) = (&u[i * m..(i + 1) * m], &u[j * m..(j + 1) * m]);
                let alpha: f64 = ci.iter().map(|x| x * x).sum();
                let beta: f64 = cj.iter().map(|x| x * x).sum();
                let gamma: f64 = ci.iter().zip(cj).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut u, m, i, j, c, s);
                rotate_columns(&mut v, n, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| u[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut svals = Vec::with_capacity(n);
    let mut um = Mat64::zeros(m, n);
    let mut vm = Mat64::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        svals.push(s);
        for r in 0..m {
            *um.at_mut(r, dst) = if s > 0.0 { u[src * m + r] / s } else { 0.0 };
        }
        for r in 0..n {
            *vm.at_mut(r, dst) = v[src * n + r];
        }
    }
    Svd {
        singular_values: svals,
        u: um,
        v: vm,
    }
}

fn rotate_columns(a: &mut [f64], m: usize, i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = a.split_at_mut(j * m);
    let ci = &mut left[i * m..(i + 1) * m];
    let cj = &mut right[..m];
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    t.ensure_finite(what)
}

/// Least-squares solution `T` minimizing `||B - A T||_F^2`.
///
/// Singular values of `A` below `rcond * sigma_max` are treated as zero, so
/// rank-deficient problems return the minimum-norm minimizer.
pub fn lstsq(a: &Tensor, b: &Tensor, rcond: f64) -> Result<Tensor> {
    let (n, p) = a.dims2()?;
    let (n2, q) = b.dims2()?;
    ensure_dim!(n > 0 && p > 0 && q > 0, "lstsq needs non-empty inputs, got A {}x{}, B {}x{}", n, p, n2, q);
    ensure_dim!(n == n2, "lstsq row counts differ: A has {}, B has {}", n, n2);
    if !(rcond > 0.0 && rcond < 1.0) {
        return Err(Error::Argument(format!("rcond must be in (0, 1), got {rcond}")));
    }
    check_finite(a, "lstsq design matrix")?;
    check_finite(b, "lstsq target matrix")?;
    let sol = lstsq_rows(n, p, q, &|s, e| augmented_leaf(a, b, s, e), rcond);
    Tensor::from_f64(vec![p, q], &sol.data)
}

fn augmented_leaf(a: &Tensor, b: &Tensor, s: usize, e: usize) -> Vec<f64> {
    let (p, q) = (a.last_dim(), b.last_dim());
    let m = e - s;
    let c = p + q;
    let mut out = vec![0.0; m * c];
    for (r, i) in (s..e).enumerate() {
        for (j, &v) in a.row(i).iter().enumerate() {
            out[j * m + r] = v as f64;
        }
        for (j, &v) in b.row(i).iter().enumerate() {
            out[(p + j) * m + r] = v as f64;
        }
    }
    out
}

/// Least squares over an augmented `[A | B]` row source.
pub(crate) fn lstsq_rows(
    n: usize,
    p: usize,
    q: usize,
    fetch: &(dyn Fn(usize, usize) -> Vec<f64> + Sync),
    rcond: f64,
) -> Mat64 {
    let c = p + q;
    let r = tsqr(n, c, fetch);
    let mut r11 = Mat64::zeros(p, p);
    let mut rhs = Mat64::zeros(p, q);
    for i in 0..p {
        for j in 0..p {
            *r11.at_mut(i, j) = r[i * c + j];
        }
        for j in 0..q {
            *rhs.at_mut(i, j) = r[i * c + p + j];
        }
    }
    solve_via_svd(&r11, &rhs, rcond)
}

fn solve_via_svd(r11: &Mat64, rhs: &Mat64, rcond: f64) -> Mat64 {
    let svd = jacobi_svd(r11);
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = rcond * smax;
    let (p, q) = (r11.cols, rhs.cols);
    let mut t = Mat64::zeros(p, q);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        // coefficient row: (u_k^T rhs) / s
        let mut coef = vec![0.0; q];
        for i in 0..r11.rows {
            let uik = svd.u.at(i, k);
            if uik == 0.0 {
                continue;
            }
            for (cj, &bj) in coef.iter_mut().zip(rhs.row(i)) {
                *cj += uik * bj;
            }
        }
        for row in 0..p {
            let vk = svd.v.at(row, k) / s;
            for (tj, &cj) in t.data[row * q..(row + 1) * q].iter_mut().zip(&coef) {
                *tj += vk * cj;
            }
        }
    }
    t
}

/// Principal components of a data matrix.
#[derive(Clone, Debug)]
pub struct Pca {
    /// Column means used for centering, length `d`.
    pub mean: Vec<f64>,
    /// `d x k`, orthonormal columns.
    pub components: Tensor,
    /// `n x k`, the centered data projected on the components.
    pub projected: Tensor,
    /// Variance along each component (`sigma^2 / (n - 1)`), non-increasing.
    pub explained_variance: Vec<f64>,
}

impl Pca {
    /// Projects new rows using this fit's mean and components.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        ensure_dim!(d == self.mean.len(), "pca transform expects {} columns, got {}", self.mean.len(), d);
        let k = self.components.shape()[1];
        let comp = self.components.to_f64();
        let mut out = vec![0.0f64; n * k];
        for i in 0..n {
            for (j, &v) in x.row(i).iter().enumerate() {
                let c = v as f64 - self.mean[j];
                for t in 0..k {
                    out[i * k + t] += c * comp[j * k + t];
                }
            }
        }
        Tensor::from_f64(vec![n, k], &out)
    }
}

/// Top-`k` principal directions of the column-centered `x`.
///
/// Each component's largest-magnitude entry is made non-negative.
pub fn pca_project(x: &Tensor, k: usize) -> Result<Pca> {
    let (n, d) = x.dims2()?;
    ensure_dim!(n >= 2, "pca needs at least 2 rows, got {}", n);
    ensure_dim!(k >= 1 && k <= n.min(d), "pca k={} out of range 1..={}", k, n.min(d));
    check_finite(x, "pca input")?;
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let fetch = |s: usize, e: usize| {
        let m = e - s;
        let mut out = vec![0.0; m * d];
        for (r, i) in (s..e).enumerate() {
            for (j, &v) in x.row(i).iter().enumerate() {
                out[j * m + r] = v as f64 - mean[j];
            }
        }
        out
    };
    let r = tsqr(n, d, &fetch);
    let svd = jacobi_svd(&Mat64::from_vec(d, d, r)?);
    let mut comp = Mat64::zeros(d, k);
    for t in 0..k {
        let col: Vec<f64> = (0..d).map(|i| svd.v.at(i, t)).collect();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, v) in col.into_iter().enumerate() {
            *comp.at_mut(i, t) = sign * v;
        }
    }
    let explained_variance = svd.singular_values[..k]
        .iter()
        .map(|s| s * s / (n as f64 - 1.0))
        .collect();
    let mut pca = Pca {
        mean,
        components: comp.to_tensor(),
        projected: Tensor::zeros(&[n, k]),
        explained_variance,
    };
    pca.projected = pca.transform(x)?;
    Ok(pca)
}
