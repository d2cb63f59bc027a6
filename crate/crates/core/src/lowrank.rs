//! Factored low-rank matrices `U diag(S) Vᵀ` and the nuclear-norm proximal map.
//!
//! Rows index voxels (N), columns index frames (K). Nothing here forms an
//! N×K array except the explicit `to_dense` helpers used by tests and small
//! problems.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;
use crate::operator::FrameImage;

/// Anything exposing products with itself and its transpose.
pub trait MatrixOperand {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `A · X` for `X` with `ncols` rows.
    fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// `Aᵀ · Y` for `Y` with `nrows` rows.
    fn tr_mul(&self, y: &DMatrix<f64>) -> DMatrix<f64>;
}

impl MatrixOperand for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }
    fn ncols(&self) -> usize {
        self.ncols()
    }
    fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self * x
    }
    fn tr_mul(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        self.tr_mul(y)
    }
}

/// Space × time image in thin-SVD form.
#[derive(Clone, Debug, PartialEq)]
pub struct FactoredImage {
    u: DMatrix<f64>,
    s: DVector<f64>,
    v: DMatrix<f64>,
}

const ORTHO_TOL: f64 = 1e-8;

impl FactoredImage {
    /// Validates orthonormality and ordering, then applies the sign convention.
    pub fn new(u: DMatrix<f64>, s: DVector<f64>, v: DMatrix<f64>) -> Result<Self> {
        let r = s.len();
        if u.ncols() != r || v.ncols() != r {
            return Err(Error::invalid(format!(
                "factor shapes disagree: U has {} columns, S {}, V {}",
                u.ncols(),
                r,
                v.ncols()
            )));
        }
        if s.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::invalid("singular values must be finite and nonnegative"));
        }
        if s.as_slice().windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("singular values must be nonincreasing"));
        }
        for (name, m) in [("U", &u), ("V", &v)] {
            let dev = (m.tr_mul(m) - DMatrix::identity(r, r)).norm();
            if !(dev <= ORTHO_TOL) {
                return Err(Error::invalid(format!("{name} columns are not orthonormal (deviation {dev:.2e})")));
            }
        }
        let mut f = Self { u, s, v };
        f.fix_signs();
        Ok(f)
    }

    /// Rank-0 image of shape N×K.
    pub fn zeros(voxels: usize, frames: usize) -> Self {
        Self {
            u: DMatrix::zeros(voxels, 0),
            s: DVector::zeros(0),
            v: DMatrix::zeros(frames, 0),
        }
    }

    /// Exact thin SVD of `A Bᵀ`. Singular values at or below
    /// `rel_tol · σ₁` are dropped.
    pub fn from_factors(a: &DMatrix<f64>, b: &DMatrix<f64>, rel_tol: f64) -> Result<Self> {
        if a.ncols() != b.ncols() {
            return Err(Error::invalid("factor column counts differ"));
        }
        let (n, k) = (a.nrows(), b.nrows());
        if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Undefined("factors contain non-finite values".into()));
        }
        if a.ncols() == 0 || n == 0 || k == 0 {
            return Ok(Self::zeros(n, k));
        }
        let (qa, ra) = thin_qr(a);
        let (qb, rb) = thin_qr(b);
        let core = &ra * rb.transpose();
        let (w, sv, zt) = sorted_svd(core);
        let top = sv.first().copied().unwrap_or(0.0);
        let keep = sv.iter().take_while(|&&x| x > rel_tol * top && x > 0.0).count();
        let u = &qa * w.columns(0, keep);
        let v = &qb * zt.rows(0, keep).transpose();
        let mut f = Self {
            u,
            s: DVector::from_iterator(keep, sv.into_iter().take(keep)),
            v,
        };
        f.fix_signs();
        Ok(f)
    }

    /// Largest-magnitude entry of each U column made positive (ties go to
    /// the first index); V follows.
    fn fix_signs(&mut self) {
        for r in 0..self.s.len() {
            let col = self.u.column(r);
            let mut best = 0.0f64;
            let mut sign = 1.0;
            for &x in col.iter() {
                if x.abs() > best {
                    best = x.abs();
                    sign = x.signum();
                }
            }
            if sign < 0.0 {
                self.u.column_mut(r).neg_mut();
                self.v.column_mut(r).neg_mut();
            }
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.u.nrows()
    }

    pub fn frame_count(&self) -> usize {
        self.v.nrows()
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.s
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// `U diag(S)`.
    pub fn scaled_u(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (r, s) in self.s.iter().enumerate() {
            us.column_mut(r).scale_mut(*s);
        }
        us
    }

    /// Column `k` of the dense expansion.
    pub fn frame(&self, k: usize) -> Result<Vec<f64>> {
        if k >= self.frame_count() {
            return Err(Error::invalid(format!(
                "frame {k} out of range for {} frames",
                self.frame_count()
            )));
        }
        let coeff = DVector::from_iterator(self.rank(), (0..self.rank()).map(|r| self.s[r] * self.v[(k, r)]));
        Ok((&self.u * coeff).as_slice().to_vec())
    }

    /// Row `n` of the dense expansion (one voxel's time series).
    pub fn voxel_series(&self, n: usize) -> Result<Vec<f64>> {
        if n >= self.voxel_count() {
            return Err(Error::invalid(format!("voxel {n} out of range")));
        }
        let coeff = DVector::from_iterator(self.rank(), (0..self.rank()).map(|r| self.s[r] * self.u[(n, r)]));
        Ok((&self.v * coeff).as_slice().to_vec())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.scaled_u() * self.v.transpose()
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.s.sum()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.s.norm_squared()
    }

    /// `½ Σ_k ‖f_{k+1} − f_k‖²`, exact in factored form.
    pub fn temporal_penalty(&self) -> f64 {
        let k = self.frame_count();
        let mut total = 0.0;
        for r in 0..self.rank() {
            let w: f64 = (0..k.saturating_sub(1))
                .map(|i| (self.v[(i + 1, r)] - self.v[(i, r)]).powi(2))
                .sum();
            total += self.s[r] * self.s[r] * w;
        }
        0.5 * total
    }

    /// Exact `a·self + b·other` in thin-SVD form.
    pub fn combine(&self, a: f64, other: &FactoredImage, b: f64) -> Result<FactoredImage> {
        self.check_shape(other)?;
        let (fa, fb) = stack_factors(&[(a, self), (b, other)]);
        FactoredImage::from_factors(&fa, &fb, COMPACT_TOL)
    }

    /// `‖self − other‖²_F` without forming either matrix.
    pub fn distance_sq(&self, other: &FactoredImage) -> Result<f64> {
        self.check_shape(other)?;
        let (fa, fb) = stack_factors(&[(1.0, self), (-1.0, other)]);
        if fa.ncols() == 0 {
            return Ok(0.0);
        }
        let (_, ra) = thin_qr(&fa);
        let (_, rb) = thin_qr(&fb);
        Ok((ra * rb.transpose()).norm_squared())
    }

    fn check_shape(&self, other: &FactoredImage) -> Result<()> {
        if self.voxel_count() != other.voxel_count() || self.frame_count() != other.frame_count() {
            return Err(Error::invalid("factored images have different shapes"));
        }
        Ok(())
    }
}

/// Relative cutoff used when recompressing exact sums of factored images.
pub const COMPACT_TOL: f64 = 1e-13;

fn stack_factors(parts: &[(f64, &FactoredImage)]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = parts[0].1.voxel_count();
    let k = parts[0].1.frame_count();
    let m: usize = parts.iter().map(|(_, f)| f.rank()).sum();
    let mut a = DMatrix::zeros(n, m);
    let mut b = DMatrix::zeros(k, m);
    let mut c = 0;
    for (w, f) in parts {
        for r in 0..f.rank() {
            a.column_mut(c).copy_from(&(f.u.column(r) * (w * f.s[r])));
            b.column_mut(c).copy_from(&f.v.column(r));
            c += 1;
        }
    }
    (a, b)
}

impl MatrixOperand for FactoredImage {
    fn nrows(&self) -> usize {
        self.voxel_count()
    }
    fn ncols(&self) -> usize {
        self.frame_count()
    }
    fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut t = self.v.tr_mul(x);
        for (r, s) in self.s.iter().enumerate() {
            t.row_mut(r).scale_mut(*s);
        }
        &self.u * t
    }
    fn tr_mul(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut t = self.u.tr_mul(y);
        for (r, s) in self.s.iter().enumerate() {
            t.row_mut(r).scale_mut(*s);
        }
        &self.v * t
    }
}

/// `base + Σ x_i ⊗ y_i`, kept as factors.
#[derive(Clone, Debug)]
pub struct LowRankUpdate {
    base: FactoredImage,
    xs: Vec<DVector<f64>>,
    ys: Vec<DVector<f64>>,
}

impl LowRankUpdate {
    pub fn new(base: FactoredImage) -> Self {
        Self {
            base,
            xs: Vec::new(),
            ys: Vec::new(),
        }
    }

    /// Appends the rank-1 term `x ⊗ y`.
    pub fn push(&mut self, x: DVector<f64>, y: DVector<f64>) -> Result<()> {
        if x.len() != self.base.voxel_count() || y.len() != self.base.frame_count() {
            return Err(Error::invalid("rank-1 term does not match the image shape"));
        }
        self.xs.push(x);
        self.ys.push(y);
        Ok(())
    }

    pub fn base(&self) -> &FactoredImage {
        &self.base
    }

    pub fn term_count(&self) -> usize {
        self.xs.len()
    }

    /// `(A, B)` with `self = A Bᵀ`.
    pub fn factors(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let (mut a, mut b) = stack_factors(&[(1.0, &self.base)]);
        let r = self.base.rank();
        let t = self.term_count();
        a = a.resize_horizontally(r + t, 0.0);
        b = b.resize_horizontally(r + t, 0.0);
        for i in 0..t {
            a.column_mut(r + i).copy_from(&self.xs[i]);
            b.column_mut(r + i).copy_from(&self.ys[i]);
        }
        (a, b)
    }

    /// Number of singular values above `rel_tol · σ₁`.
    pub fn numerical_rank(&self, rel_tol: f64) -> Result<usize> {
        let (a, b) = self.factors();
        Ok(FactoredImage::from_factors(&a, &b, rel_tol)?.rank())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (a, b) = self.factors();
        a * b.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.base.u.iter().chain(self.base.s.iter()).chain(self.base.v.iter()).all(|x| x.is_finite())
            && self.xs.iter().chain(&self.ys).all(|x| x.iter().all(|v| v.is_finite()))
    }

    fn term_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.base.voxel_count();
        let k = self.base.frame_count();
        let t = self.term_count();
        (
            DMatrix::from_fn(n, t, |i, j| self.xs[j][i]),
            DMatrix::from_fn(k, t, |i, j| self.ys[j][i]),
        )
    }
}

impl MatrixOperand for LowRankUpdate {
    fn nrows(&self) -> usize {
        self.base.voxel_count()
    }
    fn ncols(&self) -> usize {
        self.base.frame_count()
    }
    fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (xs, ys) = self.term_matrices();
        self.base.mul(x) + xs * ys.tr_mul(x)
    }
    fn tr_mul(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let (xs, ys) = self.term_matrices();
        self.base.tr_mul(y) + ys * xs.tr_mul(y)
    }
}

/// Randomized range-finder settings.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SvdOptions {
    pub oversample: usize,
    pub power_iters: usize,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            oversample: 10,
            power_iters: 2,
        }
    }
}

/// Randomized rank-`r_max` SVD of `x`.
///
/// A Gaussian sketch with `r_max + oversample` columns is refined by
/// `power_iters` rounds of re-orthonormalized power iteration; the leading
/// `r_max` triplets of the projected matrix are returned.
pub fn truncated_svd<A: MatrixOperand + ?Sized>(x: &A, r_max: usize, opts: SvdOptions, seed: u64) -> Result<FactoredImage> {
    if r_max == 0 {
        return Err(Error::invalid("maximum rank must be at least 1"));
    }
    let (n, k) = (x.nrows(), x.ncols());
    let cap = n.min(k);
    if cap == 0 {
        return Ok(FactoredImage::zeros(n, k));
    }
    let r = if r_max > cap {
        log::warn!("maximum rank {r_max} exceeds min(N, K) = {cap}; clamped");
        cap
    } else {
        r_max
    };
    let l = (r + opts.oversample).min(cap);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(k, l, |_, _| StandardNormal.sample(&mut rng));
    let sketch = x.mul(&omega);
    if sketch.iter().any(|v| !v.is_finite()) {
        return Err(Error::Undefined("matrix contains non-finite values".into()));
    }
    let mut q = thin_qr(&sketch).0;
    for _ in 0..opts.power_iters {
        let z = thin_qr(&x.tr_mul(&q)).0;
        q = thin_qr(&x.mul(&z)).0;
    }
    // B = Qᵀ X, handled through its transpose Xᵀ Q (K × l).
    let bt = x.tr_mul(&q);
    let (w, sv, zt) = sorted_svd(bt);
    // Bᵀ = W Σ Zᵀ, so B = Z Σ Wᵀ: left vectors of B are the rows of Zᵀ.
    let keep = r.min(sv.len());
    let u = &q * zt.rows(0, keep).transpose();
    let v = w.columns(0, keep).into_owned();
    let mut f = FactoredImage {
        u,
        s: DVector::from_iterator(keep, sv.into_iter().take(keep)),
        v,
    };
    f.fix_signs();
    Ok(f)
}

/// `σ ↦ max(σ − t, 0)`.
pub fn soft_threshold(s: &[f64], t: f64) -> Vec<f64> {
    s.iter().map(|&x| if x > t { x - t } else { 0.0 }).collect()
}

/// Nuclear-norm proximal map restricted to rank `r_max`: truncated SVD,
/// then soft thresholding; triplets whose value reaches zero are dropped.
pub fn prox_nuclear<A: MatrixOperand + ?Sized>(
    x: &A,
    t: f64,
    r_max: usize,
    opts: SvdOptions,
    seed: u64,
) -> Result<FactoredImage> {
    if !(t >= 0.0) {
        return Err(Error::invalid("threshold must be nonnegative"));
    }
    let f = truncated_svd(x, r_max, opts, seed)?;
    let shrunk = soft_threshold(f.s.as_slice(), t);
    let keep = shrunk.iter().take_while(|&&x| x > 0.0).count();
    Ok(FactoredImage {
        u: f.u.columns(0, keep).into_owned(),
        s: DVector::from_iterator(keep, shrunk.into_iter().take(keep)),
        v: f.v.columns(0, keep).into_owned(),
    })
}

/// Frame `k` of `f` as an image on `grid`.
pub fn frame_column(f: &FactoredImage, grid: &VoxelGrid, k: usize) -> Result<FrameImage> {
    if grid.len() != f.voxel_count() {
        return Err(Error::invalid("grid size does not match the factored image"));
    }
    FrameImage::new(grid.clone(), f.frame(k)?)
}

/// Read access shared by dense and factored space × time images.
pub trait SpatioTemporal {
    fn voxel_count(&self) -> usize;
    fn frame_count(&self) -> usize;
    fn frame_values(&self, k: usize) -> Result<Vec<f64>>;
    fn voxel_values(&self, n: usize) -> Result<Vec<f64>>;
    fn nuclear_norm(&self) -> f64;
    /// `½ Σ_k ‖f_{k+1} − f_k‖²`.
    fn temporal_penalty(&self) -> f64;
}

impl SpatioTemporal for FactoredImage {
    fn voxel_count(&self) -> usize {
        FactoredImage::voxel_count(self)
    }
    fn frame_count(&self) -> usize {
        FactoredImage::frame_count(self)
    }
    fn frame_values(&self, k: usize) -> Result<Vec<f64>> {
        self.frame(k)
    }
    fn voxel_values(&self, n: usize) -> Result<Vec<f64>> {
        self.voxel_series(n)
    }
    fn nuclear_norm(&self) -> f64 {
        FactoredImage::nuclear_norm(self)
    }
    fn temporal_penalty(&self) -> f64 {
        FactoredImage::temporal_penalty(self)
    }
}

/// Thin QR: `Q` is m×min(m,c), `R` is min(m,c)×c.
pub(crate) fn thin_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = a.clone().qr();
    (qr.q(), qr.r())
}

/// Thin SVD `M = U diag(σ) Vᵀ` with σ decreasing; returns `(U, σ, Vᵀ)` with
/// `min(m, n)` components.
///
/// One-sided Jacobi on the triangular factor of a Householder QR. Zero
/// singular values get orthonormal completions in `U` and `V`. (nalgebra's
/// bidiagonal SVD occasionally returns inaccurate factors for matrices with
/// exactly rank-deficient cores, which the solver produces near convergence.)
pub(crate) fn sorted_svd(m: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    if m.nrows() < m.ncols() {
        let (u, s, vt) = sorted_svd(m.transpose());
        return (vt.transpose(), s, u.transpose());
    }
    let n = m.ncols();
    if n == 0 {
        return (DMatrix::zeros(m.nrows(), 0), Vec::new(), DMatrix::zeros(0, 0));
    }
    let (q, r) = thin_qr(&m);
    let (w, s, v) = jacobi_svd(r);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let ws = DMatrix::from_fn(n, n, |a, c| w[(a, order[c])]);
    let vts = DMatrix::from_fn(n, n, |a, c| v[(c, order[a])]);
    let sv = order.iter().map(|&i| s[i]).collect();
    (q * ws, sv, vts)
}

/// One-sided (Hestenes) Jacobi SVD of a square matrix: `A = W diag(s) Vᵀ`.
fn jacobi_svd(mut a: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let n = a.ncols();
    let mut v = DMatrix::<f64>::identity(n, n);
    let tol = f64::EPSILON * n as f64;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..a.nrows() {
                    let (x, y) = (a[(i, p)], a[(i, q)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut a, &mut v] {
                    for i in 0..mat.nrows() {
                        let (x, y) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * x - s * y;
                        mat[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let s: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let top = s.iter().fold(0.0f64, |m, &x| m.max(x));
    let mut w = DMatrix::zeros(n, n);
    let mut missing = Vec::new();
    for j in 0..n {
        if s[j] > top * f64::EPSILON * n as f64 && s[j] > 0.0 {
            w.set_column(j, &(a.column(j) / s[j]));
        } else {
            missing.push(j);
        }
    }
    complete_basis(&mut w, &missing);
    let s = s
        .iter()
        .enumerate()
        .map(|(j, &x)| if missing.contains(&j) { 0.0 } else { x })
        .collect();
    (w, s, v)
}

/// Fills the listed columns with unit vectors orthogonal to all others.
fn complete_basis(w: &mut DMatrix<f64>, missing: &[usize]) {
    let n = w.nrows();
    let mut filled: Vec<usize> = (0..w.ncols()).filter(|j| !missing.contains(j)).collect();
    let mut candidate = 0;
    for &j in missing {
        while candidate < n {
            let mut x = DVector::<f64>::zeros(n);
            x[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let proj = w.column(f).dot(&x);
                    x -= w.column(f) * proj;
                }
            }
            let norm = x.norm();
            if norm > 0.5 {
                w.set_column(j, &(x / norm));
                filled.push(j);
                break;
            }
        }
    }
}

/// Dense SVD singular values, decreasing.
pub fn dense_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    sorted_svd(m.clone()).1
}
