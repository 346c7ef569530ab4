//! Dense real linear algebra and ODE integration for desk-scale systems.
//!
//! Everything here operates on small (at most a few dozen rows) dense
//! matrices stored row-major. The eigenvalue routines are the classical
//! EISPACK-style pipeline: Parlett-Reinsch balancing, reduction to upper
//! Hessenberg form by stabilized elementary similarity transforms and a
//! Francis double-shift QR sweep. Symmetric problems use cyclic Jacobi.

use std::fmt;
use std::ops::{Deref, Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest dimension accepted by [`eig_general`].
pub const MAX_EIG_DIM: usize = 64;

/// State magnitude beyond which an integration is declared divergent.
pub const DIVERGENCE_SENTINEL: f64 = 1e12;

const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("matrix is singular (scaled pivot {pivot:e})")]
    SingularMatrix { pivot: f64 },
    #[error("eigenvalue iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("right-hand side produced a non-finite derivative at t = {time}")]
    NonFiniteState { time: f64 },
    #[error("non-finite entry at position {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dimension {0} exceeds the supported maximum of {MAX_EIG_DIM}")]
    TooLarge(usize),
    #[error("invalid integration grid: {0}")]
    InvalidStep(String),
}

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting NaN and infinite entries.
    pub fn new(entries: Vec<f64>) -> Result<Self, NumError> {
        if let Some(i) = entries.iter().position(|x| !x.is_finite()) {
            return Err(NumError::NonFinite(i));
        }
        Ok(Self(entries))
    }

    /// Wraps computed entries without the finiteness check. Used for
    /// arithmetic results that callers inspect with [`Vector::is_finite`].
    pub fn from_unchecked(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self((0..dim).map(f).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scale(&self, s: f64) -> Vector {
        Self(self.0.iter().map(|x| s * x).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "vector add dimension mismatch");
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "vector sub dimension mismatch");
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &[f64]) {
        assert_eq!(self.dim(), x.len(), "axpy dimension mismatch");
        for (y, xi) in self.0.iter_mut().zip(x) {
            *y += a * xi;
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn concat(&self, other: &Vector) -> Vector {
        let mut v = Vec::with_capacity(self.dim() + other.dim());
        v.extend_from_slice(&self.0);
        v.extend_from_slice(&other.0);
        Self(v)
    }

    /// Splits into the first `mid` entries and the rest.
    pub fn split(&self, mid: usize) -> (Vector, Vector) {
        let (a, b) = self.0.split_at(mid);
        (Self(a.to_vec()), Self(b.to_vec()))
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(NumError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumError::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        Self::from_fn(n, n, |i, j| if i == j { entries[i] } else { 0.0 })
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

    /// Assembles `[[a, b], [c, d]]` from four blocks.
    pub fn block2(a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> Matrix {
        assert!(a.rows == b.rows && c.rows == d.rows, "block row mismatch");
        assert!(a.cols == c.cols && b.cols == d.cols, "block column mismatch");
        let (top, left) = (a.rows, a.cols);
        Self::from_fn(a.rows + c.rows, a.cols + b.cols, |i, j| match (i < top, j < left) {
            (true, true) => a[(i, j)],
            (true, false) => b[(i, j - left)],
            (false, true) => c[(i - top, j)],
            (false, false) => d[(i - top, j - left)],
        })
    }

    /// `u vᵀ`
    pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vector {
        assert_eq!(self.cols, x.len(), "matrix-vector dimension mismatch");
        Vector((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vector {
        assert_eq!(self.rows, x.len(), "transposed matrix-vector dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.row(i)) {
                *o += m * xi;
            }
        }
        Vector(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| s * x).collect() }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert!(
            self.rows == other.rows && self.cols == other.cols,
            "elementwise dimension mismatch"
        );
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// `(M + Mᵀ) / 2`
    pub fn sym_part(&self) -> Matrix {
        assert!(self.is_square());
        Self::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `max |m_ij - m_ji|`
    pub fn asymmetry(&self) -> f64 {
        assert!(self.is_square());
        let n = self.rows;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let cells: Vec<String> = self.row(i).iter().map(|x| format!("{x:>12.6}")).collect();
            writeln!(f, "[{}]", cells.join(" "))?;
        }
        Ok(())
    }
}

impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

/// Eigenvalues of a real matrix, real and imaginary parts paired by index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    pub eigen_real: Vec<f64>,
    pub eigen_imag: Vec<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigen_real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigen_real.is_empty()
    }

    pub fn max_real(&self) -> f64 {
        self.eigen_real.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_real(&self) -> f64 {
        self.eigen_real.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.eigen_real.iter().copied().zip(self.eigen_imag.iter().copied())
    }
}

/// LU factorization with scaled partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(m: &Matrix) -> Result<Self, NumError> {
        if !m.is_square() {
            return Err(NumError::DimensionMismatch(format!(
                "LU needs a square matrix, got {}x{}",
                m.rows, m.cols
            )));
        }
        let n = m.rows;
        let mut lu = m.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut scale: Vec<f64> = (0..n)
            .map(|i| m.row(i).iter().fold(0.0f64, |s, x| s.max(x.abs())))
            .collect();
        if let Some(&s) = scale.iter().find(|&&s| s == 0.0) {
            return Err(NumError::SingularMatrix { pivot: s });
        }
        for k in 0..n {
            let (mut best, mut best_val) = (k, -1.0);
            for i in k..n {
                let v = lu[i * n + k].abs() / scale[i];
                if v > best_val {
                    best = i;
                    best_val = v;
                }
            }
            if best_val < PIVOT_TOL {
                return Err(NumError::SingularMatrix { pivot: best_val });
            }
            if best != k {
                for j in 0..n {
                    lu.swap(best * n + j, k * n + j);
                }
                perm.swap(best, k);
                scale.swap(best, k);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let factor = lu[i * n + k] / pivot;
                lu[i * n + k] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= factor * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vector, NumError> {
        let n = self.n;
        if rhs.len() != n {
            return Err(NumError::DimensionMismatch(format!(
                "rhs has {} entries, system has {n}",
                rhs.len()
            )));
        }
        let mut y: Vec<f64> = self.perm.iter().map(|&p| rhs[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[i * n + j] * y[j]).sum();
            y[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[i * n + j] * y[j]).sum();
            y[i] = (y[i] - s) / self.lu[i * n + i];
        }
        Ok(Vector(y))
    }

    /// Solves `m X = rhs` column by column.
    pub fn solve_matrix(&self, rhs: &Matrix) -> Result<Matrix, NumError> {
        let mut out = Matrix::zeros(self.n, rhs.cols);
        for j in 0..rhs.cols {
            let col: Vec<f64> = (0..rhs.rows).map(|i| rhs[(i, j)]).collect();
            let x = self.solve(&col)?;
            for i in 0..self.n {
                out[(i, j)] = x[i];
            }
        }
        Ok(out)
    }
}

/// Solves `m y = rhs` by Gaussian elimination with scaled partial pivoting.
pub fn solve_linear(m: &Matrix, rhs: &Vector) -> Result<Vector, NumError> {
    Lu::factor(m)?.solve(rhs)
}

pub fn inverse(m: &Matrix) -> Result<Matrix, NumError> {
    Lu::factor(m)?.solve_matrix(&Matrix::identity(m.rows))
}

/// All eigenvalues of a general real square matrix.
pub fn eig_general(m: &Matrix) -> Result<Spectrum, NumError> {
    if !m.is_square() {
        return Err(NumError::DimensionMismatch(format!(
            "eigenvalues need a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    let n = m.rows;
    if n > MAX_EIG_DIM {
        return Err(NumError::TooLarge(n));
    }
    if n == 0 {
        return Ok(Spectrum { eigen_real: vec![], eigen_imag: vec![] });
    }
    let mut a: Vec<Vec<f64>> = m.to_rows();
    balance(&mut a);
    reduce_to_hessenberg(&mut a);
    let (wr, wi) = hessenberg_qr(&mut a)?;
    Ok(Spectrum { eigen_real: wr, eigen_imag: wi })
}

fn balance(a: &mut [Vec<f64>]) {
    const RADIX: f64 = 2.0;
    let n = a.len();
    let sqrdx = RADIX * RADIX;
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let (mut r, mut c) = (0.0, 0.0);
            for j in 0..n {
                if j != i {
                    c += a[j][i].abs();
                    r += a[i][j].abs();
                }
            }
            if c != 0.0 && r != 0.0 {
                let mut g = r / RADIX;
                let mut f = 1.0;
                let s = c + r;
                while c < g {
                    f *= RADIX;
                    c *= sqrdx;
                }
                g = r * RADIX;
                while c > g {
                    f /= RADIX;
                    c /= sqrdx;
                }
                if (c + r) / f < 0.95 * s {
                    done = false;
                    let g = 1.0 / f;
                    for v in a[i].iter_mut() {
                        *v *= g;
                    }
                    for row in a.iter_mut() {
                        row[i] *= f;
                    }
                }
            }
        }
    }
}

/// Elementary similarity reduction with pivoting; entries below the
/// subdiagonal are zeroed on exit.
fn reduce_to_hessenberg(a: &mut [Vec<f64>]) {
    let n = a.len();
    for m in 1..n.saturating_sub(1) {
        let mut x = 0.0f64;
        let mut i = m;
        for j in m..n {
            if a[j][m - 1].abs() > x.abs() {
                x = a[j][m - 1];
                i = j;
            }
        }
        if i != m {
            for j in m - 1..n {
                let t = a[i][j];
                a[i][j] = a[m][j];
                a[m][j] = t;
            }
            for row in a.iter_mut() {
                row.swap(i, m);
            }
        }
        if x != 0.0 {
            for i in m + 1..n {
                let mut y = a[i][m - 1];
                if y != 0.0 {
                    y /= x;
                    a[i][m - 1] = y;
                    for j in m..n {
                        a[i][j] -= y * a[m][j];
                    }
                    for row in a.iter_mut() {
                        row[m] += y * row[i];
                    }
                }
            }
        }
    }
    for i in 2..n {
        for j in 0..i - 1 {
            a[i][j] = 0.0;
        }
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix (eigenvalues only).
#[allow(clippy::many_single_char_names)]
fn hessenberg_qr(a: &mut [Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), NumError> {
    let n = a.len() as isize;
    let max_iterations = 100 * a.len();
    let mut wr = vec![0.0; a.len()];
    let mut wi = vec![0.0; a.len()];
    let eps = f64::EPSILON;
    let mut anorm = 0.0;
    for i in 0..n {
        for j in (i - 1).max(0)..n {
            anorm += at(a, i, j).abs();
        }
    }
    let mut total_its = 0usize;
    let mut nn = n - 1;
    let mut t = 0.0;
    let (mut p, mut q, mut r): (f64, f64, f64);
    while nn >= 0 {
        let mut its = 0;
        loop {
            let mut l = nn;
            while l > 0 {
                let mut s = at(a, l - 1, l - 1).abs() + at(a, l, l).abs();
                if s == 0.0 {
                    s = anorm;
                }
                if at(a, l, l - 1).abs() <= eps * s {
                    set(a, l, l - 1, 0.0);
                    break;
                }
                l -= 1;
            }
            let mut x = at(a, nn, nn);
            if l == nn {
                wr[nn as usize] = x + t;
                wi[nn as usize] = 0.0;
                nn -= 1;
                break;
            }
            let mut y = at(a, nn - 1, nn - 1);
            let mut w = at(a, nn, nn - 1) * at(a, nn - 1, nn);
            if l == nn - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let mut z = q.abs().sqrt();
                x += t;
                let (i0, i1) = ((nn - 1) as usize, nn as usize);
                if q >= 0.0 {
                    z = p + z.copysign(p);
                    wr[i0] = x + z;
                    wr[i1] = x + z;
                    if z != 0.0 {
                        wr[i1] = x - w / z;
                    }
                    wi[i0] = 0.0;
                    wi[i1] = 0.0;
                } else {
                    wr[i0] = x + p;
                    wr[i1] = x + p;
                    wi[i0] = z;
                    wi[i1] = -z;
                }
                nn -= 2;
                break;
            }
            if total_its >= max_iterations {
                return Err(NumError::NoConvergence { iterations: total_its });
            }
            if its > 0 && its % 10 == 0 {
                // exceptional shift
                t += x;
                for i in 0..=nn {
                    let v = at(a, i, i) - x;
                    set(a, i, i, v);
                }
                let s = at(a, nn, nn - 1).abs() + at(a, nn - 1, nn - 2).abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            total_its += 1;
            let mut m = nn - 2;
            loop {
                let z = at(a, m, m);
                r = x - z;
                let s = y - z;
                p = (r * s - w) / at(a, m + 1, m) + at(a, m, m + 1);
                q = at(a, m + 1, m + 1) - z - r - s;
                r = at(a, m + 2, m + 1);
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = at(a, m, m - 1).abs() * (q.abs() + r.abs());
                let v = p.abs() * (at(a, m - 1, m - 1).abs() + z.abs() + at(a, m + 1, m + 1).abs());
                if u <= eps * v {
                    break;
                }
                m -= 1;
            }
            for i in m..nn - 1 {
                set(a, i + 2, i, 0.0);
                if i != m {
                    set(a, i + 2, i - 1, 0.0);
                }
            }
            let mut k = m;
            while k < nn {
                if k != m {
                    p = at(a, k, k - 1);
                    q = at(a, k + 1, k - 1);
                    r = 0.0;
                    if k + 1 != nn {
                        r = at(a, k + 2, k - 1);
                    }
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = (p * p + q * q + r * r).sqrt().copysign(p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            let v = -at(a, k, k - 1);
                            set(a, k, k - 1, v);
                        }
                    } else {
                        set(a, k, k - 1, -s * x);
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    let z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nn {
                        let mut pp = at(a, k, j) + q * at(a, k + 1, j);
                        if k + 1 != nn {
                            pp += r * at(a, k + 2, j);
                            let v = at(a, k + 2, j) - pp * z;
                            set(a, k + 2, j, v);
                        }
                        let v = at(a, k + 1, j) - pp * y;
                        set(a, k + 1, j, v);
                        let v = at(a, k, j) - pp * x;
                        set(a, k, j, v);
                    }
                    let mmin = if nn < k + 3 { nn } else { k + 3 };
                    for i in l..=mmin {
                        let mut pp = x * at(a, i, k) + y * at(a, i, k + 1);
                        if k + 1 != nn {
                            pp += z * at(a, i, k + 2);
                            let v = at(a, i, k + 2) - pp * r;
                            set(a, i, k + 2, v);
                        }
                        let v = at(a, i, k + 1) - pp * q;
                        set(a, i, k + 1, v);
                        let v = at(a, i, k) - pp;
                        set(a, i, k, v);
                    }
                }
                k += 1;
            }
        }
    }
    Ok((wr, wi))
}

#[inline]
fn at(a: &[Vec<f64>], i: isize, j: isize) -> f64 {
    a[i as usize][j as usize]
}

#[inline]
fn set(a: &mut [Vec<f64>], i: isize, j: isize, v: f64) {
    a[i as usize][j as usize] = v;
}

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn eig_sym(m: &Matrix) -> Result<Vec<f64>, NumError> {
    if !m.is_square() {
        return Err(NumError::DimensionMismatch("symmetric eigenproblem needs a square matrix".into()));
    }
    let asym = m.asymmetry();
    if asym > 1e-9 * m.norm_inf() {
        return Err(NumError::NotSymmetric { asymmetry: asym });
    }
    let n = m.rows;
    let mut a = m.sym_part();
    let target = 1e-12 * m.frobenius_norm().max(1.0);
    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= target {
            let mut values: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
            values.sort_by(f64::total_cmp);
            return Ok(values);
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    Err(NumError::NoConvergence { iterations: MAX_SWEEPS })
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_sym_extreme(m: &Matrix) -> Result<(f64, f64), NumError> {
    let values = eig_sym(m)?;
    match (values.first(), values.last()) {
        (Some(&lo), Some(&hi)) => Ok((lo, hi)),
        _ => Err(NumError::DimensionMismatch("empty matrix".into())),
    }
}

/// Sampled solution of an initial value problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<(f64, Vector)>,
    /// Set when some component exceeded [`DIVERGENCE_SENTINEL`] and the
    /// integration stopped early.
    pub diverged: bool,
}

impl Trajectory {
    pub fn last(&self) -> &(f64, Vector) {
        self.samples.last().expect("trajectory always holds the initial sample")
    }
}

/// Classical fourth-order Runge-Kutta on a uniform grid.
///
/// `rhs(y, dy)` writes the derivative at `y` into `dy`. A sample is
/// recorded after every step; the final step is shortened so the last
/// sample lands on `t_end` exactly.
pub fn rk4_integrate<F>(rhs: F, y0: &Vector, t_end: f64, dt: f64) -> Result<Trajectory, NumError>
where
    F: Fn(&[f64], &mut [f64]),
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(NumError::InvalidStep(format!("dt must be positive, got {dt}")));
    }
    if !(t_end >= dt && t_end.is_finite()) {
        return Err(NumError::InvalidStep(format!("t_end = {t_end} must be at least dt = {dt}")));
    }
    let n = y0.dim();
    let steps = ((t_end / dt) - 1e-9).ceil() as usize;
    let mut samples = Vec::with_capacity(steps + 1);
    let mut y = y0.as_slice().to_vec();
    samples.push((0.0, y0.clone()));
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut t = 0.0;
    let eval = |f: &F, y: &[f64], dy: &mut [f64], time: f64| -> Result<(), NumError> {
        f(y, dy);
        if dy.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumError::NonFiniteState { time })
        }
    };
    for step in 1..=steps {
        let t_next = if step == steps { t_end } else { step as f64 * dt };
        let h = t_next - t;
        eval(&rhs, &y, &mut k1, t)?;
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        eval(&rhs, &tmp, &mut k2, t + 0.5 * h)?;
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        eval(&rhs, &tmp, &mut k3, t + 0.5 * h)?;
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        eval(&rhs, &tmp, &mut k4, t + h)?;
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t = t_next;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFiniteState { time: t });
        }
        samples.push((t, Vector(y.clone())));
        if y.iter().any(|v| v.abs() > DIVERGENCE_SENTINEL) {
            return Ok(Trajectory { samples, diverged: true });
        }
    }
    Ok(Trajectory { samples, diverged: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn sorted_pairs(s: &Spectrum) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = s.pairs().collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        v
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let x = solve_linear(&Matrix::identity(3), &Vector::new(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0, 3.0]);
        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let x = solve_linear(&m, &Vector::new(vec![2.0, 8.0]).unwrap()).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn solve_rejects_singular() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let err = solve_linear(&m, &Vector::new(vec![1.0, 1.0]).unwrap()).unwrap_err();
        assert!(matches!(err, NumError::SingularMatrix { .. }));
    }

    #[test]
    fn matrix_rejects_nan() {
        assert!(matches!(Matrix::new(1, 2, vec![1.0, f64::NAN]), Err(NumError::NonFinite(1))));
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn rotation_spectrum() {
        let m = Matrix::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]).unwrap();
        let s = eig_general(&m).unwrap();
        let p = sorted_pairs(&s);
        assert!(p[0].0.abs() < 1e-14 && p[1].0.abs() < 1e-14);
        assert!((p[0].1 + 1.0).abs() < 1e-14 && (p[1].1 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn diagonal_spectrum() {
        let s = eig_general(&Matrix::diag(&[-1.0, -2.0, -3.0])).unwrap();
        let p = sorted_pairs(&s);
        for (got, want) in p.iter().zip([-3.0, -2.0, -1.0]) {
            assert!((got.0 - want).abs() < 1e-14);
            assert_eq!(got.1, 0.0);
        }
    }

    #[test]
    fn companion_matrix_roots() {
        // roots 1, 2, 3, 4
        let c = [-24.0, 50.0, -35.0, 10.0];
        let m = Matrix::from_fn(4, 4, |i, j| {
            if i == 0 {
                c[3 - j]
            } else if i == j + 1 {
                1.0
            } else {
                0.0
            }
        });
        let mut re = eig_general(&m).unwrap().eigen_real;
        re.sort_by(f64::total_cmp);
        for (got, want) in re.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn eig_rejects_oversized() {
        assert!(matches!(eig_general(&Matrix::identity(65)), Err(NumError::TooLarge(65))));
    }

    #[test]
    fn symmetric_extremes() {
        assert_eq!(eig_sym_extreme(&Matrix::diag(&[2.0, 5.0])).unwrap(), (2.0, 5.0));
        let (lo, hi) = eig_sym_extreme(&Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        assert!((lo + 1.0).abs() < 1e-14 && (hi - 1.0).abs() < 1e-14);
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(eig_sym_extreme(&m), Err(NumError::NotSymmetric { .. })));
    }

    #[test]
    fn rk4_exponential_decay() {
        let traj = rk4_integrate(|y, dy| dy[0] = -y[0], &Vector::new(vec![1.0]).unwrap(), 1.0, 1e-3).unwrap();
        let (t, y) = traj.last();
        assert_eq!(*t, 1.0);
        assert!((y[0] - (-1.0f64).exp()).abs() < 1e-10);
        assert_eq!(traj.samples.len(), 1001);
        assert!(!traj.diverged);
    }

    #[test]
    fn rk4_constant_rhs() {
        let y0 = Vector::new(vec![3.0, 4.0]).unwrap();
        let traj = rk4_integrate(|_, dy| dy.fill(0.0), &y0, 0.5, 0.1).unwrap();
        assert!(traj.samples.iter().all(|(_, y)| *y == y0));
        assert_eq!(traj.samples.len(), 6);
    }

    #[test]
    fn rk4_flags_divergence_and_nan() {
        let traj = rk4_integrate(|y, dy| dy[0] = 10.0 * y[0], &Vector::new(vec![1.0]).unwrap(), 100.0, 0.01).unwrap();
        assert!(traj.diverged);
        assert!(traj.last().0 < 100.0);
        let err = rk4_integrate(|_, dy| dy[0] = f64::NAN, &Vector::new(vec![1.0]).unwrap(), 1.0, 0.1).unwrap_err();
        assert!(matches!(err, NumError::NonFiniteState { .. }));
        assert!(rk4_integrate(|_, _| {}, &Vector::zeros(1), 1.0, 0.0).is_err());
        assert!(rk4_integrate(|_, _| {}, &Vector::zeros(1), 0.01, 0.1).is_err());
    }

    fn random_matrix(rng: &mut Xoshiro256StarStar, n: usize) -> Matrix {
        Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn trace_matches_eigen_sum() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(7);
        for n in 1..=20 {
            let m = random_matrix(&mut rng, n);
            let s = eig_general(&m).unwrap();
            let sum: f64 = s.eigen_real.iter().sum();
            assert!((sum - m.trace()).abs() <= 1e-6 * m.frobenius_norm(), "n={n}");
            let imag: f64 = s.eigen_imag.iter().sum();
            assert!(imag.abs() < 1e-9, "conjugate pairs must cancel, n={n}");
        }
    }

    #[test]
    fn hurwitz_symmetric_contracts() {
        let m = Matrix::from_rows(&[vec![-1.0, 3.0], vec![-3.0, -1.0]]).unwrap();
        let rate = eig_general(&m).unwrap().max_real();
        let t_end = 6.0 / -rate;
        let y0 = Vector::new(vec![1.0, -2.0]).unwrap();
        let traj = rk4_integrate(|y, dy| dy.copy_from_slice(&m.mul_vec(y)), &y0, t_end, 1e-3).unwrap();
        assert!(traj.last().1.norm() < y0.norm());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn rayleigh_quotient_bounded(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let m = random_matrix(&mut rng, n).sym_part();
            let (lo, hi) = eig_sym_extreme(&m).unwrap();
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rr = dot(&r, &r);
            prop_assume!(rr > 1e-12);
            let q = dot(&r, &m.mul_vec(&r)) / rr;
            prop_assert!(lo - 1e-9 <= q && q <= hi + 1e-9);
        }

        #[test]
        fn solve_residual_bound(seed in any::<u64>(), n in 1usize..16) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            // diagonally dominated keeps the condition number modest
            let m = random_matrix(&mut rng, n).add(&Matrix::identity(n).scale(n as f64));
            let rhs = Vector::from_fn(n, |_| rng.random_range(-10.0..10.0));
            let y = solve_linear(&m, &rhs).unwrap();
            let resid = m.mul_vec(&y).sub(&rhs).norm_inf();
            prop_assert!(resid <= 1e-9 * (1.0 + rhs.norm_inf()));
        }

        #[test]
        fn symmetric_eigs_agree_with_general(seed in any::<u64>(), n in 1usize..10) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let m = random_matrix(&mut rng, n).sym_part();
            let mut general = eig_general(&m).unwrap().eigen_real;
            general.sort_by(f64::total_cmp);
            let sym = eig_sym(&m).unwrap();
            for (a, b) in general.iter().zip(&sym) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
