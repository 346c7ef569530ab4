//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use tdlab::{Matrix, Vector};

/// `e^{Mt}` by scaling and squaring a truncated Taylor series.
pub fn expm(m: &Matrix, t: f64) -> Matrix {
    let n = m.rows();
    let a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| m[(i, j)] * t).collect()).collect();
    let norm = a.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.1 {
        scale *= 0.5;
        squarings += 1;
    }
    let a: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
    let mut result = identity(n);
    let mut term = identity(n);
    for k in 1..=20 {
        term = mul(&term, &a).into_iter().map(|r| r.into_iter().map(|v| v / k as f64).collect()).collect();
        for i in 0..n {
            for j in 0..n {
                result[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..squarings {
        result = mul(&result, &result);
    }
    Matrix::from_rows(&result).unwrap()
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for k in 0..b.len() {
            let aik = a[i][k];
            for j in 0..m {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Exact affine solution `y(t) = e^{Mt}(y0 − y_eq) + y_eq`.
pub fn affine_solution(m: &Matrix, y_eq: &Vector, y0: &Vector, t: f64) -> Vector {
    let e = expm(m, t);
    let shifted: Vec<f64> = (0..y0.dim()).map(|i| y0[i] - y_eq[i]).collect();
    let out = e.mul_vec(&shifted);
    Vector::new((0..y0.dim()).map(|i| out[i] + y_eq[i]).collect()).unwrap()
}

fn f64_to_ratio(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite entry")
}

/// Characteristic polynomial `det(sI − M)` with exact rational arithmetic
/// (Faddeev–LeVerrier). Returns `[1, c_1, ..., c_n]`.
pub fn char_poly_exact(m: &Matrix) -> Vec<BigRational> {
    let n = m.rows();
    let a: Vec<Vec<BigRational>> = (0..n).map(|i| (0..n).map(|j| f64_to_ratio(m[(i, j)])).collect()).collect();
    let mut coeffs = vec![BigRational::one()];
    // M_1 = I
    let mut mk: Vec<Vec<BigRational>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { BigRational::one() } else { BigRational::zero() }).collect())
        .collect();
    for k in 1..=n {
        let am: Vec<Vec<BigRational>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let mut acc = BigRational::zero();
                        for l in 0..n {
                            if !a[i][l].is_zero() && !mk[l][j].is_zero() {
                                acc += &a[i][l] * &mk[l][j];
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        let trace: BigRational = (0..n).map(|i| am[i][i].clone()).fold(BigRational::zero(), |s, v| s + v);
        let ck = -trace / BigRational::from_integer(BigInt::from(k));
        mk = am;
        for (i, row) in mk.iter_mut().enumerate() {
            row[i] += &ck;
        }
        coeffs.push(ck);
    }
    coeffs
}

/// Routh–Hurwitz test: true iff every root of the monic polynomial has
/// negative real part. Any zero in the first column counts as not stable.
pub fn routh_hurwitz_stable(coeffs: &[BigRational]) -> bool {
    let n = coeffs.len() - 1;
    if coeffs.iter().any(|c| !c.is_positive()) {
        return false;
    }
    let row_len = n / 2 + 1;
    let mut prev: Vec<BigRational> = (0..row_len).map(|j| coeffs.get(2 * j).cloned().unwrap_or_else(BigRational::zero)).collect();
    let mut cur: Vec<BigRational> =
        (0..row_len).map(|j| coeffs.get(2 * j + 1).cloned().unwrap_or_else(BigRational::zero)).collect();
    for _ in 1..n {
        if !cur[0].is_positive() {
            return false;
        }
        let next: Vec<BigRational> = (0..row_len)
            .map(|j| {
                let a = prev.get(j + 1).cloned().unwrap_or_else(BigRational::zero);
                let b = cur.get(j + 1).cloned().unwrap_or_else(BigRational::zero);
                (&cur[0] * a - &prev[0] * b) / &cur[0]
            })
            .collect();
        prev = cur;
        cur = next;
    }
    cur[0].is_positive()
}

/// Roots of a monic polynomial `[1, c_1, .., c_n]` by Aberth–Ehrlich
/// iteration.
pub fn aberth_roots(coeffs: &[f64]) -> Vec<Complex64> {
    let n = coeffs.len() - 1;
    let bound = 1.0 + coeffs[1..].iter().map(|c| c.abs()).fold(0.0, f64::max);
    let mut z: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(bound * 0.5, 2.0 * std::f64::consts::PI * (k as f64 + 0.25) / n as f64))
        .collect();
    let eval = |x: Complex64| {
        let mut p = Complex64::new(0.0, 0.0);
        let mut dp = Complex64::new(0.0, 0.0);
        for &c in coeffs {
            dp = dp * x + p;
            p = p * x + c;
        }
        (p, dp)
    };
    for _ in 0..500 {
        let mut max_step: f64 = 0.0;
        for i in 0..n {
            let (p, dp) = eval(z[i]);
            if p.norm() == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let repulsion: Complex64 = (0..n).filter(|&j| j != i).map(|j| 1.0 / (z[i] - z[j])).sum();
            let step = ratio / (Complex64::new(1.0, 0.0) - ratio * repulsion);
            z[i] -= step;
            max_step = max_step.max(step.norm());
        }
        if max_step < 1e-15 * bound {
            break;
        }
    }
    z
}

pub fn ratio_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap()
}

/// Least-squares solution of `m y = rhs` via the normal equations and a
/// plain Gauss–Jordan elimination.
pub fn normal_equations_solve(m: &Matrix, rhs: &Vector) -> Vec<f64> {
    let n = m.cols();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| (0..m.rows()).map(|k| m[(k, i)] * m[(k, j)]).sum()).collect();
            row.push((0..m.rows()).map(|k| m[(k, i)] * rhs[k]).sum());
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs())).unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r][col];
                let pivot_row = aug[col].clone();
                for (v, pv) in aug[r].iter_mut().zip(pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    aug.iter().map(|r| r[n]).collect()
}

/// Welch's one-sided test of `mean(a) < mean(b)`. Returns the p-value.
pub fn welch_one_sided_p(a: &[f64], b: &[f64]) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    StudentsT::new(0.0, 1.0, df).unwrap().cdf(t)
}

pub fn random_matrix(rng: &mut impl rand::Rng, n: usize, scale: f64) -> Matrix {
    Matrix::from_fn(n, n, |_, _| rng.random_range(-scale..scale))
}
