//! Hyperparameter conditions, Hurwitz tests and Lyapunov-derivative
//! sampling.
//!
//! Eigenvalue bounds of a nonsymmetric matrix are taken on its symmetric
//! part `(M + Mᵀ)/2`.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::Serialize;

use crate::learners::{AlgoSpec, Family, RegFn};
use crate::numkit::{dot, eig_general, eig_sym_extreme, inverse, Matrix, Vector};
use crate::odelab::{linear_closed_loop_matrix, OdeSystem};
use crate::tdcore::KeyMatrices;
use crate::{Error, Result};

/// Real parts must be below `−HURWITZ_MARGIN` for a matrix to count as
/// Hurwitz.
pub const HURWITZ_MARGIN: f64 = 1e-9;
/// Sphere radii probed by [`lyapunov_sample_check`].
pub const LYAPUNOV_RADII: [f64; 3] = [0.1, 1.0, 10.0];
pub const DEFAULT_LYAPUNOV_SAMPLES: usize = 10_000;
/// Imaginary parts below this count as real when reading a spectrum that
/// is real in exact arithmetic.
const REAL_SPECTRUM_TOL: f64 = 1e-8;

/// Outcome of one hyperparameter condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub condition_id: String,
    pub satisfied: bool,
    pub threshold: f64,
    pub value: f64,
    pub detail: String,
}

fn sym_extreme(m: &Matrix) -> Result<(f64, f64)> {
    Ok(eig_sym_extreme(&m.sym_part())?)
}

/// `η > max{0, −λ_min(C⁻¹(A+Aᵀ)/2)}` for TDC-fast and TDC2.
pub fn check_eta_tdc(km: &KeyMatrices, eta: f64) -> Result<ConditionReport> {
    let c_inv = inverse(&km.c).map_err(|_| Error::SingularC)?;
    let product = c_inv.matmul(&km.a.sym_part());
    let spec = eig_general(&product)?;
    let real: Vec<f64> = spec.pairs().filter(|(_, im)| im.abs() <= REAL_SPECTRUM_TOL).map(|(re, _)| re).collect();
    let lmin = if real.is_empty() { spec.min_real() } else { real.iter().copied().fold(f64::INFINITY, f64::min) };
    let threshold = (-lmin).max(0.0);
    let satisfied = eta > threshold;
    Ok(ConditionReport {
        condition_id: "eta_tdc".into(),
        satisfied,
        threshold,
        value: eta,
        detail: format!("lambda_min(C^-1 sym(A)) = {lmin:.6e}; need eta > {threshold:.6e}"),
    })
}

/// `0 < β < −λ_min(C)/λ_min(A)` when `λ_min(A) < 0`, else `β > 0`.
pub fn check_beta_tdc_slow(km: &KeyMatrices, beta: f64) -> Result<ConditionReport> {
    let (lmin_a, _) = sym_extreme(&km.a)?;
    let (lmin_c, _) = eig_sym_extreme(&km.c)?;
    let (threshold, satisfied, detail) = if lmin_a < 0.0 {
        let t = -lmin_c / lmin_a;
        (t, beta > 0.0 && beta < t, format!("lambda_min(sym A) = {lmin_a:.6e} < 0; need 0 < beta < {t:.6e}"))
    } else {
        (0.0, beta > 0.0, format!("lambda_min(sym A) = {lmin_a:.6e} >= 0; need beta > 0"))
    };
    Ok(ConditionReport { condition_id: "beta_tdc_slow".into(), satisfied, threshold, value: beta, detail })
}

/// `β + κλ_min(A) > λ_min(C)` and `η > 0`.
///
/// For `κ < 0` the bound `κλ_min(A)` is replaced by `κλ_max(A)`, the
/// smallest value `κ·rᵀAr` can take on unit vectors.
pub fn check_tdcpp(km: &KeyMatrices, eta: f64, beta: f64, kappa: f64) -> Result<ConditionReport> {
    let (lmin_a, lmax_a) = sym_extreme(&km.a)?;
    let (lmin_c, _) = eig_sym_extreme(&km.c)?;
    let a_bound = if kappa >= 0.0 { lmin_a } else { lmax_a };
    // β must exceed λ_min(C) − κ·a_bound
    let threshold = lmin_c - kappa * a_bound;
    let satisfied = eta > 0.0 && beta > threshold;
    Ok(ConditionReport {
        condition_id: "tdcpp".into(),
        satisfied,
        threshold,
        value: beta,
        detail: format!(
            "lambda_min(C) = {lmin_c:.6e}, sym(A) extreme used = {a_bound:.6e}, kappa = {kappa}, eta = {eta}; need beta > {threshold:.6e} and eta > 0"
        ),
    })
}

/// Both readings of the κ condition and the β bound for nonlinear TDC++.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonlinearReadings {
    pub lambda_min_c: f64,
    pub lambda_min_sym_a: f64,
    /// `−λ_min(C)·λ_min(sym A)` as printed.
    pub kappa_bound_product: f64,
    /// `−λ_min(C)/λ_min(sym A)`.
    pub kappa_bound_ratio: f64,
    pub kappa_ok_product: bool,
    pub kappa_ok_ratio: bool,
    /// `λ_max(sym(C + κA))/c`
    pub beta_bound: f64,
    pub beta_ok: bool,
}

pub fn nonlinear_readings(km: &KeyMatrices, beta: f64, kappa: f64, growth: f64) -> Result<NonlinearReadings> {
    let (lmin_c, _) = eig_sym_extreme(&km.c)?;
    let (lmin_a, _) = sym_extreme(&km.a)?;
    let (kappa_bound_product, kappa_bound_ratio, kappa_ok_product, kappa_ok_ratio) = if lmin_a < 0.0 {
        let product = -lmin_c * lmin_a;
        let ratio = -lmin_c / lmin_a;
        (product, ratio, kappa > 0.0 && kappa < product, kappa > 0.0 && kappa < ratio)
    } else {
        (f64::INFINITY, f64::INFINITY, kappa > 0.0, kappa > 0.0)
    };
    let (_, lmax) = sym_extreme(&km.c.add(&km.a.scale(kappa)))?;
    let beta_bound = lmax / growth;
    Ok(NonlinearReadings {
        lambda_min_c: lmin_c,
        lambda_min_sym_a: lmin_a,
        kappa_bound_product,
        kappa_bound_ratio,
        kappa_ok_product,
        kappa_ok_ratio,
        beta_bound,
        beta_ok: beta >= 0.0 && beta < beta_bound,
    })
}

/// Nonlinear TDC++ condition. `satisfied` uses the ratio reading of the
/// κ bound together with `0 ≤ β < λ_max(C+κA)/c` and `η > 0`; the printed
/// product reading is reported in `detail`.
pub fn check_nonlinear(km: &KeyMatrices, eta: f64, beta: f64, kappa: f64, growth: f64) -> Result<ConditionReport> {
    let r = nonlinear_readings(km, beta, kappa, growth)?;
    let satisfied = eta > 0.0 && r.kappa_ok_ratio && r.beta_ok;
    Ok(ConditionReport {
        condition_id: "tdcpp_nonlinear".into(),
        satisfied,
        threshold: r.kappa_bound_ratio,
        value: kappa,
        detail: format!(
            "kappa bound: ratio reading {:.6e} ({}), product reading {:.6e} ({}); beta bound {:.6e} ({}); eta > 0 ({})",
            r.kappa_bound_ratio,
            verdict(r.kappa_ok_ratio),
            r.kappa_bound_product,
            verdict(r.kappa_ok_product),
            r.beta_bound,
            verdict(r.beta_ok),
            verdict(eta > 0.0),
        ),
    })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "holds"
    } else {
        "fails"
    }
}

/// The conditions that guarantee a stable closed loop for `algo`. BTD, TD
/// and ETD carry none.
pub fn conditions_for(algo: &AlgoSpec, km: &KeyMatrices) -> Result<Vec<ConditionReport>> {
    let reports = match algo.family {
        Family::Td | Family::Etd | Family::Btd => vec![],
        Family::Tdc2 => vec![check_eta_tdc(km, algo.eta)?],
        Family::TdcSlow => vec![check_beta_tdc_slow(km, algo.beta)?],
        Family::Tdcpp if !algo.reg_fn.is_identity() => {
            vec![check_nonlinear(km, algo.eta, algo.beta, algo.kappa, algo.reg_fn.growth_constant())?]
        }
        Family::Tdcpp if is_tdc_fast(algo) => vec![check_eta_tdc(km, algo.eta)?],
        Family::Tdcpp => vec![check_tdcpp(km, algo.eta, algo.beta, algo.kappa)?],
    };
    Ok(reports)
}

/// TDC++ with `β = 0`, `κ = 1/η` and the identity regularizer.
pub fn is_tdc_fast(algo: &AlgoSpec) -> bool {
    algo.family == Family::Tdcpp
        && algo.reg_fn.is_identity()
        && algo.beta == 0.0
        && (algo.kappa * algo.eta - 1.0).abs() <= 1e-12
}

/// `(all real parts < −1e-9, max real part)`
pub fn is_hurwitz(m: &Matrix) -> Result<(bool, f64)> {
    let max_real = eig_general(m)?.max_real();
    Ok((max_real < -HURWITZ_MARGIN, max_real))
}

/// Conditions plus the Hurwitz status of the linear closed loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub env: String,
    pub algo: String,
    pub conditions: Vec<ConditionReport>,
    pub conditions_satisfied: bool,
    pub hurwitz: bool,
    pub max_real_part: f64,
}

pub fn stability_report(env: &str, algo: &AlgoSpec, km: &KeyMatrices) -> Result<StabilityReport> {
    let conditions = conditions_for(algo, km)?;
    let (hurwitz, max_real_part) = is_hurwitz(&linear_closed_loop_matrix(algo, km)?)?;
    Ok(StabilityReport {
        env: env.to_string(),
        algo: algo.label(),
        conditions_satisfied: conditions.iter().all(|c| c.satisfied),
        conditions,
        hurwitz,
        max_real_part,
    })
}

/// A sampled point where the Lyapunov derivative was positive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovWitness {
    pub lambda: Vector,
    pub x: Vector,
    pub v_dot: f64,
}

/// Result of a sampling check. Passing means "no counterexample found",
/// not a proof.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovReport {
    pub passed: bool,
    pub samples: usize,
    pub max_v_dot: f64,
    pub witness: Option<LyapunovWitness>,
}

/// Samples `(λ, x)` on spheres of radii 0.1, 1 and 10 and evaluates
/// `V̇` for `V(λ, z) = ‖λ‖²/(2η) + ‖z‖²/2`, `z = x − κλ`, along the
/// system's right-hand side. Fails at the first point with
/// `V̇ > 1e-12·max(1, r²)`.
pub fn lyapunov_sample_check(
    sys: &OdeSystem,
    km: &KeyMatrices,
    eta: f64,
    kappa: f64,
    samples: usize,
    seed: u64,
) -> Result<LyapunovReport> {
    if !sys.has_lambda {
        return Err(Error::InvalidConfig("Lyapunov check needs a (lambda, xi) system".into()));
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidHyper(format!("Lyapunov check needs eta > 0, got {eta}")));
    }
    let n = sys.n;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut y = vec![0.0; 2 * n];
    let mut dy = vec![0.0; 2 * n];
    let mut max_v_dot = f64::NEG_INFINITY;
    for k in 0..samples {
        let radius = LYAPUNOV_RADII[k % LYAPUNOV_RADII.len()];
        let mut dir: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dot(&dir, &dir).sqrt();
        dir.iter_mut().for_each(|v| *v *= radius / norm);
        let (lambda, x) = dir.split_at(n);
        y[..n].copy_from_slice(lambda);
        for i in 0..n {
            y[n + i] = x[i] + km.xi_star[i];
        }
        sys.rhs(&y, &mut dy);
        let (dl, dx) = dy.split_at(n);
        let mut v_dot = 0.0;
        for i in 0..n {
            let z = x[i] - kappa * lambda[i];
            let dz = dx[i] - kappa * dl[i];
            v_dot += lambda[i] * dl[i] / eta + z * dz;
        }
        max_v_dot = max_v_dot.max(v_dot);
        if v_dot > 1e-12 * radius.powi(2).max(1.0) {
            return Ok(LyapunovReport {
                passed: false,
                samples: k + 1,
                max_v_dot,
                witness: Some(LyapunovWitness {
                    lambda: Vector::from_unchecked(lambda.to_vec()),
                    x: Vector::from_unchecked(x.to_vec()),
                    v_dot,
                }),
            });
        }
    }
    Ok(LyapunovReport { passed: true, samples, max_v_dot, witness: None })
}

/// Hyperparameter grid used by the soundness sweeps: six values each.
pub const GRID_6: [f64; 6] = [0.01, 0.1, 0.5, 1.0, 2.0, 4.0];

/// Every algorithm checked by the soundness sweep for one environment.
pub fn soundness_grid() -> Vec<AlgoSpec> {
    let mut algos = vec![];
    for &v in &GRID_6 {
        algos.push(AlgoSpec::tdc_fast(v, 0.01));
        algos.push(AlgoSpec::tdc2(v, 0.01));
        algos.push(AlgoSpec::tdc_slow(v, 0.01));
    }
    for &eta in &GRID_6 {
        for &beta in &[0.0, 0.1, 1.0] {
            algos.push(AlgoSpec::tdcpp_original(eta, beta, 0.01));
            for &kappa in &[-1.0, 0.1, 1.0, 4.0] {
                algos.push(AlgoSpec::tdcpp(eta, beta, kappa, RegFn::Identity, 0.01));
                algos.push(AlgoSpec::tdcpp(eta, beta, kappa, RegFn::Relu, 0.01));
                algos.push(AlgoSpec::tdcpp(eta, beta, kappa, RegFn::LeakyRelu { slope: 0.1 }, 0.01));
            }
        }
    }
    algos
}
