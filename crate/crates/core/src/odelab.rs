//! Closed-loop mean dynamics of each algorithm and trajectory export.
//!
//! Systems live in `(λ, ξ)` coordinates with equilibrium `(0, ξ*)`; TD has
//! no λ and lives in `ξ` alone. In the shifted coordinates `x = ξ − ξ*`
//! the affine constant disappears and the block matrix is unchanged.

use std::io::Write;

use serde::Serialize;

use crate::learners::{AlgoSpec, Family, RegFn};
use crate::numkit::{rk4_integrate, Matrix, Trajectory, Vector};
use crate::tdcore::KeyMatrices;
use crate::{Error, Result};

/// Default integration step.
pub const DEFAULT_DT: f64 = 1e-3;
/// Default horizon.
pub const DEFAULT_T_END: f64 = 100.0;

/// Generalized TDC++ with a nonlinear regularizer:
/// `λ̇ = −ηCλ − ηβf(λ) − ηAx`, `ẋ = (Aᵀ − κηC)λ − κηβf(λ) − κηAx`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonlinearTdcpp {
    pub a: Matrix,
    pub c: Matrix,
    pub xi_star: Vector,
    pub eta: f64,
    pub beta: f64,
    pub kappa: f64,
    pub reg_fn: RegFn,
}

impl NonlinearTdcpp {
    /// Right-hand side in shifted coordinates `(λ, x)`.
    pub fn rhs_shifted(&self, lambda: &[f64], x: &[f64], dl: &mut [f64], dx: &mut [f64]) {
        let n = lambda.len();
        let (eta, beta, kappa) = (self.eta, self.beta, self.kappa);
        for i in 0..n {
            let mut cl = 0.0;
            let mut ax = 0.0;
            let mut atl = 0.0;
            for j in 0..n {
                cl += self.c[(i, j)] * lambda[j];
                ax += self.a[(i, j)] * x[j];
                atl += self.a[(j, i)] * lambda[j];
            }
            let fl = self.reg_fn.apply_scalar(lambda[i]);
            dl[i] = -eta * cl - eta * beta * fl - eta * ax;
            dx[i] = atl - kappa * eta * cl - kappa * eta * beta * fl - kappa * eta * ax;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OdeKind {
    /// `ẏ = M y + c`
    Linear { m: Matrix, c: Vector },
    Nonlinear(NonlinearTdcpp),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdeSystem {
    pub kind: OdeKind,
    /// Number of features `n`.
    pub n: usize,
    /// Whether the state carries λ (false only for TD).
    pub has_lambda: bool,
    /// Equilibrium, `(0, ξ*)` or `ξ*`.
    pub equilibrium: Vector,
}

impl OdeSystem {
    pub fn dim(&self) -> usize {
        if self.has_lambda {
            2 * self.n
        } else {
            self.n
        }
    }

    pub fn coords(&self) -> &'static str {
        if self.has_lambda {
            "(lambda, xi)"
        } else {
            "(xi)"
        }
    }

    pub fn linear_parts(&self) -> Option<(&Matrix, &Vector)> {
        match &self.kind {
            OdeKind::Linear { m, c } => Some((m, c)),
            OdeKind::Nonlinear(_) => None,
        }
    }

    pub fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        match &self.kind {
            OdeKind::Linear { m, c } => {
                let d = y.len();
                for i in 0..d {
                    let row = m.row(i);
                    let mut acc = c[i];
                    for j in 0..d {
                        acc += row[j] * y[j];
                    }
                    dy[i] = acc;
                }
            }
            OdeKind::Nonlinear(sys) => {
                let n = self.n;
                let x: Vec<f64> = (0..n).map(|i| y[n + i] - sys.xi_star[i]).collect();
                let (dl, dx) = dy.split_at_mut(n);
                sys.rhs_shifted(&y[..n], &x, dl, dx);
            }
        }
    }

    pub fn rhs_vec(&self, y: &[f64]) -> Vector {
        let mut dy = vec![0.0; y.len()];
        self.rhs(y, &mut dy);
        Vector::from_unchecked(dy)
    }

    /// Initial state `(0, ξ0)` (or `ξ0` for TD).
    pub fn initial_state(&self, xi0: &Vector) -> Vector {
        if self.has_lambda {
            Vector::zeros(self.n).concat(xi0)
        } else {
            xi0.clone()
        }
    }
}

/// Block matrix acting on `(λ, x)` together with the multiples `(k_λ, k_ξ)`
/// of `−A` in its ξ-columns, so the affine constant is `(k_λ b, k_ξ b)`.
fn linear_loop(top_left: Matrix, k_lambda: f64, bottom_left: Matrix, k_xi: f64, km: &KeyMatrices) -> OdeKind {
    let a = &km.a;
    let m = Matrix::block2(&top_left, &a.scale(-k_lambda), &bottom_left, &a.scale(-k_xi));
    let c = km.b.scale(k_lambda).concat(&km.b.scale(k_xi));
    OdeKind::Linear { m, c }
}

/// Closed-loop ODE of `algo` for the given key matrices.
pub fn closed_loop(algo: &AlgoSpec, km: &KeyMatrices) -> Result<OdeSystem> {
    algo.validate()?;
    let n = km.dim();
    let (a, c) = (&km.a, &km.c);
    let at = a.transpose();
    let eye = Matrix::identity(n);
    let with_lambda = |kind| OdeSystem {
        kind,
        n,
        has_lambda: true,
        equilibrium: Vector::zeros(n).concat(&km.xi_star),
    };
    let sys = match algo.family {
        Family::Td => OdeSystem {
            kind: OdeKind::Linear { m: a.scale(-1.0), c: km.b.clone() },
            n,
            has_lambda: false,
            equilibrium: km.xi_star.clone(),
        },
        Family::Etd => {
            return Err(Error::InvalidHyper(
                "etd has no closed loop in terms of (A, C, b); its mean dynamics depend on the follow-on weighting".into(),
            ))
        }
        Family::Btd => {
            let eta = algo.eta;
            with_lambda(linear_loop(
                c.scale(-1.0).add(&a.scale(eta)),
                1.0,
                at.add(&a.scale(eta * eta)).sub(&c.scale(eta)),
                eta,
                km,
            ))
        }
        Family::TdcSlow => {
            let beta = algo.beta;
            with_lambda(linear_loop(c.scale(-1.0), 1.0, at.scale(beta), beta, km))
        }
        Family::Tdc2 => {
            let eta = algo.eta;
            with_lambda(linear_loop(c.scale(-eta), 1.0, at.sub(&c.scale(eta)), 1.0, km))
        }
        Family::Tdcpp if algo.reg_fn.is_identity() => {
            let (eta, beta, kappa) = (algo.eta, algo.beta, algo.kappa);
            let reg = c.add(&eye.scale(beta));
            with_lambda(linear_loop(reg.scale(-eta), eta, at.sub(&reg.scale(kappa * eta)), kappa * eta, km))
        }
        Family::Tdcpp => with_lambda(OdeKind::Nonlinear(NonlinearTdcpp {
            a: a.clone(),
            c: c.clone(),
            xi_star: km.xi_star.clone(),
            eta: algo.eta,
            beta: algo.beta,
            kappa: algo.kappa,
            reg_fn: algo.reg_fn,
        })),
    };
    Ok(sys)
}

/// The block matrix acting on `(λ, x)` of the linear closed loop, with any
/// regularizer replaced by the identity.
pub fn linear_closed_loop_matrix(algo: &AlgoSpec, km: &KeyMatrices) -> Result<Matrix> {
    let linear = algo.with_reg_fn(RegFn::Identity);
    let sys = closed_loop(&linear, km)?;
    Ok(sys.linear_parts().map(|(m, _)| m.clone()).expect("identity regularizer gives a linear loop"))
}

/// Integrates `sys` from `y0` with classical RK4.
pub fn simulate(sys: &OdeSystem, y0: &Vector, t_end: f64, dt: f64) -> Result<Trajectory> {
    if y0.dim() != sys.dim() {
        return Err(Error::InvalidConfig(format!(
            "initial state has dimension {}, system needs {}",
            y0.dim(),
            sys.dim()
        )));
    }
    Ok(rk4_integrate(|y, dy| sys.rhs(y, dy), y0, t_end, dt)?)
}

/// Writes `t, lambda_0.., xi_0..` rows preceded by a `# diverged=...`
/// comment line. TD trajectories get all-zero λ columns.
pub fn write_trajectory_csv<W: Write>(mut out: W, sys: &OdeSystem, traj: &Trajectory) -> Result<()> {
    writeln!(out, "# diverged={}", traj.diverged)?;
    let n = sys.n;
    let mut w = csv::Writer::from_writer(out);
    let header = std::iter::once("t".to_string())
        .chain((0..n).map(|i| format!("lambda_{i}")))
        .chain((0..n).map(|i| format!("xi_{i}")));
    w.write_record(header)?;
    for (t, y) in &traj.samples {
        let lambda_part: Vec<f64> = if sys.has_lambda { y[..n].to_vec() } else { vec![0.0; n] };
        let xi_part = if sys.has_lambda { &y[n..] } else { &y[..] };
        let row = std::iter::once(*t).chain(lambda_part).chain(xi_part.iter().copied()).map(|v| v.to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}
