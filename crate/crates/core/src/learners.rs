//! One-step stochastic update rules.
//!
//! Every family is written once as an increment `(Δλ, Δξ)` per unit step
//! size; the stochastic step scales it by `α_k` and the expected direction
//! averages it over the exact transition distribution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::{MdpEnv, StationaryDist};
use crate::numkit::{dot, Vector};
use crate::tdcore::Transition;
use crate::{Error, Result};

/// Regularizer applied to λ by the generalized TDC++ family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegFn {
    #[default]
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
}

impl RegFn {
    pub fn apply_scalar(self, v: f64) -> f64 {
        match self {
            RegFn::Identity => v,
            RegFn::Relu => v.max(0.0),
            RegFn::LeakyRelu { slope } => {
                if v >= 0.0 {
                    v
                } else {
                    slope * v
                }
            }
        }
    }

    pub fn is_identity(self) -> bool {
        matches!(self, RegFn::Identity)
    }

    /// Smallest `c` with `‖f(v)‖² ≤ c‖v‖²` for all `v`.
    pub fn growth_constant(self) -> f64 {
        1.0
    }
}

impl fmt::Display for RegFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegFn::Identity => f.write_str("identity"),
            RegFn::Relu => f.write_str("relu"),
            RegFn::LeakyRelu { slope } => write!(f, "leaky_relu({slope})"),
        }
    }
}

impl FromStr for RegFn {
    type Err = Error;

    /// Accepts `identity`, `relu`, `leaky_relu` (slope 0.01) and
    /// `leaky_relu(<slope>)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "identity" | "id" => return Ok(RegFn::Identity),
            "relu" => return Ok(RegFn::Relu),
            "leaky_relu" | "leaky" => return Ok(RegFn::LeakyRelu { slope: 0.01 }),
            _ => {}
        }
        let slope = s
            .strip_prefix("leaky_relu(")
            .and_then(|rest| rest.strip_suffix(')'))
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidHyper(format!("unknown regularizer `{s}`")))?;
        Ok(RegFn::LeakyRelu { slope })
    }
}

/// Componentwise regularizer.
pub fn apply_reg_fn(f: RegFn, v: &[f64]) -> Vector {
    Vector::from_fn(v.len(), |i| f.apply_scalar(v[i]))
}

/// `α_k` as a function of the step index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { alpha: f64 },
    /// `a / (1 + k)^p`
    Polynomial { a: f64, p: f64 },
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Constant { alpha: 0.01 }
    }
}

impl StepSchedule {
    pub fn alpha(&self, k: u64) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::Polynomial { a, p } => a / (1.0 + k as f64).powf(p),
        }
    }

    /// `Σα_k = ∞` and `Σα_k² < ∞`.
    pub fn is_robbins_monro(&self) -> bool {
        match *self {
            StepSchedule::Constant { .. } => false,
            StepSchedule::Polynomial { p, .. } => p > 0.5 && p <= 1.0,
        }
    }

    /// Nominal step size used in reports (`α_0`).
    pub fn base_alpha(&self) -> f64 {
        self.alpha(0)
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant { alpha } => alpha.is_finite() && alpha >= 0.0,
            StepSchedule::Polynomial { a, p } => a.is_finite() && a > 0.0 && p.is_finite() && p >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidHyper(format!("bad step schedule {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Td,
    Etd,
    Btd,
    TdcSlow,
    Tdc2,
    Tdcpp,
}

impl Family {
    pub const ALL: [Family; 6] = [Family::Td, Family::Etd, Family::Btd, Family::TdcSlow, Family::Tdc2, Family::Tdcpp];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Td => "td",
            Family::Etd => "etd",
            Family::Btd => "btd",
            Family::TdcSlow => "tdc_slow",
            Family::Tdc2 => "tdc2",
            Family::Tdcpp => "tdcpp",
        }
    }

    /// Families whose expected update is affine in `(λ, ξ)` for every
    /// hyperparameter choice (ETD's follow-on trace makes it history
    /// dependent).
    pub fn is_markov(self) -> bool {
        self != Family::Etd
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidHyper(format!("unknown algorithm family `{s}`")))
    }
}

fn default_one() -> f64 {
    1.0
}

/// Algorithm identity plus hyperparameters. Fields a family does not use
/// are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgoSpec {
    pub family: Family,
    #[serde(default = "default_one")]
    pub eta: f64,
    #[serde(default = "default_one")]
    pub beta: f64,
    #[serde(default = "default_one")]
    pub kappa: f64,
    #[serde(default)]
    pub reg_fn: RegFn,
    #[serde(default)]
    pub schedule: StepSchedule,
}

/// Names accepted by [`AlgoSpec::preset`].
pub const PRESETS: [&str; 10] =
    ["td", "etd", "btd", "gtd2", "tdc_fast", "tdc_slow", "tdc2", "tdcpp", "tdcpp_original", "tdc_relu"];

impl AlgoSpec {
    pub fn new(family: Family, alpha: f64) -> Self {
        Self {
            family,
            eta: 1.0,
            beta: 1.0,
            kappa: 1.0,
            reg_fn: RegFn::Identity,
            schedule: StepSchedule::Constant { alpha },
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_reg_fn(mut self, f: RegFn) -> Self {
        self.reg_fn = f;
        self
    }

    pub fn td(alpha: f64) -> Self {
        Self::new(Family::Td, alpha)
    }

    pub fn etd(alpha: f64) -> Self {
        Self::new(Family::Etd, alpha)
    }

    pub fn btd(eta: f64, alpha: f64) -> Self {
        Self::new(Family::Btd, alpha).with_eta(eta)
    }

    /// BTD with `η = 0`.
    pub fn gtd2(alpha: f64) -> Self {
        Self::btd(0.0, alpha)
    }

    pub fn tdc_slow(beta: f64, alpha: f64) -> Self {
        Self::new(Family::TdcSlow, alpha).with_beta(beta)
    }

    pub fn tdc2(eta: f64, alpha: f64) -> Self {
        Self::new(Family::Tdc2, alpha).with_eta(eta)
    }

    pub fn tdcpp(eta: f64, beta: f64, kappa: f64, f: RegFn, alpha: f64) -> Self {
        Self::new(Family::Tdcpp, alpha).with_eta(eta).with_beta(beta).with_kappa(kappa).with_reg_fn(f)
    }

    /// Original TDC++: `κ = 1/η`, identity regularizer.
    pub fn tdcpp_original(eta: f64, beta: f64, alpha: f64) -> Self {
        Self::tdcpp(eta, beta, 1.0 / eta, RegFn::Identity, alpha)
    }

    /// Single-time-scale TDC: original TDC++ with `β = 0`.
    pub fn tdc_fast(eta: f64, alpha: f64) -> Self {
        Self::tdcpp_original(eta, 0.0, alpha)
    }

    /// Builds a named algorithm from explicit hyperparameters. Presets fix
    /// the parameters that define them (`gtd2` forces `η = 0`, `tdc_fast`
    /// forces `β = 0, κ = 1/η`, `tdcpp_original` forces `κ = 1/η`,
    /// `tdc_relu` forces the ReLU regularizer).
    pub fn preset(name: &str, eta: f64, beta: f64, kappa: f64, reg_fn: RegFn, alpha: f64) -> Result<Self> {
        let spec = match name {
            "gtd2" => Self::gtd2(alpha),
            "tdc_fast" | "tdc" => Self::tdc_fast(eta, alpha),
            "tdcpp_original" => Self::tdcpp_original(eta, beta, alpha),
            "tdc_relu" => Self::tdcpp(eta, beta, kappa, RegFn::Relu, alpha),
            other => {
                let family: Family = other.parse()?;
                Self::new(family, alpha).with_eta(eta).with_beta(beta).with_kappa(kappa).with_reg_fn(reg_fn)
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn alpha(&self, k: u64) -> f64 {
        self.schedule.alpha(k)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |msg: String| Err(Error::InvalidHyper(msg));
        for (name, v) in [("eta", self.eta), ("beta", self.beta), ("kappa", self.kappa)] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.eta < 0.0 {
            return bad(format!("eta = {} must be nonnegative", self.eta));
        }
        if let RegFn::LeakyRelu { slope } = self.reg_fn {
            if !(slope > 0.0 && slope <= 1.0) {
                return bad(format!("leaky_relu slope {slope} outside (0, 1]"));
            }
        }
        if !self.reg_fn.is_identity() && self.family != Family::Tdcpp {
            return bad(format!("regularizer {} only applies to tdcpp", self.reg_fn));
        }
        if self.family == Family::Tdcpp && self.eta <= 0.0 {
            return bad(format!("tdcpp needs eta > 0, got {}", self.eta));
        }
        Ok(())
    }

    /// Short human-readable identity including the relevant hyperparameters.
    pub fn label(&self) -> String {
        match self.family {
            Family::Td | Family::Etd => self.family.to_string(),
            Family::Btd | Family::Tdc2 => format!("{}(eta={})", self.family, self.eta),
            Family::TdcSlow => format!("tdc_slow(beta={})", self.beta),
            Family::Tdcpp => format!(
                "tdcpp(eta={}, beta={}, kappa={}, f={})",
                self.eta, self.beta, self.kappa, self.reg_fn
            ),
        }
    }

    /// Writes the per-unit-step increment `(Δλ, Δξ)` for one transition.
    /// `follow_on` is only read by ETD.
    pub fn increment(&self, lambda: &[f64], xi: &[f64], t: &Transition, follow_on: f64, dl: &mut [f64], dx: &mut [f64]) {
        let phi = t.phi.as_slice();
        let phi2 = t.phi_next.as_slice();
        let delta = t.td_error(xi);
        let (rho, g) = (t.rho, t.gamma);
        let pl = dot(phi, lambda);
        match self.family {
            Family::Td | Family::Etd => {
                let scale = if self.family == Family::Etd { follow_on * rho * delta } else { rho * delta };
                dl.fill(0.0);
                for i in 0..phi.len() {
                    dx[i] = scale * phi[i];
                }
            }
            Family::Btd => {
                let eta = self.eta;
                let ppl = dot(phi2, lambda);
                let cl = (-1.0 + eta) * pl - eta * rho * g * ppl + rho * delta;
                let cx = (-eta + eta * eta) * pl - eta * eta * rho * g * ppl + eta * rho * delta + pl;
                let cx2 = -rho * g * pl;
                for i in 0..phi.len() {
                    dl[i] = cl * phi[i];
                    dx[i] = cx * phi[i] + cx2 * phi2[i];
                }
            }
            Family::TdcSlow => {
                let beta = self.beta;
                let cl = -pl + rho * delta;
                let cx = pl + rho * delta;
                let cx2 = -rho * g * pl;
                for i in 0..phi.len() {
                    dl[i] = cl * phi[i];
                    dx[i] = beta * (cx * phi[i] + cx2 * phi2[i]);
                }
            }
            Family::Tdc2 => {
                let eta = self.eta;
                let cl = -eta * pl + rho * delta;
                let cx = pl - eta * pl + rho * delta;
                let cx2 = -rho * g * pl;
                for i in 0..phi.len() {
                    dl[i] = cl * phi[i];
                    dx[i] = cx * phi[i] + cx2 * phi2[i];
                }
            }
            Family::Tdcpp => {
                let (eta, beta, kappa, f) = (self.eta, self.beta, self.kappa, self.reg_fn);
                let cl = -pl + rho * delta;
                let cx = (1.0 - kappa * eta) * pl + kappa * eta * rho * delta;
                let cx2 = -rho * g * pl;
                let kbe = kappa * beta * eta;
                for i in 0..phi.len() {
                    let fl = f.apply_scalar(lambda[i]);
                    dl[i] = eta * (cl * phi[i] - beta * fl);
                    dx[i] = cx2 * phi2[i] + cx * phi[i] - kbe * fl;
                }
            }
        }
    }
}

impl Default for AlgoSpec {
    fn default() -> Self {
        Self::btd(0.5, 0.01)
    }
}

/// `(λ, ξ)` plus the step counter. `non_finite` latches once any entry
/// leaves the reals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnerState {
    pub lambda: Vector,
    pub xi: Vector,
    pub step_index: u64,
    pub non_finite: bool,
}

impl LearnerState {
    pub fn new(lambda: Vector, xi: Vector) -> Self {
        let non_finite = !(lambda.is_finite() && xi.is_finite());
        Self { lambda, xi, step_index: 0, non_finite }
    }

    /// `λ = 0`, `ξ = ξ_0`.
    pub fn initial(xi: Vector) -> Self {
        Self::new(Vector::zeros(xi.dim()), xi)
    }

    pub fn dim(&self) -> usize {
        self.xi.dim()
    }

    fn apply(&mut self, alpha: f64, dl: &[f64], dx: &[f64]) {
        let lambda = self.lambda.as_mut_slice();
        for i in 0..lambda.len() {
            lambda[i] += alpha * dl[i];
        }
        let xi = self.xi.as_mut_slice();
        for i in 0..xi.len() {
            xi[i] += alpha * dx[i];
        }
        self.step_index += 1;
        if !self.non_finite && !(self.lambda.is_finite() && self.xi.is_finite()) {
            self.non_finite = true;
        }
    }
}

fn step_with(spec: &AlgoSpec, state: &LearnerState, t: &Transition, alpha: f64, follow_on: f64) -> LearnerState {
    let n = state.dim();
    let (mut dl, mut dx) = (vec![0.0; n], vec![0.0; n]);
    spec.increment(&state.lambda, &state.xi, t, follow_on, &mut dl, &mut dx);
    let mut next = state.clone();
    next.apply(alpha, &dl, &dx);
    next
}

/// `ξ ← ξ + αρδφ`
pub fn td_step(state: &LearnerState, t: &Transition, alpha: f64) -> LearnerState {
    step_with(&AlgoSpec::td(alpha), state, t, alpha, 1.0)
}

pub fn btd_step(state: &LearnerState, t: &Transition, alpha: f64, eta: f64) -> LearnerState {
    step_with(&AlgoSpec::btd(eta, alpha), state, t, alpha, 1.0)
}

pub fn tdc_slow_step(state: &LearnerState, t: &Transition, alpha: f64, beta: f64) -> LearnerState {
    step_with(&AlgoSpec::tdc_slow(beta, alpha), state, t, alpha, 1.0)
}

pub fn tdc2_step(state: &LearnerState, t: &Transition, alpha: f64, eta: f64) -> LearnerState {
    step_with(&AlgoSpec::tdc2(eta, alpha), state, t, alpha, 1.0)
}

pub fn tdcpp_step(
    state: &LearnerState,
    t: &Transition,
    alpha: f64,
    eta: f64,
    beta: f64,
    kappa: f64,
    f: RegFn,
) -> Result<LearnerState> {
    if !(eta > 0.0) {
        return Err(Error::InvalidHyper(format!("tdcpp needs eta > 0, got {eta}")));
    }
    Ok(step_with(&AlgoSpec::tdcpp(eta, beta, kappa, f, alpha), state, t, alpha, 1.0))
}

/// Emphatic follow-on trace `F ← γρ_prev F + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowOn {
    pub f: f64,
    pub rho_prev: f64,
}

impl Default for FollowOn {
    /// The first update sees `F = 1`.
    fn default() -> Self {
        Self { f: 0.0, rho_prev: 1.0 }
    }
}

impl FollowOn {
    fn advance(self, t: &Transition) -> FollowOn {
        FollowOn { f: t.gamma * self.rho_prev * self.f + 1.0, rho_prev: t.rho }
    }
}

/// `F ← γρ_prev F + 1; ξ ← ξ + αFρδφ`
pub fn etd_step(state: &LearnerState, t: &Transition, alpha: f64, follow_on: FollowOn) -> (LearnerState, FollowOn) {
    let next = follow_on.advance(t);
    (step_with(&AlgoSpec::etd(alpha), state, t, alpha, next.f), next)
}

/// Stateful driver for any family, reusing scratch buffers across steps.
#[derive(Debug, Clone)]
pub struct Learner {
    spec: AlgoSpec,
    state: LearnerState,
    follow_on: FollowOn,
    dl: Vec<f64>,
    dx: Vec<f64>,
}

impl Learner {
    pub fn new(spec: AlgoSpec, state: LearnerState) -> Result<Self> {
        spec.validate()?;
        let n = state.dim();
        if state.lambda.dim() != n {
            return Err(Error::InvalidConfig("lambda and xi dimensions differ".into()));
        }
        Ok(Self { spec, state, follow_on: FollowOn::default(), dl: vec![0.0; n], dx: vec![0.0; n] })
    }

    pub fn spec(&self) -> &AlgoSpec {
        &self.spec
    }

    pub fn state(&self) -> &LearnerState {
        &self.state
    }

    pub fn into_state(self) -> LearnerState {
        self.state
    }

    pub fn follow_on(&self) -> FollowOn {
        self.follow_on
    }

    pub fn step(&mut self, t: &Transition) {
        let alpha = self.spec.alpha(self.state.step_index);
        if self.spec.family == Family::Etd {
            self.follow_on = self.follow_on.advance(t);
        }
        self.spec.increment(&self.state.lambda, &self.state.xi, t, self.follow_on.f, &mut self.dl, &mut self.dx);
        self.state.apply(alpha, &self.dl, &self.dx);
    }
}

/// Exact `E[Δ(λ, ξ)]/α` under `s ∼ d`, `a ∼ μ`, `s′ ∼ P`, by enumeration.
/// ETD is evaluated with `F = 1`.
pub fn expected_direction(
    spec: &AlgoSpec,
    env: &MdpEnv,
    d: &StationaryDist,
    lambda: &[f64],
    xi: &[f64],
) -> (Vector, Vector) {
    let n = env.n_features();
    let (mut el, mut ex) = (vec![0.0; n], vec![0.0; n]);
    let (mut dl, mut dx) = (vec![0.0; n], vec![0.0; n]);
    for s in 0..env.n_states() {
        for a in 0..env.n_actions() {
            let w_sa = d.d[s] * env.behavior()[(s, a)];
            if w_sa == 0.0 {
                continue;
            }
            for s2 in 0..env.n_states() {
                let w = w_sa * env.p(s, a, s2);
                if w == 0.0 {
                    continue;
                }
                let t = Transition {
                    s,
                    a,
                    s_next: s2,
                    r: env.r(s, a, s2),
                    rho: env.rho(s, a),
                    gamma: env.gamma(),
                    phi: Vector::from_unchecked(env.phi(s).to_vec()),
                    phi_next: Vector::from_unchecked(env.phi(s2).to_vec()),
                };
                spec.increment(lambda, xi, &t, 1.0, &mut dl, &mut dx);
                for i in 0..n {
                    el[i] += w * dl[i];
                    ex[i] += w * dx[i];
                }
            }
        }
    }
    (Vector::from_unchecked(el), Vector::from_unchecked(ex))
}
