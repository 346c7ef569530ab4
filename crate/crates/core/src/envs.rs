//! Finite MDPs with linear features and the five diagnostic environments.
//!
//! Episodic chains (the random walks and Boyan's chain) are made ergodic by
//! routing the terminal transition back to the start state, so that a
//! stationary behavior distribution exists and transitions can be drawn
//! i.i.d. from it. Discounting applies across the restart.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numkit::{eig_sym_extreme, solve_linear, Matrix, Vector};
use crate::{Error, Result};

const PROB_TOL: f64 = 1e-12;
const RANK_TOL: f64 = 1e-10;

/// Everything needed to assemble an [`MdpEnv`].
#[derive(Debug, Clone)]
pub struct MdpParts {
    pub name: String,
    pub n_states: usize,
    pub n_actions: usize,
    /// `P[s][a][s']`, flattened row-major.
    pub transition: Vec<f64>,
    /// `r[s][a][s']`, flattened row-major.
    pub reward: Vec<f64>,
    pub gamma: f64,
    /// One row per state.
    pub features: Matrix,
    /// `μ[s][a]`
    pub behavior: Matrix,
    /// `π[s][a]`
    pub target: Matrix,
    /// Defaults to zero when absent.
    pub initial_xi: Option<Vector>,
}

/// A validated finite MDP with a behavior and a target policy.
#[derive(Debug, Clone)]
pub struct MdpEnv {
    name: String,
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    features: Matrix,
    behavior: Matrix,
    target: Matrix,
    initial_xi: Vector,
}

impl MdpEnv {
    pub fn new(parts: MdpParts) -> Result<Self> {
        let MdpParts {
            name,
            n_states: ns,
            n_actions: na,
            transition,
            reward,
            gamma,
            features,
            behavior,
            target,
            initial_xi,
        } = parts;
        let invalid = |msg: String| Err(Error::InvalidEnv(format!("{name}: {msg}")));
        if ns == 0 || na == 0 {
            return invalid("needs at least one state and one action".into());
        }
        if transition.len() != ns * na * ns || reward.len() != ns * na * ns {
            return invalid("transition and reward tensors must have S*A*S entries".into());
        }
        if !(0.0..1.0).contains(&gamma) {
            return invalid(format!("gamma = {gamma} is outside [0, 1)"));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return invalid("rewards must be finite".into());
        }
        if features.rows() != ns || features.cols() == 0 {
            return invalid(format!("feature matrix must have {ns} rows"));
        }
        for (label, policy) in [("behavior", &behavior), ("target", &target)] {
            if policy.rows() != ns || policy.cols() != na {
                return invalid(format!("{label} policy must be {ns}x{na}"));
            }
            for s in 0..ns {
                check_distribution(policy.row(s))
                    .map_err(|m| Error::InvalidEnv(format!("{name}: {label} policy at state {s} {m}")))?;
            }
        }
        for s in 0..ns {
            for a in 0..na {
                if target[(s, a)] > 0.0 && behavior[(s, a)] <= 0.0 {
                    return invalid(format!("target acts where behavior cannot (state {s}, action {a})"));
                }
                let row = &transition[(s * na + a) * ns..(s * na + a + 1) * ns];
                check_distribution(row)
                    .map_err(|m| Error::InvalidEnv(format!("{name}: P[{s}][{a}] {m}")))?;
            }
        }
        let gram = features.transpose().matmul(&features);
        let (min_eig, _) = eig_sym_extreme(&gram)?;
        if min_eig <= RANK_TOL {
            return invalid(format!(
                "features are not full column rank (Gram minimum eigenvalue {min_eig:e})"
            ));
        }
        let n_features = features.cols();
        let initial_xi = initial_xi.unwrap_or_else(|| Vector::zeros(n_features));
        if initial_xi.dim() != n_features || !initial_xi.is_finite() {
            return invalid("initial weights must be finite with one entry per feature".into());
        }
        Ok(Self {
            name,
            n_states: ns,
            n_actions: na,
            transition,
            reward,
            gamma,
            features,
            behavior,
            target,
            initial_xi,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn phi(&self, s: usize) -> &[f64] {
        self.features.row(s)
    }

    pub fn behavior(&self) -> &Matrix {
        &self.behavior
    }

    pub fn target(&self) -> &Matrix {
        &self.target
    }

    pub fn initial_xi(&self) -> &Vector {
        &self.initial_xi
    }

    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s_next]
    }

    /// `P[s][a][·]`
    pub fn next_state_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn r(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.reward[(s * self.n_actions + a) * self.n_states + s_next]
    }

    /// Importance ratio `π(a|s) / μ(a|s)`; zero for actions the behavior
    /// policy never takes.
    pub fn rho(&self, s: usize, a: usize) -> f64 {
        let mu = self.behavior[(s, a)];
        if mu > 0.0 {
            self.target[(s, a)] / mu
        } else {
            0.0
        }
    }

    /// State-to-state chain induced by `policy`.
    fn chain(&self, policy: &Matrix) -> Matrix {
        let ns = self.n_states;
        Matrix::from_fn(ns, ns, |s, s2| (0..self.n_actions).map(|a| policy[(s, a)] * self.p(s, a, s2)).sum())
    }

    /// `P_μ[s][s'] = Σ_a μ(a|s) P(s,a,s')`
    pub fn behavior_chain(&self) -> Matrix {
        self.chain(&self.behavior)
    }

    /// `P_π[s][s'] = Σ_a π(a|s) P(s,a,s')`
    pub fn target_chain(&self) -> Matrix {
        self.chain(&self.target)
    }

    /// `r_π[s] = Σ_{a,s'} π(a|s) P(s,a,s') r(s,a,s')`
    pub fn target_reward(&self) -> Vector {
        Vector::from_fn(self.n_states, |s| {
            (0..self.n_actions)
                .flat_map(|a| (0..self.n_states).map(move |s2| (a, s2)))
                .map(|(a, s2)| self.target[(s, a)] * self.p(s, a, s2) * self.r(s, a, s2))
                .sum()
        })
    }
}

fn check_distribution(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("has a negative or non-finite probability".into());
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(format!("sums to {total}, not 1"));
    }
    Ok(())
}

/// The diagnostic environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    Boyan,
    Dependent,
    Inverted,
    Tabular,
    Baird,
}

impl EnvName {
    pub const ALL: [EnvName; 5] =
        [EnvName::Boyan, EnvName::Dependent, EnvName::Inverted, EnvName::Tabular, EnvName::Baird];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Boyan => "boyan",
            EnvName::Dependent => "dependent",
            EnvName::Inverted => "inverted",
            EnvName::Tabular => "tabular",
            EnvName::Baird => "baird",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvName::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownEnvironment(s.to_string()))
    }
}

/// Tunable constants of the environment catalog.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvParams {
    pub random_walk: RandomWalkParams,
    pub boyan: BoyanParams,
    pub baird: BairdParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomWalkParams {
    pub gamma: f64,
    pub behavior_right: f64,
    pub target_right: f64,
    /// Reward for stepping off the right end.
    pub right_reward: f64,
    /// Reward for stepping off the left end.
    pub left_reward: f64,
}

impl Default for RandomWalkParams {
    fn default() -> Self {
        Self { gamma: 0.95, behavior_right: 0.5, target_right: 0.75, right_reward: 1.0, left_reward: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoyanParams {
    pub gamma: f64,
    pub step_reward: f64,
    pub final_reward: f64,
}

impl Default for BoyanParams {
    fn default() -> Self {
        Self { gamma: 0.95, step_reward: -3.0, final_reward: -2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BairdParams {
    pub gamma: f64,
}

impl Default for BairdParams {
    fn default() -> Self {
        Self { gamma: 0.99 }
    }
}

/// Builds a catalog environment with default parameters.
pub fn build_env(name: &str) -> Result<MdpEnv> {
    build_env_with(name.parse()?, &EnvParams::default())
}

pub fn build_env_with(name: EnvName, params: &EnvParams) -> Result<MdpEnv> {
    match name {
        EnvName::Boyan => boyan(&params.boyan),
        EnvName::Dependent => random_walk(name, dependent_features(), &params.random_walk),
        EnvName::Inverted => random_walk(name, inverted_features(), &params.random_walk),
        EnvName::Tabular => random_walk(name, Matrix::identity(RW_STATES), &params.random_walk),
        EnvName::Baird => baird(&params.baird),
    }
}

const RW_STATES: usize = 5;
const RW_START: usize = 2;

fn random_walk(name: EnvName, features: Matrix, params: &RandomWalkParams) -> Result<MdpEnv> {
    let (ns, na) = (RW_STATES, 2);
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na * ns];
    let idx = |s: usize, a: usize, s2: usize| (s * na + a) * ns + s2;
    for s in 0..ns {
        // action 0 = left, 1 = right
        match s.checked_sub(1) {
            Some(left) => transition[idx(s, 0, left)] = 1.0,
            None => {
                transition[idx(s, 0, RW_START)] = 1.0;
                reward[idx(s, 0, RW_START)] = params.left_reward;
            }
        }
        if s + 1 < ns {
            transition[idx(s, 1, s + 1)] = 1.0;
        } else {
            transition[idx(s, 1, RW_START)] = 1.0;
            reward[idx(s, 1, RW_START)] = params.right_reward;
        }
    }
    let policy = |right: f64| Matrix::from_fn(ns, na, |_, a| if a == 1 { right } else { 1.0 - right });
    MdpEnv::new(MdpParts {
        name: name.to_string(),
        n_states: ns,
        n_actions: na,
        transition,
        reward,
        gamma: params.gamma,
        features,
        behavior: policy(params.behavior_right),
        target: policy(params.target_right),
        initial_xi: None,
    })
}

/// Column `s` is zero, every other entry is one half.
fn inverted_features() -> Matrix {
    Matrix::from_fn(RW_STATES, RW_STATES, |s, j| if s == j { 0.0 } else { 0.5 })
}

/// Normalized binary codes over three features.
fn dependent_features() -> Matrix {
    let codes: [[f64; 3]; RW_STATES] =
        [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]];
    Matrix::from_fn(RW_STATES, 3, |s, j| {
        let norm = codes[s].iter().map(|c| c * c).sum::<f64>().sqrt();
        codes[s][j] / norm
    })
}

const BOYAN_STATES: usize = 13;

/// Index `i` is state `i + 1`; index 0 is the terminal state, which
/// restarts at state 13.
fn boyan(params: &BoyanParams) -> Result<MdpEnv> {
    let ns = BOYAN_STATES;
    let mut transition = vec![0.0; ns * ns];
    let mut reward = vec![0.0; ns * ns];
    transition[ns - 1] = 1.0;
    transition[ns] = 1.0;
    reward[ns] = params.final_reward;
    for i in 2..ns {
        for j in [i - 1, i - 2] {
            transition[i * ns + j] = 0.5;
            reward[i * ns + j] = params.step_reward;
        }
    }
    // hat functions centred on states 13, 9, 5 and 1
    let knots = [12.0, 8.0, 4.0, 0.0];
    let features = Matrix::from_fn(ns, knots.len(), |i, k| (1.0 - (i as f64 - knots[k]).abs() / 4.0).max(0.0));
    let one = Matrix::new(ns, 1, vec![1.0; ns])?;
    MdpEnv::new(MdpParts {
        name: EnvName::Boyan.to_string(),
        n_states: ns,
        n_actions: 1,
        transition,
        reward,
        gamma: params.gamma,
        features,
        behavior: one.clone(),
        target: one,
        initial_xi: None,
    })
}

const BAIRD_STATES: usize = 7;

/// Seven-state star. Action 0 ("dashed") jumps uniformly to one of the six
/// outer states, action 1 ("solid") jumps to the centre state 7.
///
/// Features are the classic ones with the redundant column that only the
/// centre state uses removed, which leaves them full rank:
/// `φ(s_i) = 2e_i + e_7` for the outer states and `φ(s_7) = 2e_7`. The
/// initial weights reproduce the classic initial value function
/// `(3, 3, 3, 3, 3, 3, 12)`.
fn baird(params: &BairdParams) -> Result<MdpEnv> {
    let (ns, na) = (BAIRD_STATES, 2);
    let centre = ns - 1;
    let mut transition = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for s2 in 0..centre {
            transition[(s * na) * ns + s2] = 1.0 / 6.0;
        }
        transition[(s * na + 1) * ns + centre] = 1.0;
    }
    let features = Matrix::from_fn(ns, ns, |s, j| match (s == centre, j) {
        (false, j) if j == s => 2.0,
        (false, j) if j == centre => 1.0,
        (true, j) if j == centre => 2.0,
        _ => 0.0,
    });
    let mut initial = vec![-1.5; ns];
    initial[centre] = 6.0;
    MdpEnv::new(MdpParts {
        name: EnvName::Baird.to_string(),
        n_states: ns,
        n_actions: na,
        transition,
        reward: vec![0.0; ns * na * ns],
        gamma: params.gamma,
        features,
        behavior: Matrix::from_fn(ns, na, |_, a| if a == 0 { 6.0 / 7.0 } else { 1.0 / 7.0 }),
        target: Matrix::from_fn(ns, na, |_, a| if a == 0 { 0.0 } else { 1.0 }),
        initial_xi: Some(Vector::new(initial)?),
    })
}

/// Stationary state distribution of the behavior chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryDist {
    pub d: Vector,
}

/// Solves `dᵀ P_μ = dᵀ`, `Σ d = 1`.
pub fn stationary_distribution(env: &MdpEnv) -> Result<StationaryDist> {
    let ns = env.n_states();
    let pm = env.behavior_chain();
    // (P_μᵀ - I) d = 0 with the last equation replaced by normalization
    let system = Matrix::from_fn(ns, ns, |i, j| {
        if i == ns - 1 {
            1.0
        } else {
            pm[(j, i)] - if i == j { 1.0 } else { 0.0 }
        }
    });
    let mut rhs = Vector::zeros(ns);
    rhs.as_mut_slice()[ns - 1] = 1.0;
    let d = solve_linear(&system, &rhs).map_err(|e| Error::ReducibleChain(e.to_string()))?;
    if d.iter().any(|&x| x < -1e-12) {
        return Err(Error::ReducibleChain("stationary solve produced negative mass".into()));
    }
    let d = Vector::from_fn(ns, |i| d[i].max(0.0));
    let total: f64 = d.iter().sum();
    let d = d.scale(1.0 / total);
    let residual = pm.tr_mul_vec(&d).sub(&d).norm_inf();
    if residual > 1e-10 {
        return Err(Error::ReducibleChain(format!("fixed-point residual {residual:e}")));
    }
    Ok(StationaryDist { d })
}

/// Exact target-policy values, `(I - γ P_π) v = r_π`.
pub fn true_value_function(env: &MdpEnv) -> Result<Vector> {
    let ns = env.n_states();
    let pp = env.target_chain();
    let g = env.gamma();
    let system = Matrix::from_fn(ns, ns, |i, j| if i == j { 1.0 } else { 0.0 } - g * pp[(i, j)]);
    solve_linear(&system, &env.target_reward()).map_err(|e| Error::SingularSystem(e.to_string()))
}
