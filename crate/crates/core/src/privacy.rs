//! Per-user sensitivity of the social aggregation, analytic Gaussian
//! calibration, matrix Gaussian sampling and a per-user privacy accountant.
//!
//! Every query charges each participating user a Gaussian privacy loss with
//! mean `η = (Δ/σ)²/2`. Losses add under composition and the run's cost is
//! the maximum over users.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{DenseMatrix, NumericsError, RngState};
use crate::socialgraph::SocialGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy parameters: epsilon={epsilon}, delta={delta}")]
    InvalidParameters { epsilon: f64, delta: f64 },
    #[error("calibration did not converge for epsilon={epsilon}, delta={delta}")]
    NonConvergence { epsilon: f64, delta: f64 },
    #[error("privacy budget exceeded: spent epsilon {spent:.4} > limit {limit:.4} at delta {delta:e}")]
    BudgetExceeded { spent: f64, limit: f64, delta: f64 },
    #[error("noise scale must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("user {user} outside accountant of {n_users} users")]
    UnknownUser { user: usize, n_users: usize },
}

pub type Result<T> = std::result::Result<T, PrivacyError>;

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Structural sensitivity factors of every user for one graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    per_user: Vec<f64>,
    c_i: Vec<f64>,
    c_o: f64,
    clip: f64,
    laplacian_scale: f64,
}

impl SensitivityProfile {
    /// `laplacian_scale` is `1` or the `1/N` factor applied to the operator.
    pub fn new(graph: &SocialGraph, clip: f64, laplacian_scale: f64) -> Self {
        let deg: Vec<f64> = graph.degrees().iter().map(|&d| d as f64).collect();
        let c_o = deg.iter().map(|d| 1.0 / (d + 1.0)).fold(0.0, f64::max);
        let mut c_i = Vec::with_capacity(deg.len());
        let mut per_user = Vec::with_capacity(deg.len());
        for i in 0..deg.len() {
            let ci = 1.0 / (deg[i] + 1.0)
                + graph.neighbors(i).map(|j| 1.0 / (deg[j] + 1.0)).sum::<f64>();
            c_i.push(ci);
            per_user.push(structural_factor(deg[i], ci, c_o));
        }
        Self {
            per_user,
            c_i,
            c_o,
            clip,
            laplacian_scale,
        }
    }

    /// `s_l(i)`.
    pub fn factor(&self, user: usize) -> f64 {
        self.per_user[user]
    }

    pub fn factors(&self) -> &[f64] {
        &self.per_user
    }

    pub fn c_i(&self, user: usize) -> f64 {
        self.c_i[user]
    }

    pub fn c_o(&self) -> f64 {
        self.c_o
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    /// `C² · s_l(i)`, times the Laplacian scale.
    pub fn scaled_bound(&self, user: usize) -> f64 {
        self.clip * self.clip * self.per_user[user] * self.laplacian_scale
    }

    /// Bound when the middle operand's rows are only known to satisfy
    /// `‖x_j‖ ≤ row_bound` rather than `C`.
    pub fn scaled_bound_with_rows(&self, user: usize, row_bound: f64) -> f64 {
        row_bound.max(self.clip) * self.clip * self.per_user[user] * self.laplacian_scale
    }

    pub fn n_users(&self) -> usize {
        self.per_user.len()
    }
}

/// Two-branch structural factor: `(1/2 + c_o/2)^{1/2}` for an isolated user,
/// else `(c_i/(a² + a) + c_o/a)^{1/2}` with `a = ‖a_i‖₁`.
fn structural_factor(degree: f64, c_i: f64, c_o: f64) -> f64 {
    if degree == 0.0 {
        (0.5 + 0.5 * c_o).sqrt()
    } else {
        (c_i / (degree * degree + degree) + c_o / degree).sqrt()
    }
}

/// `C² · s_l(user)` for an unscaled Laplacian.
pub fn social_sensitivity(graph: &SocialGraph, user: usize, clip: f64) -> f64 {
    SensitivityProfile::new(graph, clip, 1.0).scaled_bound(user)
}

/// `δ(b, ε) = Φ(b/2 − ε/b) − e^ε Φ(−b/2 − ε/b)`: the tight `δ` of a Gaussian
/// mechanism whose sensitivity-to-noise ratio is `b`.
pub fn analytic_delta(b: f64, epsilon: f64) -> f64 {
    if b <= 0.0 {
        return 0.0;
    }
    let a = std_normal_cdf(b / 2.0 - epsilon / b);
    let tail = std_normal_cdf(-b / 2.0 - epsilon / b);
    let second = if tail == 0.0 { 0.0 } else { (epsilon + tail.ln()).exp() };
    (a - second).max(0.0)
}

/// Largest `b` with `analytic_delta(b, ε) ≤ δ`, by bisection.
pub fn calibrate_b(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !(delta > 0.0 && delta < 1.0) || !epsilon.is_finite() {
        return Err(PrivacyError::InvalidParameters { epsilon, delta });
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while analytic_delta(hi, epsilon) <= delta {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return Err(PrivacyError::NonConvergence { epsilon, delta });
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if analytic_delta(mid, epsilon) <= delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    if lo <= 0.0 {
        return Err(PrivacyError::NonConvergence { epsilon, delta });
    }
    Ok(lo)
}

/// `δ(ε)` of a Gaussian privacy loss `𝒩(η, 2η)`.
pub fn loss_delta(eta: f64, epsilon: f64) -> f64 {
    if eta <= 0.0 {
        return 0.0;
    }
    let s = (2.0 * eta).sqrt();
    let a = std_normal_cdf((eta - epsilon) / s);
    let tail = std_normal_cdf(-(eta + epsilon) / s);
    let second = if tail == 0.0 { 0.0 } else { (epsilon + tail.ln()).exp() };
    (a - second).max(0.0)
}

/// Smallest `ε ≥ 0` with `loss_delta(η, ε) ≤ δ`.
pub fn epsilon_for_loss(eta: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::InvalidParameters {
            epsilon: f64::NAN,
            delta,
        });
    }
    if loss_delta(eta, 0.0) <= delta {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while loss_delta(eta, hi) > delta {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return Err(PrivacyError::NonConvergence {
                epsilon: hi,
                delta,
            });
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if loss_delta(eta, mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(hi)
}

/// An `(ε, δ)` budget spread evenly over a planned number of queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpBudget {
    pub epsilon: f64,
    pub delta: f64,
    /// Per-query sensitivity-to-noise ratio.
    pub b: f64,
    pub queries_planned: usize,
}

impl DpBudget {
    /// Chooses the per-query `b` so that `queries_planned` identical queries
    /// compose to exactly the single-query `b` of `(ε, δ)`:
    /// `Q · b²/2 = b_total²/2`.
    pub fn calibrate(epsilon: f64, delta: f64, queries_planned: usize) -> Result<Self> {
        let total = calibrate_b(epsilon, delta)?;
        let q = queries_planned.max(1) as f64;
        Ok(Self {
            epsilon,
            delta,
            b: total / q.sqrt(),
            queries_planned: queries_planned.max(1),
        })
    }

    /// No noise at all.
    pub fn unlimited() -> Self {
        Self {
            epsilon: f64::INFINITY,
            delta: 0.0,
            b: f64::INFINITY,
            queries_planned: 0,
        }
    }

    pub fn per_query_eta(&self) -> f64 {
        self.b * self.b / 2.0
    }
}

/// Row-wise noise scales for one query: `Σ₁ = diag(σ_i²)`, `Σ₂ = I`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePlan {
    sigmas: Vec<f64>,
    sensitivities: Vec<f64>,
    cols: usize,
}

impl NoisePlan {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            sigmas: vec![0.0; rows],
            sensitivities: vec![0.0; rows],
            cols,
        }
    }

    /// Uniform `σ` on every row. Sensitivities are reported as `σ` itself.
    pub fn constant(rows: usize, cols: usize, sigma: f64) -> Self {
        Self {
            sigmas: vec![sigma; rows],
            sensitivities: vec![sigma; rows],
            cols,
        }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sensitivities(&self) -> &[f64] {
        &self.sensitivities
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.sigmas.len(), self.cols)
    }

    pub fn is_zero(&self) -> bool {
        self.sigmas.iter().all(|s| *s == 0.0)
    }

    /// `U = diag(σ_i)`.
    pub fn row_factor(&self) -> DenseMatrix {
        DenseMatrix::diag(&self.sigmas)
    }

    /// A draw from `MN(0, diag(σ²), I)`.
    pub fn sample(&self, rng: &mut RngState) -> DenseMatrix {
        let (rows, cols) = self.shape();
        if self.is_zero() {
            return DenseMatrix::zeros(rows, cols);
        }
        DenseMatrix::from_fn(rows, cols, |r, _| self.sigmas[r] * rng.standard_normal())
    }
}

/// `σ_i = bound(users[i]) / b` for every row of a query over `users`.
pub fn make_noise_plan(profile: &SensitivityProfile, budget: &DpBudget, users: &[usize], dim: usize) -> NoisePlan {
    make_noise_plan_with_rows(profile, budget, users, dim, profile.clip())
}

/// Same as [`make_noise_plan`] with an explicit bound on middle-operand row norms.
pub fn make_noise_plan_with_rows(
    profile: &SensitivityProfile,
    budget: &DpBudget,
    users: &[usize],
    dim: usize,
    row_bound: f64,
) -> NoisePlan {
    let sensitivities: Vec<f64> = users
        .iter()
        .map(|&u| profile.scaled_bound_with_rows(u, row_bound))
        .collect();
    let sigmas = sensitivities
        .iter()
        .map(|s| if budget.b.is_infinite() { 0.0 } else { s / budget.b })
        .collect();
    NoisePlan {
        sigmas,
        sensitivities,
        cols: dim,
    }
}

/// `mean + U · G · Vᵀ` with `G` i.i.d. standard normal, an exact draw from
/// `MN(mean, UUᵀ, VVᵀ)`.
pub fn sample_matrix_gaussian(
    mean: &DenseMatrix,
    u: &DenseMatrix,
    v: &DenseMatrix,
    rng: &mut RngState,
) -> Result<DenseMatrix> {
    let g = DenseMatrix::random_normal(u.cols(), v.cols(), 1.0, rng);
    let z = u.matmul(&g)?.matmul(&v.transpose())?;
    Ok(mean.add(&z)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub label: String,
    pub users: usize,
    pub max_eta: f64,
}

/// Per-user privacy-loss ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accountant {
    eta: Vec<f64>,
    log: Vec<QueryRecord>,
    delta: f64,
}

impl Accountant {
    pub fn new(n_users: usize, delta: f64) -> Self {
        Self {
            eta: vec![0.0; n_users],
            log: Vec::new(),
            delta,
        }
    }

    /// Charges the worst-case loss `(Δ/σ)²/2` of one query to `user`.
    pub fn record(&mut self, user: usize, sensitivity: f64, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) {
            return Err(PrivacyError::NonPositiveSigma(sigma));
        }
        let n_users = self.eta.len();
        let slot = self
            .eta
            .get_mut(user)
            .ok_or(PrivacyError::UnknownUser { user, n_users })?;
        let eta = (sensitivity / sigma).powi(2) / 2.0;
        *slot += eta;
        Ok(eta)
    }

    /// Charges every row of a noise plan to its user.
    pub fn record_plan(&mut self, label: &str, users: &[usize], plan: &NoisePlan) -> Result<()> {
        let mut max_eta: f64 = 0.0;
        for (k, &u) in users.iter().enumerate() {
            let eta = self.record(u, plan.sensitivities[k], plan.sigmas[k])?;
            max_eta = max_eta.max(eta);
        }
        self.log.push(QueryRecord {
            label: label.to_string(),
            users: users.len(),
            max_eta,
        });
        Ok(())
    }

    pub fn eta(&self, user: usize) -> f64 {
        self.eta[user]
    }

    pub fn etas(&self) -> &[f64] {
        &self.eta
    }

    pub fn max_eta(&self) -> f64 {
        self.eta.iter().copied().fold(0.0, f64::max)
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.log
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Run cost at `delta`: the largest per-user `ε`.
    pub fn epsilon(&self, delta: f64) -> Result<f64> {
        epsilon_for_loss(self.max_eta(), delta)
    }

    pub fn user_epsilon(&self, user: usize, delta: f64) -> Result<f64> {
        epsilon_for_loss(self.eta[user], delta)
    }

    pub fn check_limit(&self, limit: f64) -> Result<f64> {
        let spent = self.epsilon(self.delta)?;
        // relative slack absorbs bisection round-off at an exactly spent budget
        if spent > limit * (1.0 + 1e-9) {
            return Err(PrivacyError::BudgetExceeded {
                spent,
                limit,
                delta: self.delta,
            });
        }
        Ok(spent)
    }
}
