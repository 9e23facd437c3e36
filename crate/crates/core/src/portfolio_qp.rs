//! Classical Markowitz solver: the equality-constrained quadratic program
//! `min wᵀΣw  s.t. Rᵀw = μ, Πᵀw = ξ` solved through its KKT system.
//!
//! This is the ground truth every quantum result is checked against.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, sym_eigen, RMat};

/// Eigenvalues below this fraction of the largest magnitude count as zero.
pub const PINV_REL_CUTOFF: f64 = 1e-12;
/// Relative tolerance for the right-hand side to lie in range(M).
pub const FEASIBILITY_TOL: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-10;

/// How the wealth constraint is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BudgetMode {
    /// `Πᵀw = ξ` with today's prices.
    #[default]
    Prices,
    /// `1ᵀw = ξ`.
    Unit,
}

impl std::str::FromStr for BudgetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prices" => Ok(Self::Prices),
            "unit" => Ok(Self::Unit),
            other => Err(Error::InvalidArgument(format!("unknown budget mode {other:?}"))),
        }
    }
}

/// The (N+2)-dimensional KKT system `M x = b` with `x = (η, θ, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KKTSystem {
    m_matrix: RMat,
    m_hat: RMat,
    rhs: DVector<f64>,
    mu: f64,
    xi: f64,
}

impl KKTSystem {
    pub fn m_matrix(&self) -> &RMat {
        &self.m_matrix
    }

    /// `M / tr M`.
    pub fn m_hat(&self) -> &RMat {
        &self.m_hat
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn n_assets(&self) -> usize {
        self.m_matrix.nrows() - 2
    }

    pub fn dim(&self) -> usize {
        self.m_matrix.nrows()
    }

    /// `tr M`, which equals `tr Σ`.
    pub fn trace(&self) -> f64 {
        self.m_matrix.trace()
    }

    pub fn returns(&self) -> DVector<f64> {
        self.m_matrix.row(0).columns(2, self.n_assets()).transpose()
    }

    pub fn budget_vector(&self) -> DVector<f64> {
        self.m_matrix.row(1).columns(2, self.n_assets()).transpose()
    }

    pub fn sigma(&self) -> RMat {
        let n = self.n_assets();
        self.m_matrix.view((2, 2), (n, n)).into_owned()
    }
}

pub fn build_kkt(
    r: &DVector<f64>,
    pi: &DVector<f64>,
    sigma: &RMat,
    mu: f64,
    xi: f64,
    budget_mode: BudgetMode,
) -> Result<KKTSystem> {
    let n = r.len();
    if n == 0 || pi.len() != n || sigma.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "R has {n} entries, Π has {}, Σ is {:?}",
            pi.len(),
            sigma.shape()
        )));
    }
    let asym = asymmetry(sigma);
    if asym > SYMMETRY_TOL {
        return Err(Error::InvalidArgument(format!(
            "Σ is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let trace = sigma.trace();
    if !(trace.abs() > 0.0) {
        return Err(Error::InvalidArgument("tr Σ must be nonzero".into()));
    }
    let budget = budget_vector(pi, budget_mode, n);
    let mut m = RMat::zeros(n + 2, n + 2);
    for s in 0..n {
        m[(0, s + 2)] = r[s];
        m[(s + 2, 0)] = r[s];
        m[(1, s + 2)] = budget[s];
        m[(s + 2, 1)] = budget[s];
    }
    m.view_mut((2, 2), (n, n)).copy_from(sigma);
    let mut rhs = DVector::zeros(n + 2);
    rhs[0] = mu;
    rhs[1] = xi;
    let m_hat = &m / trace;
    Ok(KKTSystem {
        m_matrix: m,
        m_hat,
        rhs,
        mu,
        xi,
    })
}

/// Positive row scaling of the return and budget constraints.
///
/// Multiplying a constraint row and its target by the same factor leaves the
/// portfolio block of the KKT solution unchanged (only η and θ rescale), but
/// it moves the spectrum of `M̂`. With raw market data `‖Π‖` is often orders
/// of magnitude above `trΣ`, which makes `M̂` far too ill-conditioned for a
/// small phase register.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintScaling {
    pub returns: f64,
    pub budget: f64,
}

impl ConstraintScaling {
    pub const IDENTITY: Self = Self { returns: 1.0, budget: 1.0 };

    /// Factors giving both constraint rows the norm `trΣ`.
    pub fn balanced(r: &DVector<f64>, pi: &DVector<f64>, sigma: &RMat, budget_mode: BudgetMode) -> Self {
        let tr = sigma.trace().abs();
        let budget = budget_vector(pi, budget_mode, r.len());
        let factor = |norm: f64| if norm > 0.0 && tr > 0.0 { tr / norm } else { 1.0 };
        Self {
            returns: factor(r.norm()),
            budget: factor(budget.norm()),
        }
    }

    /// [`build_kkt`] on the scaled constraints; the budget vector is resolved
    /// from `budget_mode` before scaling.
    pub fn build_kkt(
        &self,
        r: &DVector<f64>,
        pi: &DVector<f64>,
        sigma: &RMat,
        mu: f64,
        xi: f64,
        budget_mode: BudgetMode,
    ) -> Result<KKTSystem> {
        if !(self.returns > 0.0 && self.budget > 0.0) {
            return Err(Error::InvalidArgument("constraint scales must be positive".into()));
        }
        let budget = budget_vector(pi, budget_mode, r.len());
        build_kkt(
            &(r * self.returns),
            &(budget * self.budget),
            sigma,
            mu * self.returns,
            xi * self.budget,
            BudgetMode::Prices,
        )
    }
}

/// `Π` itself or the all-ones vector.
pub fn budget_vector(pi: &DVector<f64>, budget_mode: BudgetMode, n: usize) -> DVector<f64> {
    match budget_mode {
        BudgetMode::Prices => pi.clone(),
        BudgetMode::Unit => DVector::from_element(n, 1.0),
    }
}

/// Result of a classical solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioSolution {
    pub eta: f64,
    pub theta: f64,
    pub weights: Vec<f64>,
    pub achieved_return: f64,
    pub achieved_budget: f64,
    pub risk: f64,
    pub kappa_used: Option<f64>,
    pub epsilon_kappa: f64,
}

impl PortfolioSolution {
    fn from_x(k: &KKTSystem, x: &DVector<f64>, kappa_used: Option<f64>, epsilon_kappa: f64) -> Self {
        let n = k.n_assets();
        let w = x.rows(2, n).into_owned();
        let sigma = k.sigma();
        PortfolioSolution {
            eta: x[0],
            theta: x[1],
            achieved_return: k.returns().dot(&w),
            achieved_budget: k.budget_vector().dot(&w),
            risk: (w.transpose() * &sigma * &w)[(0, 0)],
            weights: w.iter().copied().collect(),
            kappa_used,
            epsilon_kappa,
        }
    }

    pub fn weights_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.weights)
    }
}

/// Pseudo-inverse applied to `b`, keeping eigenpairs with `|λ| ≥ threshold`.
fn filtered_inverse(values: &[f64], vectors: &RMat, b: &DVector<f64>, threshold: f64) -> DVector<f64> {
    let mut x = DVector::zeros(b.len());
    for (j, &lambda) in values.iter().enumerate() {
        if lambda.abs() >= threshold && lambda != 0.0 {
            let u = vectors.column(j);
            x += u * (u.dot(b) / lambda);
        }
    }
    x
}

fn zero_cutoff(values: &[f64]) -> f64 {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    PINV_REL_CUTOFF * max
}

/// Solve `M x = b` with the eigendecomposition pseudo-inverse.
pub fn solve_exact(k: &KKTSystem) -> Result<PortfolioSolution> {
    let (values, vectors) = sym_eigen(k.m_matrix());
    let cutoff = zero_cutoff(&values);
    let b = k.rhs();
    // Component of b outside range(M).
    let mut outside = b.clone();
    for (j, &lambda) in values.iter().enumerate() {
        if lambda.abs() >= cutoff && lambda != 0.0 {
            let u = vectors.column(j);
            outside -= u * u.dot(b);
        }
    }
    let scale = b.norm().max(1.0);
    if outside.norm() > FEASIBILITY_TOL * scale {
        return Err(Error::Infeasible(format!(
            "μ = {}, ξ = {}: residual {:.3e} outside range(M)",
            k.mu(),
            k.xi(),
            outside.norm()
        )));
    }
    let x = filtered_inverse(&values, &vectors, b, cutoff);
    Ok(PortfolioSolution::from_x(k, &x, None, 0.0))
}

/// κ-truncated pseudo-inverse `Σ_{|λ_j| ≥ 1/κ} (β_j/λ_j) u_j` and its
/// ℓ₂ distance `ε_κ` to the full pseudo-inverse applied to `b`.
pub fn pseudo_inverse_kappa(m_hat: &RMat, b: &DVector<f64>, kappa: f64) -> Result<(DVector<f64>, f64)> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
    }
    if m_hat.nrows() != b.len() || !m_hat.is_square() {
        return Err(Error::Dimension(format!(
            "matrix {:?} vs rhs of length {}",
            m_hat.shape(),
            b.len()
        )));
    }
    let (values, vectors) = sym_eigen(m_hat);
    let cutoff = zero_cutoff(&values);
    let truncated = filtered_inverse(&values, &vectors, b, cutoff.max(1.0 / kappa));
    let full = filtered_inverse(&values, &vectors, b, cutoff);
    let eps = (&truncated - &full).norm();
    Ok((truncated, eps))
}

/// Classical solve restricted to the κ-conditioned subspace of `M̂`.
pub fn solve_kappa(k: &KKTSystem, kappa: f64) -> Result<PortfolioSolution> {
    let (x_hat, eps) = pseudo_inverse_kappa(k.m_hat(), k.rhs(), kappa)?;
    // M̂⁻¹ b = tr(M) · M⁻¹ b
    let x = x_hat / k.trace();
    Ok(PortfolioSolution::from_x(k, &x, Some(kappa), eps / k.trace()))
}

pub fn portfolio_risk(w: &DVector<f64>, sigma: &RMat) -> Result<f64> {
    if sigma.shape() != (w.len(), w.len()) {
        return Err(Error::Dimension(format!(
            "w has {} entries, Σ is {:?}",
            w.len(),
            sigma.shape()
        )));
    }
    Ok((w.transpose() * sigma * w)[(0, 0)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub mu: f64,
    pub min_risk: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmittedPoint {
    pub mu: f64,
    pub reason: String,
}

/// Minimal risk as a function of target return.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrontierCurve {
    pub points: Vec<FrontierPoint>,
    pub omitted: Vec<OmittedPoint>,
}

impl FrontierCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mu,risk\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.mu, p.min_risk));
        }
        out
    }

    /// Discrete midpoint convexity on consecutive triples of an evenly
    /// spaced grid.
    pub fn is_midpoint_convex(&self, tol: f64) -> bool {
        self.points.windows(3).all(|w| {
            let mid = 0.5 * (w[0].min_risk + w[2].min_risk);
            w[1].min_risk <= mid + tol * mid.abs().max(1.0)
        })
    }
}

/// One exact solve per grid point; infeasible points are recorded and skipped.
pub fn frontier(
    r: &DVector<f64>,
    pi: &DVector<f64>,
    sigma: &RMat,
    mu_grid: &[f64],
    xi: f64,
    budget_mode: BudgetMode,
) -> Result<FrontierCurve> {
    if mu_grid.is_empty() {
        return Err(Error::InvalidArgument("empty μ grid".into()));
    }
    let results: Vec<(f64, Result<PortfolioSolution>)> = mu_grid
        .par_iter()
        .map(|&mu| {
            let sol = build_kkt(r, pi, sigma, mu, xi, budget_mode).and_then(|k| solve_exact(&k));
            (mu, sol)
        })
        .collect();
    let mut curve = FrontierCurve::default();
    for (mu, res) in results {
        match res {
            Ok(sol) => curve.points.push(FrontierPoint {
                mu,
                min_risk: sol.risk,
                weights: sol.weights,
            }),
            Err(e) => {
                log::warn!("frontier point μ = {mu} omitted: {e}");
                curve.omitted.push(OmittedPoint {
                    mu,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(curve)
}
