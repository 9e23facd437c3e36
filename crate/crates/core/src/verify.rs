//! Correctness criteria for the whole pipeline, shared by the `verify`
//! command and the acceptance test suite. Each check is deterministic for a
//! fixed [`VerifyConfig`].

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hamiltonian_sim::{
    density_exponentiation_step, exact_density_evolution, simulate_density_hamiltonian, star_eigensystem,
    star_exponential, star_matrix, trotter_evolution, HamiltonianParts, StarCenter,
};
use crate::hhl::{hhl_solve, HHLConfig};
use crate::linalg::{
    c, gershgorin_bound, hermitian_expm, loglog_slope, op_norm, pow2_ceil, sym_eigen, to_complex,
    trace_distance, trace_norm, CMat, RMat, I,
};
use crate::market_data::ReturnsPanel;
use crate::portfolio_qp::{build_kkt, portfolio_risk, pseudo_inverse_kappa, solve_exact, BudgetMode, KKTSystem};
use crate::qsim::{DensityMatrix, QuantumState};
use crate::readout::{
    covariance_density_from_sigma, frontier_quantum, sample_portfolio_with_sigma, sampling_error_report, swap_test,
    FrontierProblem, Operand,
};
use crate::state_prep::{chi_tilde_probability, covariance_density, prepare_chi_tilde, KPTree, Precision};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Phase-register size for the HHL criteria.
    pub n_phase_bits: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            n_phase_bits: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CriterionReport {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
    pub failures: Vec<String>,
    /// Wall time; kept out of the serialized report so that reports are
    /// byte-identical across runs.
    #[serde(skip)]
    pub elapsed: Duration,
}

impl CriterionReport {
    pub fn summary_line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let metrics: Vec<String> = self.metrics.iter().map(|(k, v)| format!("{k}={v:.4e}")).collect();
        let mut line = format!("AC{:<2} {status}  {}  [{}]", self.id, self.name, metrics.join(", "));
        if !self.failures.is_empty() {
            line.push_str(&format!("  failures: {}", self.failures.join("; ")));
        }
        line
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub config: VerifyConfig,
    pub criteria: Vec<CriterionReport>,
    pub all_passed: bool,
}

/// Collects metrics and failed checks for one criterion.
struct Check {
    id: u8,
    name: &'static str,
    metrics: BTreeMap<String, f64>,
    failures: Vec<String>,
    start: Instant,
}

impl Check {
    fn new(id: u8, name: &'static str) -> Self {
        Self {
            id,
            name,
            metrics: BTreeMap::new(),
            failures: Vec::new(),
            start: Instant::now(),
        }
    }

    fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    /// Track the worst value seen for a metric.
    fn worst(&mut self, key: &str, value: f64, larger_is_worse: bool) {
        let slot = self.metrics.entry(key.to_string()).or_insert(value);
        if (larger_is_worse && value > *slot) || (!larger_is_worse && value < *slot) || value.is_nan() {
            *slot = value;
        }
    }

    fn require(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }

    fn error(&mut self, context: &str, e: crate::error::Error) {
        self.failures.push(format!("{context}: {e}"));
    }

    fn finish(self) -> CriterionReport {
        CriterionReport {
            id: self.id,
            name: self.name.to_string(),
            passed: self.failures.is_empty(),
            metrics: self.metrics,
            failures: self.failures,
            elapsed: self.start.elapsed(),
        }
    }
}

fn rng_for(cfg: &VerifyConfig, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(id))
}

fn random_spd(n: usize, ridge: f64, rng: &mut ChaCha8Rng) -> RMat {
    let a = RMat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + RMat::identity(n, n) * ridge
}

fn random_density(d: usize, rng: &mut ChaCha8Rng) -> DensityMatrix {
    let a = CMat::from_fn(d, d, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let m = &a * a.adjoint();
    let tr = m.trace();
    DensityMatrix::new(m / tr).expect("random density is valid")
}

fn full_solution(k: &KKTSystem) -> Result<DVector<f64>> {
    let s = solve_exact(k)?;
    let mut x = DVector::zeros(k.dim());
    x[0] = s.eta;
    x[1] = s.theta;
    for (j, w) in s.weights.iter().enumerate() {
        x[2 + j] = *w;
    }
    Ok(x)
}

/// Orthonormal basis of `{d : Rᵀd = Πᵀd = 0}`.
fn constraint_null_space(r: &DVector<f64>, pi: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = r.len();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut fixed = vec![r.normalize()];
    let p = pi - &fixed[0] * fixed[0].dot(pi);
    if p.norm() > 1e-12 {
        fixed.push(p.normalize());
    }
    for j in 0..n {
        let mut v = DVector::zeros(n);
        v[j] = 1.0;
        for f in fixed.iter().chain(basis.iter()) {
            v -= f * f.dot(&v);
        }
        if v.norm() > 1e-8 {
            basis.push(v.normalize());
        }
    }
    basis
}

pub fn check_kkt_oracle(cfg: &VerifyConfig) -> CriterionReport {
    let mut ck = Check::new(1, "KKT oracle residuals and optimality");
    let mut rng = rng_for(cfg, 1);
    for &n in &[2usize, 4, 8, 16, 32] {
        for inst in 0..10 {
            let sigma = random_spd(n, 0.1, &mut rng);
            let r = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let pi = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
            let mu = rng.random_range(-1.0..1.0);
            let xi = rng.random_range(0.5..2.0);
            let k = match build_kkt(&r, &pi, &sigma, mu, xi, BudgetMode::Prices) {
                Ok(k) => k,
                Err(e) => {
                    ck.error(&format!("N={n} #{inst}"), e);
                    continue;
                }
            };
            let x = match full_solution(&k) {
                Ok(x) => x,
                Err(e) => {
                    ck.error(&format!("N={n} #{inst}"), e);
                    continue;
                }
            };
            let b = k.rhs();
            let res = (k.m_matrix() * &x - b).norm() / b.norm();
            ck.worst("max_relative_residual", res, true);
            ck.require(res <= 1e-9, || format!("N={n} #{inst}: residual {res:.2e}"));
            let w = x.rows(2, n).into_owned();
            let ret = (r.dot(&w) - mu).abs() / mu.abs().max(r.norm() * w.norm());
            let bud = (pi.dot(&w) - xi).abs() / xi.abs().max(pi.norm() * w.norm());
            ck.worst("max_constraint_residual", ret.max(bud), true);
            ck.require(ret <= 1e-8 && bud <= 1e-8, || {
                format!("N={n} #{inst}: constraint residuals {ret:.2e}, {bud:.2e}")
            });
            let base = portfolio_risk(&w, &sigma).unwrap_or(f64::NAN);
            let null = constraint_null_space(&r, &pi);
            if null.is_empty() {
                continue;
            }
            for _ in 0..20 {
                let mut d = DVector::zeros(n);
                for v in &null {
                    d += v * rng.random_range(-1.0..1.0);
                }
                let scale = rng.random_range(1e-4..1.0) * w.norm().max(1.0) / d.norm().max(1e-300);
                let d = d * scale;
                let risk = portfolio_risk(&(&w + d), &sigma).unwrap_or(f64::NAN);
                let drop = base - risk;
                ck.worst("max_risk_reduction", drop, true);
                ck.require(drop <= 1e-9, || format!("N={n} #{inst}: perturbation lowered risk by {drop:.2e}"));
            }
        }
    }
    ck.finish()
}

pub fn check_state_prep_identity(cfg: &VerifyConfig) -> CriterionReport {
    let mut ck = Check::new(2, "state-prep covariance identity");
    let mut rng = rng_for(cfg, 2);
    for inst in 0..20 {
        let n = rng.random_range(2..=8usize);
        let t = 1usize << rng.random_range(1..=4u32);
        let returns = RMat::from_fn(n, t, |_, _| rng.random_range(-0.1..0.1));
        let panel = match ReturnsPanel::from_returns(returns) {
            Ok(p) => p,
            Err(e) => {
                ck.error(&format!("panel #{inst}"), e);
                continue;
            }
        };
        let out = match prepare_chi_tilde(&panel, None, Precision::Exact) {
            Ok(o) => o,
            Err(e) => {
                ck.error(&format!("panel #{inst} (N={n}, T={t})"), e);
                continue;
            }
        };
        let rho = match covariance_density(&out) {
            Ok(r) => r,
            Err(e) => {
                ck.error(&format!("panel #{inst}"), e);
                continue;
            }
        };
        let sigma = panel.covariance();
        let tr = sigma.trace();
        let mut err: f64 = 0.0;
        for i in 0..rho.dim() {
            for j in 0..rho.dim() {
                let want = if i < n && j < n { sigma[(i, j)] / tr } else { 0.0 };
                err = err.max((rho.matrix()[(i, j)] - c(want)).norm());
            }
        }
        ck.worst("max_density_error", err, true);
        ck.require(err <= 1e-9, || format!("panel #{inst} (N={n}, T={t}): ρ error {err:.2e}"));
        let (np, _) = pow2_ceil(n);
        let delta = out.delta_used;
        let formula = delta * delta * (t as f64 - 1.0) * tr / (4.0 * t as f64 * np as f64);
        let perr = (out.success_probability - formula).abs();
        ck.worst("max_probability_error", perr, true);
        ck.require(perr <= 1e-10, || format!("panel #{inst}: P error {perr:.2e}"));
        let aerr = (chi_tilde_probability(&panel, delta) - formula).abs();
        ck.require(aerr <= 1e-12, || format!("panel #{inst}: closed-form probability off by {aerr:.2e}"));
    }
    ck.finish()
}

pub fn check_kp_preparation(cfg: &VerifyConfig) -> CriterionReport {
    let mut ck = Check::new(3, "KP-tree preparation and update");
    let mut rng = rng_for(cfg, 3);
    for inst in 0..100 {
        let n = rng.random_range(1..=64usize);
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        let result = (|| -> Result<(f64, f64)> {
            let mut tree = KPTree::build(&v)?;
            let state = tree.prepare()?;
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let amps = state.amplitudes();
            let mut err: f64 = 0.0;
            for (j, a) in amps.iter().enumerate() {
                let want = v.get(j).copied().unwrap_or(0.0) / norm;
                err = err.max((a - c(want)).norm());
            }
            let idx = rng.random_range(0..n);
            let val = rng.random_range(-1.0..1.0);
            tree.update(idx, val)?;
            v[idx] = val;
            if v.iter().all(|x| *x == 0.0) {
                return Ok((err, 0.0));
            }
            let rebuilt = KPTree::build(&v)?;
            let mut diff: f64 = 0.0;
            for (la, lb) in tree.levels().iter().zip(rebuilt.levels()) {
                for (a, b) in la.iter().zip(lb) {
                    diff = diff.max((a - b).abs());
                }
            }
            if tree.signs() != rebuilt.signs() {
                diff = f64::INFINITY;
            }
            Ok((err, diff))
        })();
        match result {
            Ok((err, diff)) => {
                ck.worst("max_amplitude_error", err, true);
                ck.worst("max_update_mismatch", diff, true);
                ck.require(err <= 1e-10, || format!("vector #{inst} (N={n}): amplitude error {err:.2e}"));
                ck.require(diff <= 1e-12, || format!("vector #{inst}: update differs from rebuild by {diff:.2e}"));
            }
            Err(e) => ck.error(&format!("vector #{inst}"), e),
        }
    }
    ck.finish()
}

pub fn check_star_simulation(cfg: &VerifyConfig) -> CriterionReport {
    let mut ck = Check::new(4, "star-graph exponential");
    let mut rng = rng_for(cfg, 4);
    for inst in 0..20 {
        let n = rng.random_range(1..=8usize);
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let t = rng.random_range(-3.0..3.0);
        let center = if inst % 2 == 0 { StarCenter::Returns } else { StarCenter::Budget };
        let dim = n + 2;
        let result = (|| -> Result<(f64, f64)> {
            let h = star_matrix(&v, center, dim)?;
            let recipe = star_exponential(&v, center, dim, t)?;
            let dense = hermitian_expm(&to_complex(&h), t);
            let err = op_norm(&(recipe - dense));
            let eig = star_eigensystem(&v, center, dim)?;
            let norm = v.norm();
            let (values, _) = sym_eigen(&h);
            let top = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let bottom = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let eerr = (eig.lambda_plus - norm)
                .abs()
                .max((eig.lambda_minus + norm).abs())
                .max((top - norm).abs())
                .max((bottom + norm).abs());
            Ok((err, eerr))
        })();
        match result {
            Ok((err, eerr)) => {
                ck.worst("max_operator_error", err, true);
                ck.worst("max_eigenvalue_error", eerr, true);
                ck.require(err <= 1e-8, || format!("instance #{inst}: ‖Δ‖ = {err:.2e}"));
                ck.require(eerr <= 1e-12, || format!("instance #{inst}: eigenvalue error {eerr:.2e}"));
            }
            Err(e) => ck.error(&format!("instance #{inst}"), e),
        }
    }
    ck.finish()
}

pub fn check_trotter_order(cfg: &VerifyConfig) -> CriterionReport {
    let mut ck = Check::new(5, "first-order product formula");
    let mut rng = rng_for(cfg, 5);
    let steps = [4usize, 8, 16, 32];
    let xs: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    for inst in 0..10 {
        let n = rng.random_range(2..=4usize);
        let sigma = random_spd(n, 0.1, &mut rng);
        let r = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let pi = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
        let result = (|| -> Result<f64> {
            let parts = HamiltonianParts::new(&sigma, &r, &pi, sigma.trace())?;
            let t = 2.0 / gershgorin_bound(&parts.total());
            let errs: Vec<f64> = steps
                .iter()
                .map(|&s| trotter_evolution(&parts, t * 4.0, s).map(|e| e.error_bound))
                .collect::<Result<_>>()?;
            Ok(loglog_slope(&xs, &errs))
        })();
        match result {
            Ok(slope) => {
                ck.worst("steepest_slope", slope, false);
                ck.worst("shallowest_slope", slope, true);
                ck.require((-1.3..=-0.9).contains(&slope), || format!("instance #{inst}: slope {slope:.3}"));
            }
            Err(e) => ck.error(&format!("instance #{inst}"), e),
        }
    }
    ck.finish()
}

pub fn check_density_exponentiation(cfg: &VerifyConfig) -> CriterionReport {
    let mut ck = Check::new(6, "density-matrix exponentiation");
    let mut rng = rng_for(cfg, 6);
    for inst in 0..5 {
        let d = 2 + inst % 3;
        let rho = random_density(d, &mut rng);
        let sigma = random_density(d, &mut rng);
        let comm = rho.matrix() * sigma.matrix() - sigma.matrix() * rho.matrix();
        let errs: Result<Vec<f64>> = [0.1, 0.05, 0.025, 0.0125]
            .iter()
            .map(|&dt| {
                let out = density_exponentiation_step(&rho, &sigma, dt)?;
                let first = sigma.matrix() - &comm * (I * dt);
                Ok(trace_norm(&(out.matrix() - first)))
            })
            .collect();
        match errs {
            Ok(errs) => {
                for w in errs.windows(2) {
                    let ratio = w[0] / w[1];
                    ck.worst("step_ratio_min", ratio, false);
                    ck.worst("step_ratio_max", ratio, true);
                    ck.require((2.8..=5.2).contains(&ratio), || format!("pair #{inst}: step ratio {ratio:.3}"));
                }
            }
            Err(e) => ck.error(&format!("pair #{inst}"), e),
        }
        let exact = exact_density_evolution(&rho, &sigma, 1.0);
        let errs: Result<Vec<f64>> = [10usize, 20, 40, 80]
            .iter()
            .map(|&n| Ok(trace_distance(simulate_density_hamiltonian(&rho, &sigma, 1.0, n)?.matrix(), &exact)))
            .collect();
        match errs {
            Ok(errs) => {
                for w in errs.windows(2) {
                    let ratio = w[0] / w[1];
                    ck.worst("copies_ratio_min", ratio, false);
                    ck.worst("copies_ratio_max", ratio, true);
                    ck.require((1.4..=2.6).contains(&ratio), || format!("pair #{inst}: copies ratio {ratio:.3}"));
                }
            }
            Err(e) => ck.error(&format!("pair #{inst}"), e),
        }
    }
    ck.finish()
}

/// Well-conditioned Markowitz instance used by the end-to-end HHL check.
#[derive(Debug, Clone)]
pub struct MarkowitzInstance {
    pub r: DVector<f64>,
    pub pi: DVector<f64>,
    pub sigma: RMat,
    pub xi: f64,
    pub mu_grid: Vec<f64>,
    /// Largest `1/|λ_min(M̂)|` over the grid.
    pub condition: f64,
    /// Largest Gershgorin bound of `M̂` over the grid.
    pub gershgorin: f64,
}

/// Random unit-budget instance with `trΣ = 1`, returns in `[0.2, 1]` and a
/// five-point μ grid inside the return range; redrawn until every grid
/// point has condition number at most `max_condition`.
pub fn markowitz_instance(n: usize, rng: &mut ChaCha8Rng, max_condition: f64) -> Result<MarkowitzInstance> {
    loop {
        let mut sigma = random_spd(n, 0.5, rng);
        sigma /= sigma.trace();
        let r = DVector::from_fn(n, |_, _| rng.random_range(0.2..1.0));
        let pi = DVector::from_element(n, 1.0);
        let (lo, hi) = (r.min(), r.max());
        if hi - lo < 0.2 {
            continue;
        }
        let mu_grid: Vec<f64> = (0..5).map(|i| lo + (hi - lo) * (0.1 + 0.2 * i as f64)).collect();
        let mut condition: f64 = 0.0;
        let mut gershgorin: f64 = 0.0;
        for &mu in &mu_grid {
            let k = build_kkt(&r, &pi, &sigma, mu, 1.0, BudgetMode::Unit)?;
            let (values, _) = sym_eigen(k.m_hat());
            let lmin = values.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
            condition = condition.max(1.0 / lmin);
            gershgorin = gershgorin.max(gershgorin_bound(k.m_hat()));
        }
        if condition <= max_condition {
            return Ok(MarkowitzInstance {
                r,
                pi,
                sigma,
                xi: 1.0,
                mu_grid,
                condition,
                gershgorin,
            });
        }
    }
}

pub fn check_hhl_end_to_end(cfg: &VerifyConfig) -> CriterionReport {
    let mut ck = Check::new(7, "HHL end-to-end on Markowitz instances");
    let mut rng = rng_for(cfg, 7);
    for (inst, &n) in [2usize, 2, 2, 4, 4, 4].iter().enumerate() {
        let result = (|| -> Result<_> {
            let m = markowitz_instance(n, &mut rng, 10.0)?;
            let hhl = HHLConfig {
                t0: Some(0.95 * PI / m.gershgorin),
                ..HHLConfig::new(1.1 * m.condition, cfg.n_phase_bits)
            };
            let problem = FrontierProblem {
                r: &m.r,
                pi: &m.pi,
                sigma: &m.sigma,
                xi: m.xi,
                budget_mode: BudgetMode::Unit,
                balance_constraints: false,
            };
            frontier_quantum(&problem, &m.mu_grid, &hhl, 0, 0)
        })();
        match result {
            Ok(curve) => {
                ck.require(curve.omitted.is_empty(), || {
                    format!("instance #{inst}: {} grid points omitted", curve.omitted.len())
                });
                for p in &curve.points {
                    ck.worst("min_fidelity", p.fidelity, false);
                    ck.require(p.fidelity >= 0.99, || {
                        format!("instance #{inst} (N={n}) μ={:.3}: fidelity {:.4}", p.mu, p.fidelity)
                    });
                }
                let rel = curve.max_relative_error();
                ck.worst("max_relative_risk_error", rel, true);
                ck.require(rel <= 1e-2, || format!("instance #{inst} (N={n}): risk error {rel:.3e}"));
            }
            Err(e) => ck.error(&format!("instance #{inst}"), e),
        }
    }
    ck.finish()
}

/// KKT system with `Σ = 3I` and `R ⟂ Π`, whose normalized spectrum
/// `{4, −1, 5, −2}/6` gives eigenphases that are multiples of 1/16 at
/// `t₀ = 3π/4`.
pub fn representable_kkt(mu: f64, xi: f64) -> Result<(KKTSystem, f64)> {
    let phi: f64 = -0.5;
    let r = DVector::from_vec(vec![2.0 * phi.cos(), 2.0 * phi.sin()]);
    let pi = DVector::from_vec(vec![-(10f64.sqrt()) * phi.sin(), 10f64.sqrt() * phi.cos()]);
    let sigma = RMat::identity(2, 2) * 3.0;
    Ok((build_kkt(&r, &pi, &sigma, mu, xi, BudgetMode::Prices)?, 0.75 * PI))
}

pub fn check_kappa_truncation(cfg: &VerifyConfig) -> CriterionReport {
    let mut ck = Check::new(8, "κ-truncation consistency");
    let rhs_pairs = [(0.7, 1.3), (1.0, 0.4), (-0.5, 2.0)];
    // 1/κ between the eigenvalue magnitudes 1/6 and 1/3 drops one branch,
    // between 1/3 and 2/3 drops two.
    for (mu, xi) in rhs_pairs {
        for kappa in [4.0, 2.5] {
            let result = (|| -> Result<_> {
                let (k, t0) = representable_kkt(mu, xi)?;
                let hhl = HHLConfig {
                    t0: Some(t0),
                    ..HHLConfig::new(kappa, cfg.n_phase_bits)
                };
                hhl_solve(&k, &hhl)
            })();
            match result {
                Ok(res) => {
                    ck.worst("min_fidelity", res.fidelity_vs_oracle, false);
                    ck.require(res.fidelity_vs_oracle >= 0.99, || {
                        format!("(μ, ξ) = ({mu}, {xi}), κ = {kappa}: fidelity {:.4}", res.fidelity_vs_oracle)
                    });
                }
                Err(e) => ck.error(&format!("(μ, ξ) = ({mu}, {xi}), κ = {kappa}"), e),
            }
        }
    }
    let mut rng = rng_for(cfg, 8);
    for inst in 0..5 {
        let n = rng.random_range(2..=6usize);
        let sigma = random_spd(n, 0.05, &mut rng);
        let r = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let pi = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
        let eps: Result<Vec<f64>> = (|| {
            let k = build_kkt(&r, &pi, &sigma, 0.3, 1.0, BudgetMode::Prices)?;
            [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 1e6]
                .iter()
                .map(|&kappa| pseudo_inverse_kappa(k.m_hat(), k.rhs(), kappa).map(|(_, e)| e))
                .collect()
        })();
        match eps {
            Ok(eps) => {
                let monotone = eps.windows(2).all(|w| w[1] <= w[0] + 1e-12);
                ck.require(monotone, || format!("instance #{inst}: ε_κ not monotone: {eps:?}"));
                ck.worst("eps_at_large_kappa", *eps.last().unwrap_or(&0.0), true);
            }
            Err(e) => ck.error(&format!("instance #{inst}"), e),
        }
    }
    ck.finish()
}

pub fn check_readout(cfg: &VerifyConfig) -> CriterionReport {
    let mut ck = Check::new(9, "swap-test readout");
    let mut rng = rng_for(cfg, 9);
    for inst in 0..10 {
        let d = 1usize << rng.random_range(1..=3u32);
        let a = random_density(d, &mut rng);
        let b = random_density(d, &mut rng);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let result = (|| -> Result<(f64, f64)> {
            let want = (a.matrix() * b.matrix()).trace().re;
            let got = swap_test(Operand::Mixed(&a), Operand::Mixed(&b), 0, 0)?.overlap;
            let psi = QuantumState::from_real("q", &v)?;
            let pure = psi.to_density();
            let want_mixed = (pure.matrix() * a.matrix()).trace().re;
            let got_mixed = swap_test(Operand::Pure(&psi), Operand::Mixed(&a), 0, 0)?.overlap;
            Ok(((got - want).abs(), (got_mixed - want_mixed).abs()))
        })();
        match result {
            Ok((e1, e2)) => {
                let e = e1.max(e2);
                ck.worst("max_exact_error", e, true);
                ck.require(e <= 1e-12, || format!("pair #{inst}: exact-mode error {e:.2e}"));
            }
            Err(e) => ck.error(&format!("pair #{inst}"), e),
        }
    }
    let shots = [100u64, 1_000, 10_000, 100_000];
    let xs: Vec<f64> = shots.iter().map(|&s| s as f64).collect();
    let sigma = random_spd(4, 0.1, &mut rng);
    let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = rng.random::<u64>();
    let result = (|| -> Result<f64> {
        let rho = covariance_density_from_sigma(&sigma)?;
        let psi = QuantumState::from_real("asset", &w)?;
        let exact = swap_test(Operand::Pure(&psi), Operand::Mixed(&rho), 0, 0)?.overlap;
        let trials = 200u64;
        let errs: Vec<f64> = shots
            .iter()
            .map(|&s| {
                let mut sq = 0.0;
                for t in 0..trials {
                    let est = swap_test(Operand::Pure(&psi), Operand::Mixed(&rho), s, base.wrapping_add(s * trials + t))?;
                    sq += (est.overlap - exact).powi(2);
                }
                Ok((sq / trials as f64).sqrt())
            })
            .collect::<Result<_>>()?;
        Ok(loglog_slope(&xs, &errs))
    })();
    match result {
        Ok(slope) => {
            ck.metric("shot_noise_slope", slope);
            ck.require((slope + 0.5).abs() <= 0.1, || format!("shot-noise slope {slope:.3}"));
        }
        Err(e) => ck.error("shot scaling", e),
    }
    ck.finish()
}

/// Block-diagonal covariance whose first 4×4 block has a strictly positive
/// lowest eigenvector `w`; `w` then minimizes the risk of any unit vector
/// supported on the first four assets, which is where sampling lands.
pub fn sampling_oracle(n: usize, rng: &mut ChaCha8Rng) -> (RMat, DVector<f64>, DVector<f64>) {
    loop {
        let block = random_spd(4, 0.2, rng);
        let (values, vectors) = sym_eigen(&block);
        let j = (0..4).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
        let mut v = vectors.column(j).into_owned();
        if v.sum() < 0.0 {
            v = -v;
        }
        if v.min() < 0.15 {
            continue;
        }
        let mut sigma = RMat::zeros(n, n);
        sigma.view_mut((0, 0), (4, 4)).copy_from(&block);
        for i in 4..n {
            sigma[(i, i)] = rng.random_range(0.5..1.5);
        }
        let mut w = DVector::zeros(n);
        w.rows_mut(0, 4).copy_from(&v);
        let r = DVector::from_fn(n, |i, _| if i < 4 { rng.random_range(0.05..0.2) } else { rng.random_range(-0.2..0.2) });
        return (sigma, w, r);
    }
}

pub fn check_sampling(cfg: &VerifyConfig) -> CriterionReport {
    let mut ck = Check::new(10, "long/short sampling estimator");
    let mut rng = rng_for(cfg, 10);
    let ms = [100u64, 1_000, 10_000];
    let xs: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
    let trials = 100u64;
    for inst in 0..3 {
        let (sigma, w, r) = sampling_oracle(8, &mut rng);
        let base = rng.random::<u64>();
        let result = (|| -> Result<()> {
            let state = QuantumState::from_real("asset", w.as_slice())?;
            let target: f64 = w.iter().zip(r.iter()).map(|(a, b)| a.abs() * b.abs()).sum();
            let mut mean_excess = Vec::new();
            let mut mean_eps = Vec::new();
            let mut min_excess = f64::INFINITY;
            let mut z_at_max = Vec::new();
            for &m in &ms {
                let (mut ex, mut ep) = (0.0, 0.0);
                for t in 0..trials {
                    let res = sample_portfolio_with_sigma(&state, &r, &sigma, m, base.wrapping_add(m * trials + t))?;
                    let rep = sampling_error_report(&res, &w, &sigma)?;
                    let excess = res.excess_risk.unwrap_or(f64::NAN);
                    min_excess = min_excess.min(excess);
                    ex += excess;
                    ep += rep.epsilon_w;
                    if m == 10_000 {
                        z_at_max.push(res.est_return);
                    }
                }
                mean_excess.push(ex / trials as f64);
                mean_eps.push(ep / trials as f64);
            }
            ck.worst("min_excess_risk", min_excess, false);
            ck.require(min_excess >= -1e-10, || format!("oracle #{inst}: excess risk {min_excess:.2e}"));
            let eps_slope = loglog_slope(&xs, &mean_eps);
            ck.worst("eps_w_slope", eps_slope, true);
            ck.require((eps_slope + 0.5).abs() <= 0.15, || format!("oracle #{inst}: ε_w slope {eps_slope:.3}"));
            let risk_slope = loglog_slope(&xs, &mean_excess);
            ck.worst("excess_risk_slope", risk_slope, false);
            ck.require((risk_slope + 0.5).abs() <= 0.15, || {
                format!("oracle #{inst}: excess-risk slope {risk_slope:.3}")
            });
            let k = z_at_max.len() as f64;
            let mean = z_at_max.iter().sum::<f64>() / k;
            let var = z_at_max.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (k - 1.0);
            let sigma_mean = (var / k).sqrt();
            let dev = (mean - target).abs() / sigma_mean.max(1e-300);
            ck.worst("max_z_deviation_sigmas", dev, true);
            ck.require(dev <= 5.0, || format!("oracle #{inst}: E[Z] off by {dev:.2}σ"));
            Ok(())
        })();
        if let Err(e) = result {
            ck.error(&format!("oracle #{inst}"), e);
        }
    }
    ck.finish()
}

/// Serialized result of a small end-to-end run, used to compare reruns.
fn determinism_artifact(cfg: &VerifyConfig) -> Result<String> {
    let mut rng = rng_for(cfg, 11);
    let m = markowitz_instance(2, &mut rng, 10.0)?;
    let hhl = HHLConfig {
        t0: Some(0.95 * PI / m.gershgorin),
        ..HHLConfig::new(1.1 * m.condition, cfg.n_phase_bits.min(8))
    };
    let problem = FrontierProblem {
        r: &m.r,
        pi: &m.pi,
        sigma: &m.sigma,
        xi: m.xi,
        budget_mode: BudgetMode::Unit,
        balance_constraints: false,
    };
    let curve = frontier_quantum(&problem, &m.mu_grid, &hhl, 1000, cfg.seed)?;
    let k = build_kkt(&m.r, &m.pi, &m.sigma, m.mu_grid[2], m.xi, BudgetMode::Unit)?;
    let res = hhl_solve(&k, &hhl)?;
    let (w, _) = crate::hhl::extract_w(&res)?;
    let sample = crate::readout::sample_portfolio(&w, &m.r, 1000, cfg.seed)?;
    Ok(serde_json::to_string(&(curve, res.to_json(), sample))?)
}

pub fn check_determinism(cfg: &VerifyConfig) -> CriterionReport {
    let mut ck = Check::new(11, "determinism under a fixed seed");
    match (determinism_artifact(cfg), determinism_artifact(cfg)) {
        (Ok(a), Ok(b)) => {
            ck.metric("artifact_bytes", a.len() as f64);
            ck.require(a == b, || "reruns produced different artifacts".into());
        }
        (Err(e), _) | (_, Err(e)) => ck.error("artifact run", e),
    }
    ck.finish()
}

/// Every criterion in order.
pub fn run_all(cfg: &VerifyConfig) -> VerifyReport {
    let checks: [fn(&VerifyConfig) -> CriterionReport; 11] = [
        check_kkt_oracle,
        check_state_prep_identity,
        check_kp_preparation,
        check_star_simulation,
        check_trotter_order,
        check_density_exponentiation,
        check_hhl_end_to_end,
        check_kappa_truncation,
        check_readout,
        check_sampling,
        check_determinism,
    ];
    let criteria: Vec<CriterionReport> = checks.iter().map(|f| f(cfg)).collect();
    let all_passed = criteria.iter().all(|c| c.passed);
    VerifyReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        criteria,
        all_passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_is_orthogonal_to_constraints() {
        let r = DVector::from_vec(vec![1.0, 2.0, 0.5, -1.0]);
        let pi = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0]);
        let basis = constraint_null_space(&r, &pi);
        assert_eq!(basis.len(), 2);
        for v in &basis {
            assert!(v.dot(&r).abs() < 1e-12 && v.dot(&pi).abs() < 1e-12);
        }
        assert!(constraint_null_space(&r.rows(0, 2).into_owned(), &pi.rows(0, 2).into_owned()).is_empty());
    }

    #[test]
    fn sampling_oracle_minimizes_on_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (sigma, w, _) = sampling_oracle(8, &mut rng);
        let base = portfolio_risk(&w, &sigma).unwrap();
        for _ in 0..50 {
            let mut v = DVector::zeros(8);
            for i in 0..4 {
                v[i] = rng.random_range(0.0..1.0);
            }
            let v = v.normalize();
            assert!(portfolio_risk(&v, &sigma).unwrap() >= base - 1e-12);
        }
    }

    #[test]
    fn markowitz_instances_respect_condition_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = markowitz_instance(4, &mut rng, 10.0).unwrap();
        assert!(m.condition <= 10.0);
        assert!((m.sigma.trace() - 1.0).abs() < 1e-12);
        assert_eq!(m.mu_grid.len(), 5);
    }

    #[test]
    fn representable_toy_spectrum() {
        let (k, t0) = representable_kkt(0.7, 1.3).unwrap();
        let (mut values, _) = sym_eigen(k.m_hat());
        values.as_mut_slice().sort_by(f64::total_cmp);
        let want = [-2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0, 5.0 / 6.0];
        for (v, w) in values.iter().zip(want) {
            assert!((v - w).abs() < 1e-12);
            let phase = v * t0 / (2.0 * PI) * 16.0;
            assert!((phase - phase.round()).abs() < 1e-9);
        }
    }
}
