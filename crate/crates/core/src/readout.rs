//! Classical information from the solution state: swap-test overlaps and
//! risk, sector weights, portfolio comparison, and long/short sampling.
//!
//! Every estimator has an exact mode, selected with `shots = 0`, which returns
//! the analytic value with zero standard error.

use std::collections::BTreeMap;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hhl::{extract_w, hhl_solve, HHLConfig};
use crate::linalg::{c, op_norm_real, pow2_ceil, to_complex, CMat, RMat};
use crate::portfolio_qp::{build_kkt, portfolio_risk, solve_exact, BudgetMode, ConstraintScaling, OmittedPoint};
use crate::qsim::{sample_counts, DensityMatrix, QuantumState, RegisterLayout};

/// Either side of a swap test.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Pure(&'a QuantumState),
    Mixed(&'a DensityMatrix),
}

impl Operand<'_> {
    fn dim(&self) -> usize {
        match self {
            Operand::Pure(s) => s.amplitudes().len(),
            Operand::Mixed(r) => r.dim(),
        }
    }

    fn density(&self) -> CMat {
        match self {
            Operand::Pure(s) => s.to_density().into_matrix(),
            Operand::Mixed(r) => r.matrix().clone(),
        }
    }
}

impl<'a> From<&'a QuantumState> for Operand<'a> {
    fn from(s: &'a QuantumState) -> Self {
        Operand::Pure(s)
    }
}

impl<'a> From<&'a DensityMatrix> for Operand<'a> {
    fn from(r: &'a DensityMatrix) -> Self {
        Operand::Mixed(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapTestEstimate {
    /// Estimate of `F = tr(ρ_a ρ_b)`, clipped to `[0, 1]`.
    pub overlap: f64,
    /// Acceptance probability `(1 + F)/2` of the simulated circuit.
    pub acceptance_probability: f64,
    pub shots: u64,
    /// Standard error of `overlap` (zero in exact mode).
    pub std_error: f64,
}

fn swap_matrix(d: usize) -> CMat {
    let mut s = CMat::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            s[(i * d + j, j * d + i)] = Complex64::ONE;
        }
    }
    s
}

/// Acceptance probability of `H · controlled-SWAP · H` on `|0⟩⊗ρ_a⊗ρ_b`.
fn swap_circuit_acceptance(a: &Operand<'_>, b: &Operand<'_>) -> Result<f64> {
    let d = a.dim();
    let (_, bits) = pow2_ceil(d);
    if 1usize << bits != d {
        return Err(Error::Dimension(format!("swap test needs a power-of-two dimension, got {d}")));
    }
    let layout = RegisterLayout::new(&[("anc", 1), ("a", bits), ("b", bits)])?;
    let swap = swap_matrix(d);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let had = CMat::from_row_slice(2, 2, &[c(h), c(h), c(h), c(-h)]);
    let control = [crate::qsim::Control::Equals("anc", 1)];
    match (a, b) {
        (Operand::Pure(x), Operand::Pure(y)) => {
            let mut amps = vec![Complex64::ZERO; layout.dim()];
            for (i, ai) in x.amplitudes().iter().enumerate() {
                for (j, bj) in y.amplitudes().iter().enumerate() {
                    amps[i * d + j] = ai * bj;
                }
            }
            let mut s = QuantumState::from_amplitudes(layout, amps)?;
            s.apply_unitary(&had, &["anc"])?;
            s.apply_controlled_unitary(&swap, &["a", "b"], &control)?;
            s.apply_unitary(&had, &["anc"])?;
            Ok(s.probabilities("anc")?[0])
        }
        _ => {
            let joint = a.density().kronecker(&b.density());
            let mut full = CMat::zeros(2 * d * d, 2 * d * d);
            full.view_mut((0, 0), (d * d, d * d)).copy_from(&joint);
            let mut rho = DensityMatrix::with_layout(full, layout)?;
            rho.apply_controlled_unitary(&had, &["anc"], &[])?;
            rho.apply_controlled_unitary(&swap, &["a", "b"], &control)?;
            rho.apply_controlled_unitary(&had, &["anc"], &[])?;
            let (_, p) = rho.postselect("anc", 0)?;
            Ok(p)
        }
    }
}

/// Simulated swap test. `shots = 0` returns the analytic `tr(ρ_a ρ_b)`.
pub fn swap_test(a: Operand<'_>, b: Operand<'_>, shots: u64, seed: u64) -> Result<SwapTestEstimate> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "swap test operands have dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    if shots == 0 {
        let f = match (&a, &b) {
            (Operand::Pure(x), Operand::Pure(y)) => x.inner(y)?.norm_sqr(),
            _ => (a.density() * b.density()).trace().re,
        };
        return Ok(SwapTestEstimate {
            overlap: f.clamp(0.0, 1.0),
            acceptance_probability: (1.0 + f) / 2.0,
            shots: 0,
            std_error: 0.0,
        });
    }
    let p = swap_circuit_acceptance(&a, &b)?.clamp(0.0, 1.0);
    let counts = sample_counts(&[p, 1.0 - p], shots, seed)?;
    let p_hat = *counts.get(&0).unwrap_or(&0) as f64 / shots as f64;
    Ok(SwapTestEstimate {
        overlap: (2.0 * p_hat - 1.0).clamp(0.0, 1.0),
        acceptance_probability: p,
        shots,
        std_error: 2.0 * (p_hat * (1.0 - p_hat) / shots as f64).sqrt(),
    })
}

/// `Σ/trΣ` zero-padded to a power-of-two asset register.
pub fn covariance_density_from_sigma(sigma: &RMat) -> Result<DensityMatrix> {
    let n = sigma.nrows();
    let tr = sigma.trace();
    if !(tr > 0.0) {
        return Err(Error::InvalidArgument("tr Σ must be positive".into()));
    }
    let (dim, bits) = pow2_ceil(n);
    let mut m = CMat::zeros(dim, dim);
    m.view_mut((0, 0), (n, n)).copy_from(&to_complex(&(sigma / tr)));
    DensityMatrix::with_layout(m, RegisterLayout::new(&[("asset", bits)])?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    /// Estimate of `⟨w|Σ|w⟩` for the normalized `|w⟩`.
    pub risk: f64,
    pub std_error: f64,
    pub shots: u64,
}

/// `trΣ · tr(|w⟩⟨w| ρ)`, the risk of the normalized state. The risk of the
/// unnormalized portfolio is this times `‖w‖²`, which the HHL chain supplies
/// as `physical_scale² · P_asset`.
pub fn risk_estimate(
    w_state: &QuantumState,
    rho_sigma: &DensityMatrix,
    trace_sigma: f64,
    shots: u64,
    seed: u64,
) -> Result<RiskEstimate> {
    let est = swap_test(Operand::Pure(w_state), Operand::Mixed(rho_sigma), shots, seed)?;
    Ok(RiskEstimate {
        risk: trace_sigma * est.overlap,
        std_error: trace_sigma * est.std_error,
        shots,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorEstimate {
    pub weight: f64,
    pub std_error: f64,
}

/// Probability mass of `|w⟩` on a subset of assets.
pub fn sector_weight(w_state: &QuantumState, sector_mask: &[usize], shots: u64, seed: u64) -> Result<SectorEstimate> {
    if sector_mask.is_empty() {
        return Err(Error::InvalidArgument("sector mask is empty".into()));
    }
    let amps = w_state.amplitudes();
    if let Some(bad) = sector_mask.iter().find(|&&j| j >= amps.len()) {
        return Err(Error::InvalidArgument(format!("asset {bad} outside the register")));
    }
    let mut seen = vec![false; amps.len()];
    let mut weight = 0.0;
    for &j in sector_mask {
        if !std::mem::replace(&mut seen[j], true) {
            weight += amps[j].norm_sqr();
        }
    }
    if shots == 0 {
        return Ok(SectorEstimate { weight, std_error: 0.0 });
    }
    let p = weight.clamp(0.0, 1.0);
    let counts = sample_counts(&[p, 1.0 - p], shots, seed)?;
    let p_hat = *counts.get(&0).unwrap_or(&0) as f64 / shots as f64;
    Ok(SectorEstimate {
        weight: p_hat,
        std_error: (p_hat * (1.0 - p_hat) / shots as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub overlap: f64,
    pub std_error: f64,
    pub accept: bool,
}

/// Accept `candidate` when its estimated overlap with `w_state` reaches `threshold`.
pub fn compare_portfolio(
    w_state: &QuantumState,
    candidate: &QuantumState,
    shots: u64,
    seed: u64,
    threshold: f64,
) -> Result<Comparison> {
    let est = swap_test(Operand::Pure(w_state), Operand::Pure(candidate), shots, seed)?;
    Ok(Comparison {
        overlap: est.overlap,
        std_error: est.std_error,
        accept: est.overlap >= threshold,
    })
}

/// Outcome of measuring `|w⟩` in the computational basis `M` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingResult {
    pub counts: BTreeMap<usize, u64>,
    pub total: u64,
    /// `sgn(R_j)·√(M_j/M)`, with sign `+` where `R_j = 0`.
    pub w_prime: Vec<f64>,
    /// Mean of `Z = R_j/w′_j` over the samples.
    pub est_return: f64,
    /// Mean of `Z²`.
    pub est_return_second_moment: f64,
    /// `√(p̂_j(1−p̂_j)/M)` with `p̂_j = M_j/M`.
    pub sigma_j: Vec<f64>,
    /// Samples that landed on an index with `R_j = 0`.
    pub dropped: u64,
    pub support_size: usize,
    /// `w′ᵀΣw′ − wᵀΣw` against the sampled state; only filled when a
    /// covariance is supplied.
    pub excess_risk: Option<f64>,
}

/// Long/short sampling estimator: recover magnitudes from counts and signs
/// from the expected returns.
pub fn sample_portfolio(w_state: &QuantumState, r_vector: &DVector<f64>, m_samples: u64, seed: u64) -> Result<SamplingResult> {
    if m_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let n = r_vector.len();
    let amps = w_state.amplitudes();
    if amps.len() < n {
        return Err(Error::Dimension(format!(
            "state of dimension {} for {n} returns",
            amps.len()
        )));
    }
    if amps[n..].iter().any(|a| a.norm_sqr() > 1e-12) {
        return Err(Error::InvalidArgument("state has weight outside the asset range".into()));
    }
    let probs: Vec<f64> = amps[..n].iter().map(|a| a.norm_sqr()).collect();
    let counts = sample_counts(&probs, m_samples, seed)?;
    let m = m_samples as f64;
    let mut w_prime = vec![0.0; n];
    let mut sigma_j = vec![0.0; n];
    let mut est_return = 0.0;
    let mut second = 0.0;
    let mut dropped = 0;
    for (&j, &mj) in &counts {
        let p_hat = mj as f64 / m;
        let sign = if r_vector[j] < 0.0 { -1.0 } else { 1.0 };
        w_prime[j] = sign * p_hat.sqrt();
        sigma_j[j] = (p_hat * (1.0 - p_hat) / m).sqrt();
        if r_vector[j] == 0.0 {
            dropped += mj;
            continue;
        }
        let z = r_vector[j] / w_prime[j];
        est_return += p_hat * z;
        second += p_hat * z * z;
    }
    Ok(SamplingResult {
        support_size: counts.len(),
        counts,
        total: m_samples,
        w_prime,
        est_return,
        est_return_second_moment: second,
        sigma_j,
        dropped,
        excess_risk: None,
    })
}

/// [`sample_portfolio`] plus the excess risk against the sampled state.
pub fn sample_portfolio_with_sigma(
    w_state: &QuantumState,
    r_vector: &DVector<f64>,
    sigma: &RMat,
    m_samples: u64,
    seed: u64,
) -> Result<SamplingResult> {
    let mut result = sample_portfolio(w_state, r_vector, m_samples, seed)?;
    let n = r_vector.len();
    let w = real_part(w_state, n);
    let wp = DVector::from_column_slice(&result.w_prime);
    result.excess_risk = Some(portfolio_risk(&wp, sigma)? - portfolio_risk(&w, sigma)?);
    Ok(result)
}

fn real_part(state: &QuantumState, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, state.amplitudes()[..n].iter().map(|a| a.re))
}

/// Indices where the sign of the oracle weight disagrees with the sign of
/// the expected return, i.e. where the long/short assumption fails.
pub fn long_short_violations(w: &DVector<f64>, r: &DVector<f64>) -> Vec<usize> {
    w.iter()
        .zip(r.iter())
        .enumerate()
        .filter(|(_, (wj, rj))| **wj != 0.0 && wj.signum() != rj.signum())
        .map(|(j, _)| j)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    /// `‖ŵ − w′‖₂` with `ŵ` the normalized oracle portfolio.
    pub epsilon_w: f64,
    pub risk_difference: f64,
    /// `2‖Σ‖₂ ε_w`.
    pub risk_bound: f64,
    pub bound_holds: bool,
    pub sigma_j: Vec<f64>,
    pub support_size: usize,
    pub long_short_violations: Vec<usize>,
}

/// Compare a sampling run with the oracle portfolio.
pub fn sampling_error_report(result: &SamplingResult, oracle_w: &DVector<f64>, sigma: &RMat) -> Result<SamplingReport> {
    let norm = oracle_w.norm();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("oracle portfolio is zero".into()));
    }
    let w = oracle_w / norm;
    let wp = DVector::from_column_slice(&result.w_prime);
    if wp.len() != w.len() {
        return Err(Error::Dimension("sampled and oracle portfolios differ in length".into()));
    }
    let epsilon_w = (&w - &wp).norm();
    let risk_difference = (portfolio_risk(&wp, sigma)? - portfolio_risk(&w, sigma)?).abs();
    let risk_bound = 2.0 * op_norm_real(sigma) * epsilon_w;
    let rvec = DVector::from_iterator(w.len(), result.w_prime.iter().map(|x| if *x < 0.0 { -1.0 } else { 1.0 }));
    Ok(SamplingReport {
        epsilon_w,
        risk_difference,
        risk_bound,
        bound_holds: risk_difference <= risk_bound + 1e-10,
        sigma_j: result.sigma_j.clone(),
        support_size: result.support_size,
        long_short_violations: long_short_violations(&w, &rvec)
            .into_iter()
            .filter(|j| result.counts.contains_key(j))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumFrontierPoint {
    pub mu: f64,
    pub risk_classical: f64,
    pub risk_quantum: f64,
    /// `|⟨ŵ_quantum|ŵ_classical⟩|²` for the asset block.
    pub fidelity: f64,
    /// HHL solution fidelity against the κ-truncated pseudo-inverse.
    pub hhl_fidelity: f64,
    pub p_w: f64,
    pub epsilon_kappa: f64,
    pub risk_std_error: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantumFrontier {
    pub points: Vec<QuantumFrontierPoint>,
    pub omitted: Vec<OmittedPoint>,
}

impl QuantumFrontier {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mu,risk_classical,risk_quantum,fidelity\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{}\n", p.mu, p.risk_classical, p.risk_quantum, p.fidelity));
        }
        out
    }

    /// Largest `|risk_quantum − risk_classical| / risk_classical`.
    pub fn max_relative_error(&self) -> f64 {
        self.points
            .iter()
            .map(|p| (p.risk_quantum - p.risk_classical).abs() / p.risk_classical.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

/// Inputs shared by every point of a quantum frontier sweep.
#[derive(Debug, Clone)]
pub struct FrontierProblem<'a> {
    pub r: &'a DVector<f64>,
    pub pi: &'a DVector<f64>,
    pub sigma: &'a RMat,
    pub xi: f64,
    pub budget_mode: BudgetMode,
    /// Solve the row-balanced system (see [`ConstraintScaling`]); the
    /// reported μ and the classical reference stay in original units.
    pub balance_constraints: bool,
}

/// One HHL solve and swap-test risk readout per grid point. The risk of the
/// unnormalized portfolio is `trΣ·F·physical_scale²·P_asset`; point `i` uses
/// seed `seed + i`.
pub fn frontier_quantum(
    problem: &FrontierProblem<'_>,
    mu_grid: &[f64],
    cfg: &HHLConfig,
    shots: u64,
    seed: u64,
) -> Result<QuantumFrontier> {
    if mu_grid.is_empty() {
        return Err(Error::InvalidArgument("empty μ grid".into()));
    }
    let rho = covariance_density_from_sigma(problem.sigma)?;
    let trace = problem.sigma.trace();
    let scaling = if problem.balance_constraints {
        ConstraintScaling::balanced(problem.r, problem.pi, problem.sigma, problem.budget_mode)
    } else {
        ConstraintScaling::IDENTITY
    };
    let results: Vec<(f64, Result<QuantumFrontierPoint>)> = mu_grid
        .par_iter()
        .enumerate()
        .map(|(i, &mu)| {
            let point = (|| {
                let k = build_kkt(problem.r, problem.pi, problem.sigma, mu, problem.xi, problem.budget_mode)?;
                let classical = solve_exact(&k)?;
                let scaled = scaling.build_kkt(problem.r, problem.pi, problem.sigma, mu, problem.xi, problem.budget_mode)?;
                let res = hhl_solve(&scaled, cfg)?;
                let (w_state, p_asset) = extract_w(&res)?;
                let risk = risk_estimate(&w_state, &rho, trace, shots, seed.wrapping_add(i as u64))?;
                let norm2 = res.physical_scale.powi(2) * p_asset;
                let w_cl = classical.weights_vector();
                let overlap: f64 = w_state
                    .amplitudes()
                    .iter()
                    .zip(w_cl.iter())
                    .map(|(a, x)| a.re * x)
                    .sum::<f64>()
                    / w_cl.norm().max(f64::MIN_POSITIVE);
                Ok(QuantumFrontierPoint {
                    mu,
                    risk_classical: classical.risk,
                    risk_quantum: risk.risk * norm2,
                    fidelity: overlap * overlap,
                    hhl_fidelity: res.fidelity_vs_oracle,
                    p_w: res.p_w,
                    epsilon_kappa: res.epsilon_kappa,
                    risk_std_error: risk.std_error * norm2,
                    warnings: res.warnings.clone(),
                })
            })();
            (mu, point)
        })
        .collect();
    let mut out = QuantumFrontier::default();
    for (mu, r) in results {
        match r {
            Ok(p) => out.points.push(p),
            Err(e) => {
                log::warn!("quantum frontier point μ = {mu} omitted: {e}");
                out.omitted.push(OmittedPoint {
                    mu,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::loglog_slope;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(v: &[f64]) -> QuantumState {
        QuantumState::from_real("asset", v).unwrap()
    }

    fn random_state(n: usize, rng: &mut ChaCha8Rng) -> QuantumState {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        state(&v)
    }

    fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> RMat {
        let a = RMat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose()
    }

    #[test]
    fn swap_test_pure_examples() {
        let a = state(&[0.6, 0.8]);
        let est = swap_test((&a).into(), (&a).into(), 0, 0).unwrap();
        assert!((est.overlap - 1.0).abs() < 1e-12 && (est.acceptance_probability - 1.0).abs() < 1e-12);
        assert!((swap_circuit_acceptance(&(&a).into(), &(&a).into()).unwrap() - 1.0).abs() < 1e-12);
        let b = state(&[0.8, -0.6]);
        let est = swap_test((&a).into(), (&b).into(), 0, 0).unwrap();
        assert!(est.overlap.abs() < 1e-12 && (est.acceptance_probability - 0.5).abs() < 1e-12);
        assert!((swap_circuit_acceptance(&(&a).into(), &(&b).into()).unwrap() - 0.5).abs() < 1e-12);
        let c3 = state(&[1.0, 0.0, 0.0]);
        assert!(swap_test((&a).into(), (&c3).into(), 0, 0).is_err());
    }

    #[test]
    fn swap_circuit_matches_analytic_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_state(4, &mut rng);
        let sigma = random_psd(4, &mut rng);
        let rho = covariance_density_from_sigma(&sigma).unwrap();
        let exact = swap_test((&a).into(), (&rho).into(), 0, 0).unwrap();
        let p = swap_circuit_acceptance(&(&a).into(), &(&rho).into()).unwrap();
        assert!((2.0 * p - 1.0 - exact.overlap).abs() < 1e-12);
        let w = real_part(&a, 4);
        let quad = portfolio_risk(&w, &sigma).unwrap() / sigma.trace();
        assert!((exact.overlap - quad).abs() < 1e-10);
    }

    #[test]
    fn shot_noise_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_state(2, &mut rng);
        let b = random_state(2, &mut rng);
        let exact = swap_test((&a).into(), (&b).into(), 0, 0).unwrap().overlap;
        let shots = [100u64, 1000, 10_000, 100_000];
        let errs: Vec<f64> = shots
            .iter()
            .map(|&s| {
                let sq: f64 = (0..200)
                    .map(|t| (swap_test((&a).into(), (&b).into(), s, t).unwrap().overlap - exact).powi(2))
                    .sum();
                (sq / 200.0).sqrt()
            })
            .collect();
        let xs: Vec<f64> = shots.iter().map(|&s| s as f64).collect();
        let slope = loglog_slope(&xs, &errs);
        assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
    }

    #[test]
    fn risk_examples() {
        let w = state(&[0.6, 0.8]);
        let wv = DVector::from_vec(vec![0.6, 0.8]);
        let tr = 3.0;
        let sigma = &wv * wv.transpose() * tr;
        let rho = covariance_density_from_sigma(&sigma).unwrap();
        let r = risk_estimate(&w, &rho, tr, 0, 0).unwrap();
        assert!((r.risk - tr).abs() < 1e-12);
        let orth = state(&[0.8, -0.6]);
        assert!(risk_estimate(&orth, &rho, tr, 0, 0).unwrap().risk.abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sigma = random_psd(3, &mut rng);
        let v = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let ws = state(v.as_slice());
        let rho = covariance_density_from_sigma(&sigma).unwrap();
        let est = risk_estimate(&ws, &rho, sigma.trace(), 0, 0).unwrap();
        let want = portfolio_risk(&v, &sigma).unwrap() / v.norm_squared();
        assert!((est.risk - want).abs() < 1e-9);
    }

    #[test]
    fn sector_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_state(8, &mut rng);
        assert!((sector_weight(&w, &(0..8).collect::<Vec<_>>(), 0, 0).unwrap().weight - 1.0).abs() < 1e-12);
        let sparse = state(&[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(sector_weight(&sparse, &[2, 3], 0, 0).unwrap().weight, 0.0);
        let mask = [1usize, 4, 6];
        let direct: f64 = mask.iter().map(|&j| w.amplitudes()[j].norm_sqr()).sum();
        assert!((sector_weight(&w, &mask, 0, 0).unwrap().weight - direct).abs() < 1e-12);
        let rest = [0usize, 2, 3, 5, 7];
        let total = sector_weight(&w, &mask, 0, 0).unwrap().weight + sector_weight(&w, &rest, 0, 0).unwrap().weight;
        assert!((total - 1.0).abs() < 1e-12);
        assert!(sector_weight(&w, &[], 0, 0).is_err());
        let est = sector_weight(&w, &mask, 20_000, 3).unwrap();
        assert!((est.weight - direct).abs() < 5.0 * est.std_error.max(1e-3));
    }

    #[test]
    fn comparisons() {
        let a = state(&[0.6, 0.8]);
        assert!(compare_portfolio(&a, &a, 0, 0, 1.0).unwrap().accept);
        let b = state(&[0.8, -0.6]);
        assert!(!compare_portfolio(&a, &b, 0, 0, 0.5).unwrap().accept);
        let nearby = state(&[0.64, 0.77]);
        let analytic = a.inner(&nearby).unwrap().norm_sqr();
        let est = compare_portfolio(&a, &nearby, 50_000, 9, 0.9).unwrap();
        assert!((est.overlap - analytic).abs() <= 5.0 * est.std_error.max(1e-3));
    }

    #[test]
    fn sampling_basis_state() {
        let w = state(&[0.0, 0.0, 1.0, 0.0]);
        let r = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.4]);
        let sigma = RMat::identity(4, 4);
        let res = sample_portfolio_with_sigma(&w, &r, &sigma, 1000, 1).unwrap();
        assert_eq!(res.w_prime, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(res.excess_risk.unwrap().abs() < 1e-15);
        assert!((res.est_return - 0.3).abs() < 1e-15);
        assert_eq!(res.support_size, 1);
    }

    #[test]
    fn sampling_invariants_and_dropped() {
        let w = state(&[0.5, -0.5, 0.5, 0.5]);
        let r = DVector::from_vec(vec![0.1, -0.2, 0.0, 0.4]);
        let res = sample_portfolio(&w, &r, 5000, 2).unwrap();
        let norm2: f64 = res.w_prime.iter().map(|x| x * x).sum();
        assert!((norm2 - 1.0).abs() < 1e-12);
        for &j in res.counts.keys() {
            if r[j] != 0.0 {
                assert_eq!(res.w_prime[j].signum(), r[j].signum());
            }
        }
        assert_eq!(res.dropped, res.counts[&2]);
    }

    #[test]
    fn long_short_violation_detected() {
        let wv = DVector::from_vec(vec![0.6, -0.8]);
        let r = DVector::from_vec(vec![0.1, 0.2]);
        let res = sample_portfolio(&state(wv.as_slice()), &r, 10_000, 3).unwrap();
        assert!(res.w_prime[1] > 0.0);
        let report = sampling_error_report(&res, &wv, &RMat::identity(2, 2)).unwrap();
        assert!(report.epsilon_w > 1.5);
        assert_eq!(long_short_violations(&wv, &r), vec![1]);
    }

    #[test]
    fn error_report_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sigma = random_psd(4, &mut rng);
        let w = DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        let exact = SamplingResult {
            counts: BTreeMap::new(),
            total: 1,
            w_prime: w.iter().copied().collect(),
            est_return: 0.0,
            est_return_second_moment: 0.0,
            sigma_j: vec![0.0; 4],
            dropped: 0,
            support_size: 4,
            excess_risk: None,
        };
        let rep = sampling_error_report(&exact, &w, &sigma).unwrap();
        assert_eq!(rep.epsilon_w, 0.0);
        assert!(rep.bound_holds);
        for trial in 0..20 {
            let delta: DVector<f64> = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let eps = 0.01 * (trial + 1) as f64;
            let perturbed: DVector<f64> = &w + &delta * (eps / delta.norm());
            let fake = SamplingResult {
                w_prime: perturbed.iter().copied().collect(),
                ..exact.clone()
            };
            let rep = sampling_error_report(&fake, &w, &sigma).unwrap();
            assert!((rep.epsilon_w - eps).abs() < 1e-12);
            assert!(rep.bound_holds, "trial {trial}");
        }
    }

    #[test]
    fn epsilon_w_decays_like_inverse_sqrt() {
        // evenly spread support of size 4, all returns positive
        let w = state(&[0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let oracle = DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let r = DVector::from_element(8, 0.1);
        let sigma = RMat::identity(8, 8);
        let ms = [100u64, 1000, 10_000];
        let eps: Vec<f64> = ms
            .iter()
            .map(|&m| {
                (0..100)
                    .map(|t| {
                        let res = sample_portfolio(&w, &r, m, 1000 + t).unwrap();
                        sampling_error_report(&res, &oracle, &sigma).unwrap().epsilon_w
                    })
                    .sum::<f64>()
                    / 100.0
            })
            .collect();
        let xs: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
        let slope = loglog_slope(&xs, &eps);
        assert!((slope + 0.5).abs() <= 0.15, "slope {slope}");
        let res = sample_portfolio(&w, &r, 100_000, 7).unwrap();
        assert!(sampling_error_report(&res, &oracle, &sigma).unwrap().epsilon_w < 0.02);
    }

    #[test]
    fn quantum_frontier_small() {
        let r = DVector::from_vec(vec![0.3, 0.9]);
        let pi = DVector::from_vec(vec![1.0, 1.0]);
        let sigma = RMat::from_diagonal(&DVector::from_vec(vec![0.4, 0.6]));
        let problem = FrontierProblem {
            r: &r,
            pi: &pi,
            sigma: &sigma,
            xi: 1.0,
            budget_mode: BudgetMode::Unit,
            balance_constraints: false,
        };
        let k = build_kkt(&r, &pi, &sigma, 0.6, 1.0, BudgetMode::Unit).unwrap();
        let lmin = crate::linalg::sym_eigen(k.m_hat()).0.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        let mut cfg = HHLConfig::new(1.1 / lmin, 10);
        cfg.t0 = Some(0.95 * std::f64::consts::PI / crate::linalg::gershgorin_bound(k.m_hat()));
        let curve = frontier_quantum(&problem, &[0.6], &cfg, 0, 0).unwrap();
        assert_eq!(curve.points.len(), 1);
        assert!(curve.max_relative_error() < 1e-2, "{:?}", curve.points);
        assert!(curve.to_csv().starts_with("mu,risk_classical,risk_quantum,fidelity\n"));

        // identical returns make every μ ≠ ξ·R infeasible
        let flat = DVector::from_vec(vec![1.0, 1.0]);
        let problem = FrontierProblem { r: &flat, ..problem };
        let curve = frontier_quantum(&problem, &[2.0], &cfg, 0, 0).unwrap();
        assert!(curve.points.is_empty());
        assert_eq!(curve.omitted.len(), 1);
    }
}
