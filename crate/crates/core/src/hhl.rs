//! HHL pseudo-inversion of `M̂` with a hard `|λ| ≥ 1/κ` eigenvalue filter.
//!
//! Phase estimation writes `θ = λ·t₀/2π` into an `n`-bit register, read in
//! two's complement over `[−1/2, 1/2)` so that the negative eigenvalues of
//! the indefinite KKT matrix decode correctly. Branches with `|λ̃| ≥ 1/κ`
//! rotate an ancilla by `C/λ̃`; the phase register is then uncomputed and the
//! ancilla post-selected on `|1⟩`.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian_sim::{controlled_swap_block, ControlledEvolution, EvolutionMethod, HamiltonianParts};
use crate::linalg::{c, gershgorin_bound, pow2_ceil, sym_eigen, CMat, RMat};
use crate::portfolio_qp::{pseudo_inverse_kappa, KKTSystem, PINV_REL_CUTOFF};
use crate::qsim::{pad_unitary, DensityMatrix, QuantumState};

pub const MIN_PHASE_BITS: usize = 3;
pub const MAX_PHASE_BITS: usize = 12;
/// The density-matrix backend scales as `4^bits`; beyond this it is impractical.
pub const MAX_DENSITY_PHASE_BITS: usize = 6;

const PHASE: &str = "phase";
const ANCILLA: &str = "anc";
const SYSTEM: &str = "sys";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HHLConfig {
    pub kappa: f64,
    /// Rotation scale `C`; must not exceed `1/κ`.
    pub c_constant: f64,
    pub n_phase_bits: usize,
    pub backend: EvolutionMethod,
    /// Base evolution time; `None` picks `π/(2·Gershgorin(M̂))`.
    pub t0: Option<f64>,
    /// Product-formula steps per `t₀` (trotter backend).
    pub trotter_steps: usize,
    /// Partial-swap copies per `t₀` (density_exp backend).
    pub density_copies: usize,
    pub seed: u64,
}

impl HHLConfig {
    /// Exact backend with `C = 1/(2κ)`.
    pub fn new(kappa: f64, n_phase_bits: usize) -> Self {
        Self {
            kappa,
            c_constant: 1.0 / (2.0 * kappa),
            n_phase_bits,
            backend: EvolutionMethod::Exact,
            t0: None,
            trotter_steps: 32,
            density_copies: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::InvalidArgument(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.c_constant > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "C must be positive, got {}",
                self.c_constant
            )));
        }
        if self.c_constant > 1.0 / self.kappa + 1e-12 {
            return Err(Error::InversionOverflow(self.c_constant * self.kappa));
        }
        if !(MIN_PHASE_BITS..=MAX_PHASE_BITS).contains(&self.n_phase_bits) {
            return Err(Error::InvalidArgument(format!(
                "n_phase_bits must lie in [{MIN_PHASE_BITS}, {MAX_PHASE_BITS}], got {}",
                self.n_phase_bits
            )));
        }
        if self.backend == EvolutionMethod::DensityExp && self.n_phase_bits > MAX_DENSITY_PHASE_BITS {
            return Err(Error::InvalidArgument(format!(
                "density_exp backend supports at most {MAX_DENSITY_PHASE_BITS} phase bits"
            )));
        }
        if let Some(t0) = self.t0 {
            if !(t0 > 0.0) {
                return Err(Error::InvalidArgument(format!("t0 must be positive, got {t0}")));
            }
        }
        if self.trotter_steps == 0 || self.density_copies == 0 {
            return Err(Error::InvalidArgument("step counts must be positive".into()));
        }
        Ok(())
    }
}

pub fn default_t0(m_hat: &RMat) -> f64 {
    let g = gershgorin_bound(m_hat);
    if g > 0.0 {
        PI / (2.0 * g)
    } else {
        1.0
    }
}

/// `(μ|0⟩ + ξ|1⟩)/√(μ²+ξ²)` on a system register of `dim` levels (padded).
pub fn prepare_rhs(mu: f64, xi: f64, dim: usize) -> Result<QuantumState> {
    if dim < 2 {
        return Err(Error::Dimension("right-hand side needs at least two levels".into()));
    }
    let mut v = vec![0.0; dim];
    v[0] = mu;
    v[1] = xi;
    QuantumState::from_real(SYSTEM, &v)
        .map_err(|_| Error::InvalidArgument("(μ, ξ) must not both be zero".into()))
}

/// Two's-complement phase `θ ∈ [−1/2, 1/2)` of register value `x`.
pub fn decode_phase(x: usize, n_bits: usize) -> f64 {
    let d = (1usize << n_bits) as f64;
    let theta = x as f64 / d;
    if theta >= 0.5 {
        theta - 1.0
    } else {
        theta
    }
}

/// Eigenvalue estimate `λ̃ = 2πθ/t₀` of register value `x`.
pub fn phase_to_eigenvalue(x: usize, n_bits: usize, t0: f64) -> f64 {
    2.0 * PI * decode_phase(x, n_bits) / t0
}

/// `|0⟩_phase|b⟩ → Σ_j β_j |λ̃_j⟩|u_j⟩`; the input must be a single-register state.
pub fn phase_estimation(evolution: &ControlledEvolution, rhs: &QuantumState, n_phase_bits: usize) -> Result<QuantumState> {
    let target = single_register(rhs)?;
    if n_phase_bits != evolution.n_bits() {
        return Err(Error::Dimension(format!(
            "{n_phase_bits} phase bits requested, evolution provides {}",
            evolution.n_bits()
        )));
    }
    let mut state = rhs.with_leading_register(PHASE, n_phase_bits)?;
    state.hadamard_all(PHASE)?;
    evolution.apply(&mut state, PHASE, &target, false)?;
    state.qft(PHASE, false)?;
    Ok(state)
}

fn single_register(s: &QuantumState) -> Result<String> {
    match s.layout().registers() {
        [only] => Ok(only.name.clone()),
        _ => Err(Error::InvalidArgument("expected a single-register system state".into())),
    }
}

fn inverse_phase_estimation(evolution: &ControlledEvolution, state: &mut QuantumState, target: &str) -> Result<()> {
    state.qft(PHASE, true)?;
    evolution.apply(state, PHASE, target, true)?;
    state.hadamard_all(PHASE)
}

/// `C/λ̃` when the estimate survives the filter, 0 otherwise.
fn inversion_table(n_bits: usize, t0: f64, kappa: f64) -> Vec<f64> {
    (0..1usize << n_bits)
        .map(|x| {
            let lambda = phase_to_eigenvalue(x, n_bits, t0);
            if lambda != 0.0 && lambda.abs() >= 1.0 / kappa {
                1.0 / lambda
            } else {
                0.0
            }
        })
        .collect()
}

/// Attach an ancilla and rotate it to `C/λ̃` on `|1⟩` in every retained
/// phase branch.
pub fn eigenvalue_inversion(pe_state: &QuantumState, kappa: f64, c_constant: f64, t0: f64) -> Result<QuantumState> {
    let (_, n_bits) = pe_state.layout().locate(PHASE)?;
    let table = inversion_table(n_bits, t0, kappa);
    let probs = pe_state.probabilities(PHASE)?;
    for (inv, p) in table.iter().zip(&probs) {
        let amp = (c_constant * inv).abs();
        if *p > 1e-14 && amp > 1.0 + 1e-12 {
            return Err(Error::InversionOverflow(amp));
        }
    }
    let mut state = pe_state.with_leading_register(ANCILLA, 1)?;
    state.controlled_amplitude_rotation(PHASE, |x| table[x], ANCILLA, c_constant, &[])?;
    Ok(state)
}

/// Eigenpair of `M̂` with the overlap `β_j = ⟨u_j|b̂⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralComponent {
    pub lambda: f64,
    pub beta: f64,
    pub retained: bool,
}

#[derive(Debug, Clone)]
pub struct HHLResult {
    /// Post-selected solution on the padded system register.
    pub solution_state: QuantumState,
    /// Unpadded system dimension.
    pub dim: usize,
    pub p_w: f64,
    /// `C²Σ_retained |β_j/λ_j|²`.
    pub p_w_analytic: f64,
    /// Probability that the uncomputed phase register returned to `|0⟩`.
    pub phase_return_probability: f64,
    pub rescale: f64,
    pub physical_scale: f64,
    pub spectrum: Vec<SpectralComponent>,
    pub epsilon_kappa: f64,
    pub fidelity_vs_oracle: f64,
    /// Purity of the post-selected state (1 for pure-state backends).
    pub solution_purity: f64,
    pub evolution_error_bound: f64,
    pub trace_m: f64,
    pub rhs_norm: f64,
    pub config: HHLConfig,
    pub warnings: Vec<String>,
}

impl HHLResult {
    /// Amplitudes on the unpadded system levels.
    pub fn solution_amplitudes(&self) -> Vec<Complex64> {
        self.solution_state.amplitudes()[..self.dim].to_vec()
    }

    /// Real parts of the amplitudes; the pipeline produces real amplitudes
    /// up to rounding.
    pub fn solution_real(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.solution_amplitudes().iter().map(|a| a.re))
    }

    /// `physical_scale · |x⟩`, the solution of the unnormalized system `M x = b`.
    pub fn physical_solution(&self) -> DVector<f64> {
        self.solution_real() * self.physical_scale
    }

    pub fn to_json(&self) -> HHLResultJson {
        HHLResultJson {
            fidelity_vs_oracle: self.fidelity_vs_oracle,
            p_w: self.p_w,
            p_w_analytic: self.p_w_analytic,
            rescale: self.rescale,
            physical_scale: self.physical_scale,
            phase_return_probability: self.phase_return_probability,
            epsilon_kappa: self.epsilon_kappa,
            solution_purity: self.solution_purity,
            spectrum: self.spectrum.clone(),
            solution: self.solution_amplitudes().iter().map(|a| [a.re, a.im]).collect(),
            evolution: EvolutionDiagnostics {
                method: self.config.backend,
                t0: self.config.t0.unwrap_or_default(),
                n_steps: match self.config.backend {
                    EvolutionMethod::Exact => 1,
                    EvolutionMethod::Trotter => self.config.trotter_steps,
                    EvolutionMethod::DensityExp => self.config.density_copies,
                },
                error_bound: self.evolution_error_bound,
            },
            config: self.config.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvolutionDiagnostics {
    pub method: EvolutionMethod,
    pub t0: f64,
    pub n_steps: usize,
    pub error_bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HHLResultJson {
    pub fidelity_vs_oracle: f64,
    pub p_w: f64,
    pub p_w_analytic: f64,
    pub rescale: f64,
    pub physical_scale: f64,
    pub phase_return_probability: f64,
    pub epsilon_kappa: f64,
    pub solution_purity: f64,
    pub spectrum: Vec<SpectralComponent>,
    pub solution: Vec<[f64; 2]>,
    pub evolution: EvolutionDiagnostics,
    pub config: HHLConfig,
    pub warnings: Vec<String>,
}

/// `√(p_w(μ²+ξ²)/C²)·trΣ`.
///
/// Multiplying the normalized solution by this factor yields `tr M · M̂⁻¹b`,
/// i.e. `(tr M)²·M⁻¹b`; see [`physical_scale`] for the factor that returns
/// the solution of `M x = b` itself.
pub fn rescale_factor(p_w: f64, mu: f64, xi: f64, c_constant: f64, trace_sigma: f64) -> Result<f64> {
    if !(p_w > 0.0) {
        return Err(Error::InvalidArgument(format!("p_w must be positive, got {p_w}")));
    }
    if c_constant == 0.0 {
        return Err(Error::InvalidArgument("C must be nonzero".into()));
    }
    Ok((p_w * (mu * mu + xi * xi) / (c_constant * c_constant)).sqrt() * trace_sigma)
}

/// `√(p_w(μ²+ξ²))/(C·tr M)`, mapping the normalized solution to `M⁻¹b`.
pub fn physical_scale(p_w: f64, mu: f64, xi: f64, c_constant: f64, trace_m: f64) -> Result<f64> {
    if !(p_w > 0.0) {
        return Err(Error::InvalidArgument(format!("p_w must be positive, got {p_w}")));
    }
    if c_constant == 0.0 || trace_m == 0.0 {
        return Err(Error::InvalidArgument("C and tr M must be nonzero".into()));
    }
    Ok((p_w * (mu * mu + xi * xi)).sqrt() / (c_constant * trace_m))
}

/// Project onto the asset levels `2..dim` and renormalize.
pub fn extract_asset_block(amplitudes: &[Complex64]) -> Result<(QuantumState, f64)> {
    if amplitudes.len() < 3 {
        return Err(Error::Dimension("no asset levels in the solution".into()));
    }
    let block = &amplitudes[2..];
    let prob: f64 = block.iter().map(|a| a.norm_sqr()).sum();
    let total: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
    if prob < crate::qsim::NULL_BRANCH_TOL * total.max(1.0) {
        return Err(Error::NullBranch(prob));
    }
    let (dim, bits) = pow2_ceil(block.len());
    let scale = 1.0 / prob.sqrt();
    let mut amps: Vec<Complex64> = block.iter().map(|a| a * scale).collect();
    amps.resize(dim, Complex64::ZERO);
    let layout = crate::qsim::RegisterLayout::new(&[("asset", bits)])?;
    Ok((QuantumState::from_amplitudes(layout, amps)?, prob / total))
}

/// `|w⟩` and the probability of projecting the solution onto it.
pub fn extract_w(result: &HHLResult) -> Result<(QuantumState, f64)> {
    extract_asset_block(&result.solution_amplitudes())
}

fn spectrum(m_hat: &RMat, b_hat: &DVector<f64>, kappa: f64) -> Vec<SpectralComponent> {
    let (values, vectors) = sym_eigen(m_hat);
    let cutoff = PINV_REL_CUTOFF * values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    values
        .iter()
        .enumerate()
        .map(|(j, &lambda)| SpectralComponent {
            lambda,
            beta: vectors.column(j).dot(b_hat),
            retained: lambda.abs() >= cutoff.max(1.0 / kappa) && lambda != 0.0,
        })
        .collect()
}

/// Solve `M̂ x ∝ b` for a Markowitz system; the trotter and density_exp
/// backends use the three-part split of `M̂`.
pub fn hhl_solve(kkt: &KKTSystem, cfg: &HHLConfig) -> Result<HHLResult> {
    let parts = match cfg.backend {
        EvolutionMethod::Exact => None,
        _ => Some(HamiltonianParts::from_kkt(kkt)?),
    };
    solve_impl(kkt.m_hat(), kkt.rhs(), kkt.trace(), parts.as_ref(), cfg)
}

/// HHL on an arbitrary symmetric matrix that is already normalized; only the
/// exact backend is available without a Hamiltonian split.
pub fn hhl_solve_matrix(m_hat: &RMat, b: &DVector<f64>, cfg: &HHLConfig) -> Result<HHLResult> {
    if cfg.backend != EvolutionMethod::Exact {
        return Err(Error::InvalidArgument(format!(
            "the {} backend needs a KKT system",
            cfg.backend
        )));
    }
    solve_impl(m_hat, b, 1.0, None, cfg)
}

fn solve_impl(
    m_hat: &RMat,
    b: &DVector<f64>,
    trace_m: f64,
    parts: Option<&HamiltonianParts>,
    cfg: &HHLConfig,
) -> Result<HHLResult> {
    cfg.validate()?;
    let dim = b.len();
    if m_hat.shape() != (dim, dim) {
        return Err(Error::Dimension(format!(
            "matrix {:?} vs rhs of length {dim}",
            m_hat.shape()
        )));
    }
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Err(Error::InvalidArgument("right-hand side is zero".into()));
    }
    let t0 = cfg.t0.unwrap_or_else(|| default_t0(m_hat));
    let mut config = cfg.clone();
    config.t0 = Some(t0);
    let n = cfg.n_phase_bits;

    let b_hat = b / b_norm;
    let spec = spectrum(m_hat, &b_hat, cfg.kappa);
    let mut warnings = Vec::new();
    let max_phase = spec.iter().fold(0.0f64, |m, s| m.max(s.lambda.abs())) * t0 / (2.0 * PI);
    if max_phase >= 0.5 {
        let msg = format!("phase aliasing: max |λ|·t0/2π = {max_phase:.4} ≥ 1/2");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    // Below a few bins the 1/λ̃ rotation is dominated by sinc leakage.
    let bin = 2.0 * PI / (t0 * (1usize << cfg.n_phase_bits) as f64);
    let smallest = spec
        .iter()
        .filter(|s| s.retained && s.beta.abs() > 1e-12)
        .fold(f64::INFINITY, |m, s| m.min(s.lambda.abs()));
    if smallest < 4.0 * bin {
        let msg = format!(
            "coarse phase resolution: smallest retained |λ| = {smallest:.4e} spans {:.1} phase bins; raise the phase bit count",
            smallest / bin
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let p_w_analytic = cfg.c_constant.powi(2)
        * spec
            .iter()
            .filter(|s| s.retained)
            .map(|s| (s.beta / s.lambda).powi(2))
            .sum::<f64>();
    let (x_kappa, epsilon_kappa) = pseudo_inverse_kappa(m_hat, b, cfg.kappa)?;
    let x_norm = x_kappa.norm();

    let (solution_state, p_w, phase_return, purity, error_bound, fidelity) = match cfg.backend {
        EvolutionMethod::DensityExp => {
            let parts = parts.ok_or_else(|| Error::InvalidArgument("density_exp needs Hamiltonian parts".into()))?;
            let (rho, p_w, p_phase) = density_pipeline(parts, &b_hat, t0, &config)?;
            let (_, vec) = rho.dominant_eigenvector();
            let state = aligned_state(vec)?;
            let fid = if x_norm > 0.0 {
                let mut x = vec![Complex64::ZERO; rho.dim()];
                for (slot, v) in x.iter_mut().zip(x_kappa.iter()) {
                    *slot = c(v / x_norm);
                }
                rho.expectation(&x)?
            } else {
                0.0
            };
            (state, p_w, p_phase, rho.purity(), f64::NAN, fid)
        }
        _ => {
            let evolution = match cfg.backend {
                EvolutionMethod::Trotter => {
                    let parts = parts.ok_or_else(|| Error::InvalidArgument("trotter needs Hamiltonian parts".into()))?;
                    ControlledEvolution::trotter(parts, t0, n, cfg.trotter_steps)?
                }
                _ => ControlledEvolution::exact(m_hat, t0, n),
            };
            let rhs = QuantumState::from_real(SYSTEM, b.as_slice())?;
            let pe = phase_estimation(&evolution, &rhs, n)?;
            let mut state = eigenvalue_inversion(&pe, cfg.kappa, cfg.c_constant, t0)?;
            inverse_phase_estimation(&evolution, &mut state, SYSTEM)?;
            let (state, p_w) = state.postselect(ANCILLA, 1)?;
            let (state, p_phase) = state.postselect(PHASE, 0)?;
            let fid = if x_norm > 0.0 {
                let overlap: Complex64 = state
                    .amplitudes()
                    .iter()
                    .zip(x_kappa.iter())
                    .map(|(a, x)| a.conj() * (x / x_norm))
                    .sum();
                overlap.norm_sqr()
            } else {
                0.0
            };
            (state, p_w, p_phase, 1.0, evolution.error_bound(), fid)
        }
    };

    // For a KKT system ‖b‖² = μ² + ξ²; trΣ = tr M.
    let rescale = rescale_factor(p_w, b_norm, 0.0, cfg.c_constant, trace_m)?;
    let physical = physical_scale(p_w, b_norm, 0.0, cfg.c_constant, trace_m)?;
    Ok(HHLResult {
        solution_state,
        dim,
        p_w,
        p_w_analytic,
        phase_return_probability: phase_return,
        rescale,
        physical_scale: physical,
        spectrum: spec,
        epsilon_kappa,
        fidelity_vs_oracle: fidelity,
        solution_purity: purity,
        evolution_error_bound: error_bound,
        trace_m,
        rhs_norm: b_norm,
        config,
        warnings,
    })
}

/// Normalized state with the largest component made real and positive.
fn aligned_state(mut v: Vec<Complex64>) -> Result<QuantumState> {
    let (_, bits) = pow2_ceil(v.len());
    let pivot = v
        .iter()
        .copied()
        .max_by(|a, b| a.norm_sqr().total_cmp(&b.norm_sqr()))
        .unwrap_or(Complex64::ONE);
    let phase = if pivot.norm() > 0.0 { pivot.conj() / pivot.norm() } else { Complex64::ONE };
    let norm = v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    for a in v.iter_mut() {
        *a = *a * phase / norm;
    }
    QuantumState::from_amplitudes(crate::qsim::RegisterLayout::new(&[(SYSTEM, bits)])?, v)
}

fn dft_matrix(d: usize, inverse: bool) -> CMat {
    let sign = if inverse { -1.0 } else { 1.0 };
    let scale = 1.0 / (d as f64).sqrt();
    CMat::from_fn(d, d, |x, j| {
        Complex64::from_polar(scale, sign * 2.0 * PI * (x * j) as f64 / d as f64)
    })
}

fn hadamard_matrix(bits: usize) -> CMat {
    let d = 1usize << bits;
    let scale = 1.0 / (d as f64).sqrt();
    CMat::from_fn(d, d, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            c(scale)
        } else {
            c(-scale)
        }
    })
}

/// The whole pipeline on density matrices. Each controlled `U(t₀·2^k)` is a
/// sequence of product-formula steps in which the covariance factor is the
/// controlled partial-swap channel fed by fresh copies of `ρ`, and the star
/// factors are exact controlled unitaries. The uncompute runs the same
/// channels with `−dt`.
fn density_pipeline(
    parts: &HamiltonianParts,
    b_hat: &DVector<f64>,
    t0: f64,
    cfg: &HHLConfig,
) -> Result<(DensityMatrix, f64, f64)> {
    let n = cfg.n_phase_bits;
    let copies = cfg.density_copies;
    let dt = t0 / copies as f64;
    let (ds, _) = pow2_ceil(parts.dim());
    let mut rho_pad = CMat::zeros(ds, ds);
    rho_pad
        .view_mut((0, 0), (parts.dim(), parts.dim()))
        .copy_from(parts.rho().matrix());
    let scale = parts.sigma_scale();
    let forward = (pad_unitary(&parts.r_unitary(dt)?, ds), pad_unitary(&parts.pi_unitary(dt)?, ds));
    let backward = (pad_unitary(&parts.r_unitary(-dt)?, ds), pad_unitary(&parts.pi_unitary(-dt)?, ds));

    let sys = QuantumState::from_real(SYSTEM, b_hat.as_slice())?;
    let mut pure = sys.with_leading_register(PHASE, n)?.with_leading_register(ANCILLA, 1)?;
    pure.hadamard_all(PHASE)?;
    let mut state = pure.to_density();

    let fwd_left = &forward.0 * &forward.1;
    let fwd_step = |a: bool, b: bool, x: &CMat| {
        let l = if a { &fwd_left * x } else { x.clone() };
        let lr = if b { l * fwd_left.adjoint() } else { l };
        controlled_swap_block(&rho_pad, &lr, dt * scale, a, b)
    };
    for k in 0..n {
        let table = StepPowers::new(ds, copies << k, fwd_step);
        state.apply_block_map(SYSTEM, (PHASE, k), |a, b, x| table.apply(a, b, x))?;
    }
    let d = 1usize << n;
    state.apply_controlled_unitary(&dft_matrix(d, false), &[PHASE], &[])?;

    let table = inversion_table(n, t0, cfg.kappa);
    let mut rot = CMat::zeros(2 * d, 2 * d);
    for (x, inv) in table.iter().enumerate() {
        let s = (cfg.c_constant * inv).clamp(-1.0, 1.0);
        let co = (1.0 - s * s).sqrt();
        rot[(2 * x, 2 * x)] = c(co);
        rot[(2 * x, 2 * x + 1)] = c(-s);
        rot[(2 * x + 1, 2 * x)] = c(s);
        rot[(2 * x + 1, 2 * x + 1)] = c(co);
    }
    state.apply_controlled_unitary(&rot, &[PHASE, ANCILLA], &[])?;

    state.apply_controlled_unitary(&dft_matrix(d, true), &[PHASE], &[])?;
    let bwd_left = &backward.1 * &backward.0;
    let bwd_step = |a: bool, b: bool, x: &CMat| {
        let y = controlled_swap_block(&rho_pad, x, -dt * scale, a, b);
        let l = if a { &bwd_left * y } else { y };
        if b { l * bwd_left.adjoint() } else { l }
    };
    for k in (0..n).rev() {
        let table = StepPowers::new(ds, copies << k, bwd_step);
        state.apply_block_map(SYSTEM, (PHASE, k), |a, b, x| table.apply(a, b, x))?;
    }
    state.apply_controlled_unitary(&hadamard_matrix(n), &[PHASE], &[])?;

    let (state, p_w) = state.postselect(ANCILLA, 1)?;
    let (state, p_phase) = state.postselect(PHASE, 0)?;
    Ok((state, p_w, p_phase))
}

/// Repeated application of a block channel, keyed by the control values on
/// the row and column side. The channel is linear in the block, so `reps`
/// applications collapse into one `d²×d²` matrix power per control pattern.
struct StepPowers {
    d: usize,
    maps: [CMat; 3],
}

impl StepPowers {
    fn new(d: usize, reps: usize, step: impl Fn(bool, bool, &CMat) -> CMat) -> Self {
        let build = |a: bool, b: bool| {
            let mut m = CMat::zeros(d * d, d * d);
            for col in 0..d * d {
                let mut e = CMat::zeros(d, d);
                e[(col % d, col / d)] = c(1.0);
                let img = step(a, b, &e);
                for (row, v) in img.iter().enumerate() {
                    m[(row, col)] = *v;
                }
            }
            matrix_power(m, reps)
        };
        Self {
            d,
            maps: [build(false, true), build(true, false), build(true, true)],
        }
    }

    fn apply(&self, a: bool, b: bool, x: &CMat) -> CMat {
        let m = match (a, b) {
            (false, false) => return x.clone(),
            (false, true) => &self.maps[0],
            (true, false) => &self.maps[1],
            (true, true) => &self.maps[2],
        };
        let v = m * CMat::from_column_slice(self.d * self.d, 1, x.as_slice());
        CMat::from_column_slice(self.d, self.d, v.as_slice())
    }
}

fn matrix_power(mut base: CMat, mut e: usize) -> CMat {
    let mut acc = CMat::identity(base.nrows(), base.ncols());
    while e > 0 {
        if e & 1 == 1 {
            acc = &acc * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::portfolio_qp::{build_kkt, solve_exact, BudgetMode};
    use crate::qsim::RegisterLayout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config(kappa: f64, c_constant: f64, bits: usize, t0: f64) -> HHLConfig {
        HHLConfig {
            c_constant,
            t0: Some(t0),
            ..HHLConfig::new(kappa, bits)
        }
    }

    fn markowitz_two() -> KKTSystem {
        let r = DVector::from_vec(vec![1.0, 2.0]);
        let pi = DVector::from_vec(vec![1.0, 1.0]);
        let sigma = RMat::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        build_kkt(&r, &pi, &sigma, 1.2, 1.0, BudgetMode::Unit).unwrap()
    }

    fn min_abs_eigen(m: &RMat) -> f64 {
        sym_eigen(m).0.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()))
    }

    #[test]
    fn rhs_examples() {
        let s = prepare_rhs(1.0, 0.0, 4).unwrap();
        assert_eq!(s.amplitudes()[0], Complex64::ONE);
        let s = prepare_rhs(1.0, 1.0, 4).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.amplitudes()[0].re - h).abs() < 1e-15 && (s.amplitudes()[1].re - h).abs() < 1e-15);
        let s = prepare_rhs(3.0, 4.0, 5).unwrap();
        assert_eq!(s.amplitudes().len(), 8);
        assert!((s.amplitudes()[0].re - 0.6).abs() < 1e-15 && (s.amplitudes()[1].re - 0.8).abs() < 1e-15);
        assert!(prepare_rhs(0.0, 0.0, 4).is_err());
    }

    #[test]
    fn phase_estimation_exact_phases() {
        let m = RMat::from_diagonal(&DVector::from_vec(vec![0.5, 0.25]));
        let ev = ControlledEvolution::exact(&m, 2.0 * PI, 3);
        let rhs = QuantumState::from_real("sys", &[1.0, 1.0]).unwrap();
        let pe = phase_estimation(&ev, &rhs, 3).unwrap();
        let layout = pe.layout().clone();
        for (i, a) in pe.amplitudes().iter().enumerate() {
            if a.norm() > 1e-9 {
                let x = layout.value_of(i, "phase").unwrap();
                let s = layout.value_of(i, "sys").unwrap();
                assert_eq!(x, if s == 0 { 0b100 } else { 0b010 });
            }
        }
        let single = QuantumState::from_real("sys", &[0.0, 1.0]).unwrap();
        let pe = phase_estimation(&ev, &single, 3).unwrap();
        let probs = pe.probabilities("phase").unwrap();
        assert!((probs[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn phase_estimation_random_within_one_lsb() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = RMat::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let m = (&a + a.transpose()) / 8.0;
        let t0 = default_t0(&m);
        let bits = 8;
        let ev = ControlledEvolution::exact(&m, t0, bits);
        let (values, vectors) = sym_eigen(&m);
        for (j, lambda) in values.iter().enumerate() {
            let u: Vec<f64> = vectors.column(j).iter().copied().collect();
            let pe = phase_estimation(&ev, &QuantumState::from_real("sys", &u).unwrap(), bits).unwrap();
            let probs = pe.probabilities("phase").unwrap();
            let best = (0..probs.len()).max_by(|&x, &y| probs[x].total_cmp(&probs[y])).unwrap();
            let lsb = 2.0 * PI / (t0 * 256.0);
            assert!((phase_to_eigenvalue(best, bits, t0) - lambda).abs() <= lsb, "eigenvalue {lambda}");
        }
    }

    #[test]
    fn decoding_is_twos_complement() {
        assert_eq!(decode_phase(0, 3), 0.0);
        assert_eq!(decode_phase(3, 3), 0.375);
        assert_eq!(decode_phase(4, 3), -0.5);
        assert_eq!(decode_phase(7, 3), -0.125);
    }

    #[test]
    fn inversion_examples() {
        // λ̃ = 1/2 on a 3-bit register with t0 = π: θ = 1/4, value 2.
        let layout = RegisterLayout::new(&[("phase", 3), ("sys", 1)]).unwrap();
        let s = QuantumState::basis(layout.clone(), 2 << 1).unwrap();
        let out = eigenvalue_inversion(&s, 4.0, 0.25, PI).unwrap();
        let (_, p) = out.postselect("anc", 1).unwrap();
        assert!((p - 0.25).abs() < 1e-12);

        let zero = QuantumState::basis(layout.clone(), 0).unwrap();
        let out = eigenvalue_inversion(&zero, 4.0, 0.25, PI).unwrap();
        assert!(matches!(out.postselect("anc", 1), Err(Error::NullBranch(_))));

        let big = eigenvalue_inversion(&s, 2.0, 1.0, PI);
        assert!(matches!(big, Err(Error::InversionOverflow(_))));
    }

    #[test]
    fn filter_keeps_only_large_eigenvalue() {
        let m = RMat::from_diagonal(&DVector::from_vec(vec![0.5, 0.125]));
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let cfg = toy_config(4.0, 0.25, 3, 2.0 * PI);
        let res = hhl_solve_matrix(&m, &b, &cfg).unwrap();
        let amps = res.solution_amplitudes();
        assert!((amps[0].norm() - 1.0).abs() < 1e-12);
        assert!(amps[1].norm() < 1e-12);
        assert!(!res.warnings.is_empty());
    }

    #[test]
    fn diagonal_toy_solution() {
        let m = RMat::from_diagonal(&DVector::from_vec(vec![0.5, 0.25]));
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let cfg = toy_config(8.0, 0.1, 4, PI);
        let res = hhl_solve_matrix(&m, &b, &cfg).unwrap();
        assert!((res.solution_amplitudes()[0].re - 1.0).abs() < 1e-12);
        assert!((res.p_w - 4.0 * 0.01).abs() < 1e-12);
        assert!((res.p_w - res.p_w_analytic).abs() < 1e-12);
        assert!(res.fidelity_vs_oracle > 1.0 - 1e-12);
        assert!(res.warnings.is_empty());
    }

    #[test]
    fn representable_symmetric_toy() {
        // eigenvalues ±1/4, 1/8 with a rotated eigenbasis
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = RMat::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let m = &q * RMat::from_diagonal(&DVector::from_vec(vec![0.25, -0.25, 0.125])) * q.transpose();
        let b = DVector::from_vec(vec![0.3, -1.0, 0.5]);
        let cfg = toy_config(10.0, 0.1, 5, PI);
        let res = hhl_solve_matrix(&m, &b, &cfg).unwrap();
        assert!(res.fidelity_vs_oracle >= 1.0 - 1e-9);
        assert!((res.p_w - res.p_w_analytic).abs() < 1e-10);
        let (x, _) = pseudo_inverse_kappa(&m, &b, 10.0).unwrap();
        assert!((res.physical_solution() - &x).norm() < 1e-9 * x.norm());
    }

    #[test]
    fn markowitz_two_assets() {
        let k = markowitz_two();
        let kappa = 1.5 / min_abs_eigen(k.m_hat());
        let res = hhl_solve(&k, &HHLConfig::new(kappa, 10)).unwrap();
        assert!(res.fidelity_vs_oracle >= 0.99, "fidelity {}", res.fidelity_vs_oracle);
        let (w, prob) = extract_w(&res).unwrap();
        assert!(prob > 0.0 && prob <= 1.0);
        let exact = solve_exact(&k).unwrap().weights_vector();
        let cos: f64 = w.amplitudes().iter().zip(exact.iter()).map(|(a, x)| a.re * x).sum::<f64>() / exact.norm();
        assert!(cos.abs() >= 0.99, "cosine {cos}");
    }

    #[test]
    fn rescale_examples_and_units() {
        assert!((rescale_factor(0.04, 0.6, 0.8, 0.2, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let a = rescale_factor(0.3, 1.0, 2.0, 0.1, 1.5).unwrap();
        let b = rescale_factor(0.3, 1.0, 2.0, 0.1, 3.0).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
        assert!(rescale_factor(0.0, 1.0, 1.0, 0.1, 1.0).is_err());

        // Σ = 3I with orthogonal R, Π: spectrum {4, −1, 5, −2}/6, so with
        // t0 = 3π/4 every eigenphase is a multiple of 1/16.
        let phi: f64 = -0.5;
        let r = DVector::from_vec(vec![2.0 * phi.cos(), 2.0 * phi.sin()]);
        let pi = DVector::from_vec(vec![-(10f64.sqrt()) * phi.sin(), 10f64.sqrt() * phi.cos()]);
        let sigma = RMat::identity(2, 2) * 3.0;
        let k = build_kkt(&r, &pi, &sigma, 0.7, 1.3, BudgetMode::Prices).unwrap();
        let cfg = HHLConfig {
            t0: Some(0.75 * PI),
            ..HHLConfig::new(6.5, 10)
        };
        let res = hhl_solve(&k, &cfg).unwrap();
        assert!(res.warnings.is_empty());
        let x_classical = k.m_matrix().clone().try_inverse().unwrap() * k.rhs();
        let tr = k.trace();
        let scaled = res.solution_real() * res.rescale;
        let rel = (scaled / (tr * tr) - &x_classical).norm() / x_classical.norm();
        assert!(rel <= 1e-6, "relative error {rel}");
        let w = res.physical_solution().rows(2, 2).into_owned();
        assert!((r.dot(&w) - 0.7).abs() < 1e-3 * 0.7);
        assert!((pi.dot(&w) - 1.3).abs() < 1e-3 * 1.3);
    }

    #[test]
    fn extract_w_edge_cases() {
        let constraint_only = vec![Complex64::ONE, Complex64::ZERO, Complex64::ZERO, Complex64::ZERO];
        assert!(matches!(extract_asset_block(&constraint_only), Err(Error::NullBranch(_))));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let assets_only = vec![Complex64::ZERO, Complex64::ZERO, c(h), c(-h)];
        let (w, p) = extract_asset_block(&assets_only).unwrap();
        assert!((p - 1.0).abs() < 1e-15);
        assert!((w.amplitudes()[1].re + h).abs() < 1e-15);
    }

    #[test]
    fn fidelity_grows_with_phase_bits() {
        let k = markowitz_two();
        let kappa = 1.5 / min_abs_eigen(k.m_hat());
        let fids: Vec<f64> = [4usize, 6, 8, 10]
            .iter()
            .map(|&n| hhl_solve(&k, &HHLConfig::new(kappa, n)).unwrap().fidelity_vs_oracle)
            .collect();
        for w in fids.windows(2) {
            assert!(w[1] >= w[0] - 1e-3, "{fids:?}");
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = HHLConfig::new(2.0, 6);
        assert!(cfg.validate().is_ok());
        cfg.c_constant = 0.6;
        assert!(matches!(cfg.validate(), Err(Error::InversionOverflow(_))));
        let cfg = HHLConfig::new(2.0, 2);
        assert!(cfg.validate().is_err());
        let cfg = HHLConfig {
            backend: EvolutionMethod::DensityExp,
            ..HHLConfig::new(2.0, 8)
        };
        assert!(cfg.validate().is_err());
        let m = RMat::identity(2, 2) * 0.5;
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let cfg = HHLConfig {
            backend: EvolutionMethod::Trotter,
            ..HHLConfig::new(4.0, 4)
        };
        assert!(hhl_solve_matrix(&m, &b, &cfg).is_err());
    }

    #[test]
    fn deterministic() {
        let k = markowitz_two();
        let cfg = HHLConfig::new(10.0, 6);
        let a = serde_json::to_string(&hhl_solve(&k, &cfg).unwrap().to_json()).unwrap();
        let b = serde_json::to_string(&hhl_solve(&k, &cfg).unwrap().to_json()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn approximate_backends_track_exact() {
        let k = markowitz_two();
        let kappa = 1.5 / min_abs_eigen(k.m_hat());
        let exact = hhl_solve(&k, &HHLConfig::new(kappa, 4)).unwrap();
        let trotter = hhl_solve(
            &k,
            &HHLConfig {
                backend: EvolutionMethod::Trotter,
                trotter_steps: 64,
                ..HHLConfig::new(kappa, 4)
            },
        )
        .unwrap();
        assert!((trotter.fidelity_vs_oracle - exact.fidelity_vs_oracle).abs() < 0.05);
        let density = hhl_solve(
            &k,
            &HHLConfig {
                backend: EvolutionMethod::DensityExp,
                density_copies: 16,
                ..HHLConfig::new(kappa, 4)
            },
        )
        .unwrap();
        assert!(density.solution_purity <= 1.0 + 1e-9);
        assert!(
            (density.fidelity_vs_oracle - exact.fidelity_vs_oracle).abs() < 0.15,
            "density {} exact {}",
            density.fidelity_vs_oracle,
            exact.fidelity_vs_oracle
        );
    }
}
