//! Time evolution under `M̂ = H_Σ + H_R + H_Π`.
//!
//! `H_R` and `H_Π` are star graphs with closed-form exponentials, `H_Σ` is
//! the normalized covariance which can either be exponentiated directly or
//! consumed as a density matrix through partial-swap evolution, and the
//! pieces are composed with a first-order product formula.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, hermitian_expm, op_norm, pow2_ceil, to_complex, CMat, RMat, I};
use crate::portfolio_qp::KKTSystem;
use crate::qsim::{pad_unitary, Control, DensityMatrix, QuantumState};
use crate::state_prep::KPTree;

/// Which constraint row a star graph hangs from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StarCenter {
    /// Row 0, weights `R`.
    Returns,
    /// Row 1, weights `Π` (or the unit budget vector).
    Budget,
}

impl StarCenter {
    pub fn index(self) -> usize {
        match self {
            StarCenter::Returns => 0,
            StarCenter::Budget => 1,
        }
    }
}

/// `|c⟩⟨v| + |v⟩⟨c|` with `v` placed on indices `2..2+len`.
pub fn star_matrix(v: &DVector<f64>, center: StarCenter, dim: usize) -> Result<RMat> {
    check_star(v, dim)?;
    let ci = center.index();
    let mut h = RMat::zeros(dim, dim);
    for (s, x) in v.iter().enumerate() {
        h[(ci, s + 2)] = *x;
        h[(s + 2, ci)] = *x;
    }
    Ok(h)
}

fn check_star(v: &DVector<f64>, dim: usize) -> Result<()> {
    if v.is_empty() || dim < v.len() + 2 {
        return Err(Error::Dimension(format!(
            "{} star weights do not fit a {dim}-dimensional space",
            v.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarEigen {
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub eigvec_plus: DVector<f64>,
    pub eigvec_minus: DVector<f64>,
}

/// The two nonzero eigenpairs `±‖v‖`, `(|c⟩ ± v̂)/√2`.
pub fn star_eigensystem(v: &DVector<f64>, center: StarCenter, dim: usize) -> Result<StarEigen> {
    check_star(v, dim)?;
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("star weights are all zero".into()));
    }
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let build = |lambda: f64| {
        let mut e = DVector::zeros(dim);
        e[center.index()] = h;
        for (s, x) in v.iter().enumerate() {
            e[s + 2] = h * x / lambda;
        }
        e
    };
    Ok(StarEigen {
        lambda_plus: norm,
        lambda_minus: -norm,
        eigvec_plus: build(norm),
        eigvec_minus: build(-norm),
    })
}

/// `exp(−i H_star t)` assembled from the eigenbasis change.
///
/// A Hadamard between `|c⟩` and the first asset index followed by the
/// subnorm-tree cascade `|first asset⟩ → |v̂⟩` maps `|c⟩, |first asset⟩`
/// onto the two eigenvectors; the phases `e^{∓i‖v‖t}` are applied there and
/// the basis change is undone. The cascade needs a power-of-two asset block,
/// so the construction runs in dimension `2 + 2^⌈log₂N⌉` and is truncated.
pub fn star_exponential(v: &DVector<f64>, center: StarCenter, dim: usize, t: f64) -> Result<CMat> {
    let eig = star_eigensystem(v, center, dim)?;
    let n = v.len();
    let (width, _) = pow2_ceil(n);
    let big = 2 + width;
    let ci = center.index();

    let tree = KPTree::build(v.as_slice())?;
    let mut a = CMat::identity(big, big);
    a.view_mut((2, 2), (width, width)).copy_from(&tree.preparation_unitary()?);

    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut had = CMat::identity(big, big);
    had[(ci, ci)] = c(h);
    had[(ci, 2)] = c(h);
    had[(2, ci)] = c(h);
    had[(2, 2)] = c(-h);

    let basis = &a * &had;
    let mut phases = CMat::identity(big, big);
    phases[(ci, ci)] = (-I * eig.lambda_plus * t).exp();
    phases[(2, 2)] = (-I * eig.lambda_minus * t).exp();
    let full = &basis * phases * basis.adjoint();

    let keep = n + 2;
    let mut out = CMat::identity(dim, dim);
    out.view_mut((0, 0), (keep, keep))
        .copy_from(&full.view((0, 0), (keep, keep)));
    Ok(out)
}

/// The three pieces of `M̂`.
///
/// The covariance piece is kept as the unit-trace density matrix `ρ`
/// embedded in the asset block together with the scale `trΣ/trM` that turns
/// it back into `Σ/trM`.
#[derive(Debug, Clone)]
pub struct HamiltonianParts {
    rho: DensityMatrix,
    sigma_scale: f64,
    r: DVector<f64>,
    pi: DVector<f64>,
}

impl HamiltonianParts {
    /// Parts of `(M_R + M_Π + Σ)/trace_m`.
    pub fn new(sigma: &RMat, r: &DVector<f64>, pi: &DVector<f64>, trace_m: f64) -> Result<Self> {
        let n = sigma.nrows();
        if sigma.ncols() != n || r.len() != n || pi.len() != n {
            return Err(Error::Dimension("inconsistent Hamiltonian part sizes".into()));
        }
        let tr = sigma.trace();
        if tr <= 0.0 || trace_m == 0.0 {
            return Err(Error::InvalidArgument("need tr Σ > 0 and tr M ≠ 0".into()));
        }
        let mut embedded = CMat::zeros(n + 2, n + 2);
        embedded
            .view_mut((2, 2), (n, n))
            .copy_from(&to_complex(&(sigma / tr)));
        Ok(Self {
            rho: DensityMatrix::new(embedded)?,
            sigma_scale: tr / trace_m,
            r: r / trace_m,
            pi: pi / trace_m,
        })
    }

    pub fn from_kkt(k: &KKTSystem) -> Result<Self> {
        Self::new(&k.sigma(), &k.returns(), &k.budget_vector(), k.trace())
    }

    pub fn dim(&self) -> usize {
        self.r.len() + 2
    }

    /// `ρ = Σ/trΣ` embedded in the asset block.
    pub fn rho(&self) -> &DensityMatrix {
        &self.rho
    }

    /// `trΣ/trM`; equal to 1 for a KKT matrix whose only diagonal is `Σ`.
    pub fn sigma_scale(&self) -> f64 {
        self.sigma_scale
    }

    pub fn r_weights(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn pi_weights(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn h_sigma(&self) -> RMat {
        self.rho.matrix().map(|z| z.re * self.sigma_scale)
    }

    pub fn h_r(&self) -> RMat {
        star_or_zero(&self.r, StarCenter::Returns)
    }

    pub fn h_pi(&self) -> RMat {
        star_or_zero(&self.pi, StarCenter::Budget)
    }

    pub fn total(&self) -> RMat {
        self.h_sigma() + self.h_r() + self.h_pi()
    }

    pub fn sigma_unitary(&self, dt: f64) -> CMat {
        hermitian_expm(&to_complex(&self.h_sigma()), dt)
    }

    pub fn r_unitary(&self, dt: f64) -> Result<CMat> {
        star_or_identity(&self.r, StarCenter::Returns, dt)
    }

    pub fn pi_unitary(&self, dt: f64) -> Result<CMat> {
        star_or_identity(&self.pi, StarCenter::Budget, dt)
    }

    /// One product-formula step `e^{−iH_Σ dt} e^{−iH_R dt} e^{−iH_Π dt}`.
    pub fn trotter_step(&self, dt: f64) -> Result<CMat> {
        Ok(self.sigma_unitary(dt) * self.r_unitary(dt)? * self.pi_unitary(dt)?)
    }
}

fn star_or_zero(v: &DVector<f64>, center: StarCenter) -> RMat {
    let dim = v.len() + 2;
    star_matrix(v, center, dim).unwrap_or_else(|_| RMat::zeros(dim, dim))
}

fn star_or_identity(v: &DVector<f64>, center: StarCenter, dt: f64) -> Result<CMat> {
    let dim = v.len() + 2;
    if v.iter().all(|x| *x == 0.0) {
        return Ok(CMat::identity(dim, dim));
    }
    star_exponential(v, center, dim, dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvolutionMethod {
    #[default]
    Exact,
    Trotter,
    DensityExp,
}

impl std::str::FromStr for EvolutionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "trotter" => Ok(Self::Trotter),
            "density_exp" | "density-exp" => Ok(Self::DensityExp),
            other => Err(Error::InvalidArgument(format!(
                "unknown evolution backend {other:?} (expected exact, trotter or density_exp)"
            ))),
        }
    }
}

impl std::fmt::Display for EvolutionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Trotter => "trotter",
            Self::DensityExp => "density_exp",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedEvolution {
    pub unitary: CMat,
    pub t_total: f64,
    pub method: EvolutionMethod,
    pub n_steps: usize,
    /// Operator-norm distance to the exact exponential.
    pub error_bound: f64,
}

pub fn exact_evolution(m_hat: &RMat, t: f64) -> SimulatedEvolution {
    SimulatedEvolution {
        unitary: hermitian_expm(&to_complex(m_hat), t),
        t_total: t,
        method: EvolutionMethod::Exact,
        n_steps: 1,
        error_bound: 0.0,
    }
}

pub fn trotter_evolution(parts: &HamiltonianParts, t: f64, n_steps: usize) -> Result<SimulatedEvolution> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    let step = parts.trotter_step(t / n_steps as f64)?;
    let unitary = matrix_power(&step, n_steps);
    let exact = hermitian_expm(&to_complex(&parts.total()), t);
    Ok(SimulatedEvolution {
        error_bound: op_norm(&(&unitary - exact)),
        unitary,
        t_total: t,
        method: EvolutionMethod::Trotter,
        n_steps,
    })
}

fn matrix_power(m: &CMat, mut k: usize) -> CMat {
    let mut result = CMat::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        base = &base * &base;
        k >>= 1;
    }
    result
}

fn swap_operator(d: usize) -> CMat {
    let mut s = CMat::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            s[(i * d + j, j * d + i)] = Complex64::ONE;
        }
    }
    s
}

/// `tr₁[e^{−iS dt}(ρ⊗σ)e^{iS dt}]`, formed on the doubled space.
pub fn density_exponentiation_step(rho: &DensityMatrix, sigma: &DensityMatrix, dt: f64) -> Result<DensityMatrix> {
    let d = rho.dim();
    if sigma.dim() != d {
        return Err(Error::Dimension(format!(
            "ρ is {d}-dimensional but σ is {}-dimensional",
            sigma.dim()
        )));
    }
    // S² = 1, so e^{−iS dt} = cos(dt) − i sin(dt) S.
    let s = swap_operator(d);
    let u = CMat::identity(d * d, d * d) * c(dt.cos()) - s * (I * dt.sin());
    let joint = rho.matrix().kronecker(sigma.matrix());
    let evolved = &u * joint * u.adjoint();
    let out = CMat::from_fn(d, d, |j, k| (0..d).map(|i| evolved[(i * d + j, i * d + k)]).sum());
    Ok(DensityMatrix::new_unchecked(out, sigma.layout().cloned()))
}

/// Closed form of one block of a controlled partial-swap step.
///
/// For a system operator block `X` sitting between control values `row_on`
/// and `col_on`, this is `tr₁[U_a(ρ⊗X)U_b†]` with `U_1 = e^{−iS dt}` and
/// `U_0 = 1`. With both controls on it reduces to the uncontrolled step.
pub fn controlled_swap_block(rho: &CMat, x: &CMat, dt: f64, row_on: bool, col_on: bool) -> CMat {
    let (ca, sa) = if row_on { (dt.cos(), dt.sin()) } else { (1.0, 0.0) };
    let (cb, sb) = if col_on { (dt.cos(), dt.sin()) } else { (1.0, 0.0) };
    let mut out = x * c(ca * cb);
    if sb != 0.0 {
        out += x * rho * (I * (ca * sb));
    }
    if sa != 0.0 {
        out -= rho * x * (I * (sa * cb));
    }
    if sa != 0.0 && sb != 0.0 {
        out += rho * (x.trace() * (sa * sb));
    }
    out
}

/// `n_copies` partial-swap steps of length `t/n_copies`, approximating
/// `e^{−iρt} σ₀ e^{iρt}`.
pub fn simulate_density_hamiltonian(
    rho: &DensityMatrix,
    sigma0: &DensityMatrix,
    t: f64,
    n_copies: usize,
) -> Result<DensityMatrix> {
    if n_copies == 0 {
        return Err(Error::InvalidArgument("n_copies must be at least 1".into()));
    }
    if rho.dim() != sigma0.dim() {
        return Err(Error::Dimension("ρ and σ₀ differ in dimension".into()));
    }
    let dt = t / n_copies as f64;
    let mut state = sigma0.matrix().clone();
    for _ in 0..n_copies {
        state = controlled_swap_block(rho.matrix(), &state, dt, true, true);
    }
    Ok(DensityMatrix::new_unchecked(state, sigma0.layout().cloned()))
}

/// Reference `e^{−iρt} σ₀ e^{iρt}`.
pub fn exact_density_evolution(rho: &DensityMatrix, sigma0: &DensityMatrix, t: f64) -> CMat {
    let u = hermitian_expm(rho.matrix(), t);
    &u * sigma0.matrix() * u.adjoint()
}

/// Number of eigenvalues of `ρ` at least `1/t²`, the part of the spectrum a
/// simulation time `t` resolves.
pub fn effective_rank(rho: &DensityMatrix, t: f64) -> usize {
    let (values, _) = crate::linalg::herm_eigen(rho.matrix());
    let floor = 1.0 / (t * t).max(f64::MIN_POSITIVE);
    values.iter().filter(|l| **l >= floor).count()
}

/// `Σ_j |j⟩⟨j| ⊗ U(j·t₀)` realised as one controlled `U(t₀·2^k)` per
/// control bit `k`.
#[derive(Debug, Clone)]
pub struct ControlledEvolution {
    powers: Vec<CMat>,
    t0: f64,
    method: EvolutionMethod,
    n_steps: usize,
    error_bound: f64,
}

impl ControlledEvolution {
    pub fn exact(m_hat: &RMat, t0: f64, n_bits: usize) -> Self {
        let h = to_complex(m_hat);
        let powers = (0..n_bits)
            .map(|k| hermitian_expm(&h, t0 * (1u64 << k) as f64))
            .collect();
        Self {
            powers,
            t0,
            method: EvolutionMethod::Exact,
            n_steps: 1,
            error_bound: 0.0,
        }
    }

    /// Product-formula powers with a fixed step `t₀/steps_per_t0`, so bit `k`
    /// uses `steps_per_t0·2^k` steps.
    pub fn trotter(parts: &HamiltonianParts, t0: f64, n_bits: usize, steps_per_t0: usize) -> Result<Self> {
        let base = trotter_evolution(parts, t0, steps_per_t0)?;
        let exact = to_complex(&parts.total());
        let mut powers = Vec::with_capacity(n_bits);
        let mut current = base.unitary;
        let mut error_bound = 0.0f64;
        for k in 0..n_bits {
            let reference = hermitian_expm(&exact, t0 * (1u64 << k) as f64);
            error_bound = error_bound.max(op_norm(&(&current - reference)));
            let next = &current * &current;
            powers.push(current);
            current = next;
        }
        Ok(Self {
            powers,
            t0,
            method: EvolutionMethod::Trotter,
            n_steps: steps_per_t0,
            error_bound,
        })
    }

    pub fn n_bits(&self) -> usize {
        self.powers.len()
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn method(&self) -> EvolutionMethod {
        self.method
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Largest operator-norm deviation of any stored power from the exact one.
    pub fn error_bound(&self) -> f64 {
        self.error_bound
    }

    pub fn system_dim(&self) -> usize {
        self.powers.first().map_or(0, |p| p.nrows())
    }

    /// `U(t₀·2^k)`.
    pub fn power(&self, k: usize) -> &CMat {
        &self.powers[k]
    }

    /// Apply the controlled evolutions (or their inverse) with `control`
    /// driving and `target` evolving; the target may be larger than the
    /// system, in which case the extra levels are left alone.
    pub fn apply(&self, state: &mut QuantumState, control: &str, target: &str, inverse: bool) -> Result<()> {
        let (_, cbits) = state.layout().locate(control)?;
        if cbits != self.n_bits() {
            return Err(Error::Dimension(format!(
                "control register has {cbits} qubits, evolution has {} powers",
                self.n_bits()
            )));
        }
        let tdim = state.layout().register_dim(target)?;
        if tdim < self.system_dim() {
            return Err(Error::Dimension(format!(
                "target register of dimension {tdim} is smaller than the system ({})",
                self.system_dim()
            )));
        }
        let order: Vec<usize> = if inverse {
            (0..self.n_bits()).rev().collect()
        } else {
            (0..self.n_bits()).collect()
        };
        for k in order {
            let u = if inverse {
                self.powers[k].adjoint()
            } else {
                self.powers[k].clone()
            };
            let u = pad_unitary(&u, tdim);
            state.apply_controlled_unitary(&u, &[target], &[Control::Bit(control, k, true)])?;
        }
        Ok(())
    }

    /// Dense block matrix with the control register as the leading factor.
    pub fn block_unitary(&self) -> CMat {
        let d = self.system_dim();
        let n = 1usize << self.n_bits();
        let mut out = CMat::zeros(n * d, n * d);
        for j in 0..n {
            let mut u = CMat::identity(d, d);
            for k in 0..self.n_bits() {
                if (j >> k) & 1 == 1 {
                    u = &self.powers[k] * u;
                }
            }
            out.view_mut((j * d, j * d), (d, d)).copy_from(&u);
        }
        out
    }
}
