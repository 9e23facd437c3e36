use num_complex::Complex64;

use super::oracle::{oracle_query, oracle_uncompute, Precision, QramOracle};
use crate::error::{Error, Result};
use crate::linalg::{pow2_ceil, RMat};
use crate::market_data::ReturnsPanel;
use crate::qsim::{Control, DensityMatrix, QuantumState, RegisterLayout};

/// A post-selected preparation together with the probability of the
/// heralding outcome and the rotation scale that was used.
#[derive(Debug, Clone)]
pub struct PrepOutcome {
    pub state: QuantumState,
    pub success_probability: f64,
    pub delta_used: f64,
}

fn resolve_delta(returns: &RMat, delta: Option<f64>, precision: Precision) -> Result<f64> {
    let max = returns
        .iter()
        .fold(0.0f64, |m, y| m.max(precision.quantize(*y).abs()));
    if max == 0.0 {
        return Err(Error::NullBranch(0.0));
    }
    match delta {
        None => Ok(1.0 / max),
        Some(d) if d <= 0.0 || !d.is_finite() => {
            Err(Error::InvalidArgument(format!("delta must be positive, got {d}")))
        }
        Some(d) if d * max > 1.0 + 1e-12 => Err(Error::RotationOverflow(d * max)),
        Some(d) => Ok(d),
    }
}

/// Memory table `y_s(t)` addressed by `t·N_pad + s`.
fn returns_oracle(returns: &RMat, precision: Precision) -> QramOracle {
    let (n, t) = returns.shape();
    let (np, _) = pow2_ceil(n);
    let (tp, _) = pow2_ceil(t);
    let mut table = vec![0.0; tp * np];
    for ti in 0..t {
        for s in 0..n {
            table[ti * np + s] = returns[(s, ti)];
        }
    }
    QramOracle::new(&table, precision)
}

/// `|χ⟩ = Σ y_s(t)|t⟩|s⟩/|y|` from an N×T matrix of returns.
///
/// Works for any shape including a single entry; registers are zero-padded
/// to powers of two and the success probability uses the padded sizes.
pub fn prepare_chi_from_returns(
    returns: &RMat,
    delta: Option<f64>,
    precision: Precision,
) -> Result<PrepOutcome> {
    let delta = resolve_delta(returns, delta, precision)?;
    let oracle = returns_oracle(returns, precision);
    let (_, sbits) = pow2_ceil(returns.nrows());
    let (_, tbits) = pow2_ceil(returns.ncols());
    let layout = RegisterLayout::new(&[
        ("t", tbits),
        ("s", sbits),
        ("c", oracle.data_qubits()),
        ("a", 1),
    ])?;
    let mut state = QuantumState::allocate(layout);
    state.hadamard_all("t")?;
    state.hadamard_all("s")?;
    oracle_query(&oracle, &mut state, &["t", "s"], "c", &[])?;
    state.controlled_amplitude_rotation("c", |code| oracle.decode(code), "a", delta, &[])?;
    oracle_uncompute(&oracle, &mut state, &["t", "s"], "c", &[])?;
    let (state, p) = state.postselect("a", 1)?;
    let (state, _) = state.postselect("c", 0)?;
    Ok(PrepOutcome {
        state,
        success_probability: p,
        delta_used: delta,
    })
}

pub fn prepare_chi(panel: &ReturnsPanel, delta: Option<f64>, precision: Precision) -> Result<PrepOutcome> {
    prepare_chi_from_returns(panel.returns(), delta, precision)
}

/// Hadamards on the time register of `|χ⟩` and post-selection of `|0⟩_t`,
/// leaving `Σ_s (Σ_t y_s(t))|s⟩` normalized. The returned probability is
/// that of this step alone.
pub fn prepare_r_state(chi: &PrepOutcome, t_register: &str) -> Result<PrepOutcome> {
    let mut state = chi.state.clone();
    state.hadamard_all(t_register)?;
    let (state, p) = state.postselect(t_register, 0)?;
    Ok(PrepOutcome {
        state,
        success_probability: p,
        delta_used: chi.delta_used,
    })
}

/// Mean-adjusted encoding `Σ (y_s(t) − ȳ_s)|t⟩|s⟩/|ỹ|`.
///
/// Interference between a branch that loads `δ·y_s(t)` and a branch that
/// loads the time average `δ·ȳ_s` (via Hadamard, query, rotation, uncompute,
/// Hadamard on an auxiliary time register `b`) produces the difference after
/// projecting the flag qubits onto `(|0⟩−|1⟩)_a/√2 ⊗ |0⟩_b|1⟩_d|1⟩_e`.
/// The averaging step needs T to be a power of two.
pub fn prepare_chi_tilde(panel: &ReturnsPanel, delta: Option<f64>, precision: Precision) -> Result<PrepOutcome> {
    let returns = panel.returns();
    let t = returns.ncols();
    if !t.is_power_of_two() {
        return Err(Error::Dimension(format!(
            "mean adjustment needs a power-of-two number of periods, got T = {t}"
        )));
    }
    let delta = resolve_delta(returns, delta, precision)?;
    let oracle = returns_oracle(returns, precision);
    let (_, sbits) = pow2_ceil(returns.nrows());
    let tbits = t.trailing_zeros() as usize;
    let layout = RegisterLayout::new(&[
        ("t", tbits),
        ("s", sbits),
        ("a", 1),
        ("b", tbits),
        ("c", oracle.data_qubits()),
        ("d", 1),
        ("e", 1),
    ])?;
    let on = [Control::Equals("a", 1)];
    let off = [Control::Equals("a", 0)];
    let x = crate::linalg::CMat::from_row_slice(
        2,
        2,
        &[Complex64::ZERO, Complex64::ONE, Complex64::ONE, Complex64::ZERO],
    );

    let mut state = QuantumState::allocate(layout);
    state.hadamard_all("t")?;
    state.hadamard_all("s")?;
    state.hadamard_all("a")?;

    // a = 1: average over an auxiliary time index b into ancilla d.
    state.controlled_hadamard_all("b", &on)?;
    oracle_query(&oracle, &mut state, &["b", "s"], "c", &on)?;
    state.controlled_amplitude_rotation("c", |code| oracle.decode(code), "d", delta, &on)?;
    oracle_uncompute(&oracle, &mut state, &["b", "s"], "c", &on)?;
    state.controlled_hadamard_all("b", &on)?;
    state.apply_controlled_unitary(&x, &["e"], &on)?;

    // a = 0: the return itself into ancilla e.
    oracle_query(&oracle, &mut state, &["t", "s"], "c", &off)?;
    state.controlled_amplitude_rotation("c", |code| oracle.decode(code), "e", delta, &off)?;
    oracle_uncompute(&oracle, &mut state, &["t", "s"], "c", &off)?;
    state.apply_controlled_unitary(&x, &["d"], &off)?;

    let (state, p_c) = state.postselect("c", 0)?;
    debug_assert!((p_c - 1.0).abs() < 1e-10);
    let mut target = vec![Complex64::ZERO; 2 * t * 4];
    let h = std::f64::consts::FRAC_1_SQRT_2;
    target[3] = Complex64::new(h, 0.0);
    target[t * 4 + 3] = Complex64::new(-h, 0.0);
    let (state, p) = state.postselect_projector(&["a", "b", "d", "e"], &target)?;
    Ok(PrepOutcome {
        state,
        success_probability: p,
        delta_used: delta,
    })
}

/// `δ²|ỹ|²/(4TN)` with N padded to a power of two.
pub fn chi_tilde_probability(panel: &ReturnsPanel, delta: f64) -> f64 {
    let (np, _) = pow2_ceil(panel.n_assets());
    let t = panel.n_times() as f64;
    delta * delta * panel.norm_y_tilde().powi(2) / (4.0 * t * np as f64)
}

/// `Σ/trΣ` as the asset-register marginal of `|χ̃⟩`.
pub fn covariance_density(chi_tilde: &PrepOutcome) -> Result<DensityMatrix> {
    chi_tilde.state.partial_trace(&["t"])
}

/// Invert the `|χ̃⟩` success probability for `trΣ`.
pub fn estimate_trace_sigma(p_chi_tilde: f64, delta: f64, t: usize, n: usize) -> Result<f64> {
    if t <= 1 {
        return Err(Error::InvalidArgument("trace estimate needs T > 1".into()));
    }
    if delta <= 0.0 || n == 0 || p_chi_tilde < 0.0 {
        return Err(Error::InvalidArgument(
            "probability must be non-negative, delta and N positive".into(),
        ));
    }
    Ok(4.0 * t as f64 * n as f64 * p_chi_tilde / (delta * delta * (t as f64 - 1.0)))
}
