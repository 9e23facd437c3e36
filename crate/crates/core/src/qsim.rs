//! Dense, exact state-vector and density-matrix simulation over named
//! registers.
//!
//! Basis indices are big-endian over the layout: the first register holds the
//! most significant bits. Within a register, bit `k` carries weight `2^k`.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, weighted::WeightedIndex};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{herm_eigen, unitarity_deviation, CMat};

pub const DEFAULT_QUBIT_CAP: usize = 24;
pub const UNITARY_TOL: f64 = 1e-10;
pub const NORM_TOL: f64 = 1e-10;
pub const NULL_BRANCH_TOL: f64 = 1e-14;

/// Qubit cap from `QFOLIO_QUBIT_CAP`, falling back to [`DEFAULT_QUBIT_CAP`].
pub fn qubit_cap() -> usize {
    std::env::var("QFOLIO_QUBIT_CAP")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_QUBIT_CAP)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub name: String,
    pub qubits: usize,
}

/// Ordered named registers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterLayout {
    registers: Vec<Register>,
}

impl RegisterLayout {
    pub fn new(registers: &[(&str, usize)]) -> Result<Self> {
        Self::with_cap(registers, qubit_cap())
    }

    pub fn with_cap(registers: &[(&str, usize)], cap: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in registers {
            if !seen.insert(*name) {
                return Err(Error::InvalidArgument(format!("duplicate register {name:?}")));
            }
        }
        let layout = Self {
            registers: registers
                .iter()
                .map(|(n, q)| Register {
                    name: (*n).to_owned(),
                    qubits: *q,
                })
                .collect(),
        };
        let total = layout.total_qubits();
        if total > cap {
            return Err(Error::QubitCap {
                requested: total,
                cap,
            });
        }
        Ok(layout)
    }

    pub fn registers(&self) -> &[Register] {
        &self.registers
    }

    pub fn total_qubits(&self) -> usize {
        self.registers.iter().map(|r| r.qubits).sum()
    }

    pub fn dim(&self) -> usize {
        1 << self.total_qubits()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.registers.iter().any(|r| r.name == name)
    }

    /// Bit shift (from the least significant end) and width of a register.
    pub fn locate(&self, name: &str) -> Result<(usize, usize)> {
        let pos = self
            .registers
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::UnknownRegister(name.to_owned()))?;
        let shift = self.registers[pos + 1..].iter().map(|r| r.qubits).sum();
        Ok((shift, self.registers[pos].qubits))
    }

    pub fn register_dim(&self, name: &str) -> Result<usize> {
        Ok(1 << self.locate(name)?.1)
    }

    pub fn value_of(&self, index: usize, name: &str) -> Result<usize> {
        let (shift, bits) = self.locate(name)?;
        Ok((index >> shift) & ((1 << bits) - 1))
    }

    fn without(&self, names: &[&str]) -> Self {
        Self {
            registers: self
                .registers
                .iter()
                .filter(|r| !names.contains(&r.name.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Global bit mask of the given registers and the offsets of each basis
    /// state of their joint space (first listed register most significant).
    fn offsets(&self, targets: &[&str]) -> Result<(usize, Vec<usize>)> {
        let mut bits = Vec::new();
        for (i, t) in targets.iter().enumerate() {
            if targets[..i].contains(t) {
                return Err(Error::InvalidArgument(format!("register {t:?} listed twice")));
            }
            let (shift, width) = self.locate(t)?;
            for b in (0..width).rev() {
                bits.push(shift + b);
            }
        }
        let mask = bits.iter().fold(0usize, |m, b| m | (1 << b));
        let k = bits.len();
        let offsets = (0..1usize << k)
            .map(|j| {
                let mut off = 0;
                for (pos, &bit) in bits.iter().enumerate() {
                    if (j >> (k - 1 - pos)) & 1 == 1 {
                        off |= 1 << bit;
                    }
                }
                off
            })
            .collect();
        Ok((mask, offsets))
    }

    pub(crate) fn resolve(&self, controls: &[Control<'_>]) -> Result<(usize, usize)> {
        let mut mask = 0usize;
        let mut value = 0usize;
        for c in controls {
            match *c {
                Control::Equals(name, v) => {
                    let (shift, width) = self.locate(name)?;
                    if v >= 1 << width {
                        return Err(Error::InvalidArgument(format!(
                            "control value {v} out of range for {name:?}"
                        )));
                    }
                    mask |= ((1 << width) - 1) << shift;
                    value |= v << shift;
                }
                Control::Bit(name, bit, set) => {
                    let (shift, width) = self.locate(name)?;
                    if bit >= width {
                        return Err(Error::InvalidArgument(format!(
                            "bit {bit} out of range for {name:?}"
                        )));
                    }
                    mask |= 1 << (shift + bit);
                    if set {
                        value |= 1 << (shift + bit);
                    }
                }
            }
        }
        Ok((mask, value))
    }
}

/// A classical condition on register contents for controlled operations.
#[derive(Debug, Clone, Copy)]
pub enum Control<'a> {
    /// Register holds exactly this value.
    Equals(&'a str, usize),
    /// Bit `k` (weight `2^k`) of a register is set / clear.
    Bit(&'a str, usize, bool),
}

fn remove_bits(index: usize, shift: usize, width: usize) -> usize {
    ((index >> (shift + width)) << shift) | (index & ((1 << shift) - 1))
}

/// Pad a unitary with an identity block up to `dim`.
pub fn pad_unitary(u: &CMat, dim: usize) -> CMat {
    let mut out = CMat::identity(dim, dim);
    let n = u.nrows();
    out.view_mut((0, 0), (n, n)).copy_from(u);
    out
}

/// Pure state over a register layout.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState {
    amplitudes: Vec<Complex64>,
    layout: RegisterLayout,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StateDump {
    pub layout: RegisterLayout,
    pub amplitudes: Vec<[f64; 2]>,
}

impl QuantumState {
    /// `|0…0⟩` over the layout.
    pub fn allocate(layout: RegisterLayout) -> Self {
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); layout.dim()];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Self { amplitudes, layout }
    }

    pub fn basis(layout: RegisterLayout, index: usize) -> Result<Self> {
        if index >= layout.dim() {
            return Err(Error::Dimension(format!("basis index {index} out of range")));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); layout.dim()];
        amplitudes[index] = Complex64::new(1.0, 0.0);
        Ok(Self { amplitudes, layout })
    }

    /// Wrap amplitudes that are already normalized.
    pub fn from_amplitudes(layout: RegisterLayout, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != layout.dim() {
            return Err(Error::Dimension(format!(
                "{} amplitudes for a {}-dimensional layout",
                amplitudes.len(),
                layout.dim()
            )));
        }
        let s = Self { amplitudes, layout };
        let norm = s.norm();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidArgument(format!("state norm {norm} is not 1")));
        }
        Ok(s)
    }

    /// Normalize a real vector (zero-padded to the register size) into a
    /// single-register state.
    pub fn from_real(name: &str, v: &[f64]) -> Result<Self> {
        let (dim, bits) = crate::linalg::pow2_ceil(v.len());
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidArgument("zero vector".into()));
        }
        let mut amps = vec![Complex64::new(0.0, 0.0); dim];
        for (a, x) in amps.iter_mut().zip(v) {
            *a = Complex64::new(x / norm, 0.0);
        }
        Self::from_amplitudes(RegisterLayout::new(&[(name, bits)])?, amps)
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn layout(&self) -> &RegisterLayout {
        &self.layout
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn inner(&self, other: &QuantumState) -> Result<Complex64> {
        if self.amplitudes.len() != other.amplitudes.len() {
            return Err(Error::Dimension("states of different dimension".into()));
        }
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    /// Same amplitudes under a different layout of equal total size.
    pub fn relabel(mut self, layout: RegisterLayout) -> Result<Self> {
        if layout.dim() != self.layout.dim() {
            return Err(Error::Dimension("relabel must preserve dimension".into()));
        }
        self.layout = layout;
        Ok(self)
    }

    /// `|0⟩_name ⊗ self`, with the new register leading.
    pub fn with_leading_register(&self, name: &str, qubits: usize) -> Result<QuantumState> {
        let mut spec: Vec<(&str, usize)> = vec![(name, qubits)];
        spec.extend(self.layout.registers.iter().map(|r| (r.name.as_str(), r.qubits)));
        let layout = RegisterLayout::new(&spec)?;
        let mut amplitudes = self.amplitudes.clone();
        amplitudes.resize(layout.dim(), Complex64::new(0.0, 0.0));
        Ok(QuantumState { amplitudes, layout })
    }

    /// Gather every block of the target registers (under the controls), hand
    /// it to `f`, and scatter the result back.
    pub fn map_blocks(
        &mut self,
        targets: &[&str],
        controls: &[Control<'_>],
        mut f: impl FnMut(&mut [Complex64]),
    ) -> Result<()> {
        let (tmask, offsets) = self.layout.offsets(targets)?;
        let (cmask, cval) = self.layout.resolve(controls)?;
        if cmask & tmask != 0 {
            return Err(Error::InvalidArgument("control overlaps target".into()));
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); offsets.len()];
        for base in 0..self.amplitudes.len() {
            if base & tmask != 0 || base & cmask != cval {
                continue;
            }
            for (b, off) in buf.iter_mut().zip(&offsets) {
                *b = self.amplitudes[base | off];
            }
            f(&mut buf);
            for (b, off) in buf.iter().zip(&offsets) {
                self.amplitudes[base | off] = *b;
            }
        }
        Ok(())
    }

    pub fn apply_unitary(&mut self, u: &CMat, targets: &[&str]) -> Result<()> {
        self.apply_controlled_unitary(u, targets, &[])
    }

    pub fn apply_controlled_unitary(
        &mut self,
        u: &CMat,
        targets: &[&str],
        controls: &[Control<'_>],
    ) -> Result<()> {
        let dim: usize = targets
            .iter()
            .map(|t| self.layout.register_dim(t))
            .product::<Result<usize>>()?;
        if u.nrows() != dim || u.ncols() != dim {
            return Err(Error::Dimension(format!(
                "{}x{} operator on a {dim}-dimensional target",
                u.nrows(),
                u.ncols()
            )));
        }
        let dev = unitarity_deviation(u);
        if dev > UNITARY_TOL {
            return Err(Error::NonUnitary(dev));
        }
        let mut out = vec![Complex64::new(0.0, 0.0); dim];
        self.map_blocks(targets, controls, |block| {
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (j, b) in block.iter().enumerate() {
                    acc += u[(i, j)] * b;
                }
                *o = acc;
            }
            block.copy_from_slice(&out);
        })
    }

    pub fn hadamard_all(&mut self, register: &str) -> Result<()> {
        self.controlled_hadamard_all(register, &[])
    }

    /// `H^{⊗k}` on a register, applied as a Walsh–Hadamard transform.
    pub fn controlled_hadamard_all(&mut self, register: &str, controls: &[Control<'_>]) -> Result<()> {
        let dim = self.layout.register_dim(register)?;
        let scale = 1.0 / (dim as f64).sqrt();
        self.map_blocks(&[register], controls, |block| {
            walsh_hadamard(block);
            for b in block.iter_mut() {
                *b *= scale;
            }
        })
    }

    /// Quantum Fourier transform `|x⟩ → Σ_j e^{2πi jx/D}|j⟩/√D` (or its inverse).
    pub fn qft(&mut self, register: &str, inverse: bool) -> Result<()> {
        let dim = self.layout.register_dim(register)?;
        let mut planner = FftPlanner::<f64>::new();
        // rustfft's "inverse" uses the positive exponent.
        let fft = if inverse {
            planner.plan_fft_forward(dim)
        } else {
            planner.plan_fft_inverse(dim)
        };
        let scale = 1.0 / (dim as f64).sqrt();
        self.map_blocks(&[register], &[], |block| {
            fft.process(block);
            for b in block.iter_mut() {
                *b *= scale;
            }
        })
    }

    /// `|v⟩|0⟩ → |v⟩(√(1−δ²v²)|0⟩ + δv|1⟩)` with `v = value_map(register value)`.
    pub fn controlled_amplitude_rotation(
        &mut self,
        value_register: &str,
        value_map: impl Fn(usize) -> f64,
        ancilla: &str,
        delta: f64,
        controls: &[Control<'_>],
    ) -> Result<()> {
        let (vshift, vbits) = self.layout.locate(value_register)?;
        let (ashift, abits) = self.layout.locate(ancilla)?;
        if abits != 1 {
            return Err(Error::InvalidArgument(format!("ancilla {ancilla:?} must be one qubit")));
        }
        let table: Vec<f64> = (0..1usize << vbits).map(|v| delta * value_map(v)).collect();
        if let Some(bad) = table.iter().find(|x| x.abs() > 1.0 + 1e-12) {
            return Err(Error::RotationOverflow(bad.abs()));
        }
        let (cmask, cval) = self.layout.resolve(controls)?;
        let abit = 1usize << ashift;
        if cmask & (abit | (((1 << vbits) - 1) << vshift)) != 0 {
            return Err(Error::InvalidArgument("control overlaps rotation registers".into()));
        }
        for base in 0..self.amplitudes.len() {
            if base & abit != 0 || base & cmask != cval {
                continue;
            }
            if self.amplitudes[base | abit].norm() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "ancilla {ancilla:?} is not in |0⟩"
                )));
            }
            let s = table[(base >> vshift) & ((1 << vbits) - 1)].clamp(-1.0, 1.0);
            let c = (1.0 - s * s).max(0.0).sqrt();
            let a0 = self.amplitudes[base];
            self.amplitudes[base] = a0 * c;
            self.amplitudes[base | abit] = a0 * s;
        }
        Ok(())
    }

    /// Born probabilities of each value of a register.
    pub fn probabilities(&self, register: &str) -> Result<Vec<f64>> {
        let (shift, bits) = self.layout.locate(register)?;
        let mut probs = vec![0.0; 1 << bits];
        for (i, a) in self.amplitudes.iter().enumerate() {
            probs[(i >> shift) & ((1 << bits) - 1)] += a.norm_sqr();
        }
        Ok(probs)
    }

    /// Project a register onto a basis outcome, drop it, renormalize.
    pub fn postselect(&self, register: &str, outcome: usize) -> Result<(QuantumState, f64)> {
        let (shift, bits) = self.layout.locate(register)?;
        if outcome >= 1 << bits {
            return Err(Error::InvalidArgument(format!(
                "outcome {outcome} out of range for {register:?}"
            )));
        }
        let layout = self.layout.without(&[register]);
        let mut amps = vec![Complex64::new(0.0, 0.0); layout.dim()];
        for (i, a) in self.amplitudes.iter().enumerate() {
            if (i >> shift) & ((1 << bits) - 1) == outcome {
                amps[remove_bits(i, shift, bits)] = *a;
            }
        }
        finish_postselect(layout, amps)
    }

    /// Project the joint space of `registers` onto `|target⟩`, drop those
    /// registers, renormalize.
    pub fn postselect_projector(
        &self,
        registers: &[&str],
        target: &[Complex64],
    ) -> Result<(QuantumState, f64)> {
        let (tmask, offsets) = self.layout.offsets(registers)?;
        if target.len() != offsets.len() {
            return Err(Error::Dimension(format!(
                "target of length {} for a {}-dimensional projector",
                target.len(),
                offsets.len()
            )));
        }
        let tnorm = target.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if (tnorm - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidArgument(format!("projector target norm {tnorm}")));
        }
        let layout = self.layout.without(registers);
        // Positions of the remaining bits, most significant first.
        let keep_bits: Vec<usize> = (0..self.layout.total_qubits())
            .rev()
            .filter(|b| tmask & (1 << b) == 0)
            .collect();
        let mut amps = vec![Complex64::new(0.0, 0.0); layout.dim()];
        for base in 0..self.amplitudes.len() {
            if base & tmask != 0 {
                continue;
            }
            let mut idx = 0usize;
            for &b in &keep_bits {
                idx = (idx << 1) | ((base >> b) & 1);
            }
            amps[idx] = offsets
                .iter()
                .zip(target)
                .map(|(off, t)| t.conj() * self.amplitudes[base | off])
                .sum();
        }
        finish_postselect(layout, amps)
    }

    /// Reduced density matrix on the registers not listed.
    pub fn partial_trace(&self, traced: &[&str]) -> Result<DensityMatrix> {
        let kept: Vec<&str> = self
            .layout
            .registers
            .iter()
            .map(|r| r.name.as_str())
            .filter(|n| !traced.contains(n))
            .collect();
        if kept.is_empty() {
            return Err(Error::InvalidArgument("cannot trace out every register".into()));
        }
        for t in traced {
            self.layout.locate(t)?;
        }
        let (_, kept_off) = self.layout.offsets(&kept)?;
        let (_, traced_off) = if traced.is_empty() {
            (0, vec![0])
        } else {
            self.layout.offsets(traced)?
        };
        let psi = CMat::from_fn(kept_off.len(), traced_off.len(), |i, j| {
            self.amplitudes[kept_off[i] | traced_off[j]]
        });
        let rho = &psi * psi.adjoint();
        Ok(DensityMatrix {
            matrix: rho,
            layout: Some(self.layout.without(traced)),
        })
    }

    /// Seeded shot sampling of one register; counts keyed by outcome.
    pub fn measure_samples(&self, register: &str, shots: u64, seed: u64) -> Result<BTreeMap<usize, u64>> {
        if shots == 0 {
            return Err(Error::InvalidArgument("shots must be at least 1".into()));
        }
        let probs = self.probabilities(register)?;
        sample_counts(&probs, shots, seed)
    }

    pub fn to_density(&self) -> DensityMatrix {
        let v = crate::linalg::CVec::from_column_slice(&self.amplitudes);
        DensityMatrix {
            matrix: &v * v.adjoint(),
            layout: Some(self.layout.clone()),
        }
    }

    pub fn dump(&self) -> StateDump {
        StateDump {
            layout: self.layout.clone(),
            amplitudes: self.amplitudes.iter().map(|a| [a.re, a.im]).collect(),
        }
    }
}

/// Draw `shots` outcomes from a probability table.
pub fn sample_counts(probs: &[f64], shots: u64, seed: u64) -> Result<BTreeMap<usize, u64>> {
    let dist = WeightedIndex::new(probs.iter().map(|p| p.max(0.0)))
        .map_err(|e| Error::InvalidArgument(format!("cannot sample: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = BTreeMap::new();
    for _ in 0..shots {
        *counts.entry(dist.sample(&mut rng)).or_insert(0) += 1;
    }
    Ok(counts)
}

fn finish_postselect(layout: RegisterLayout, mut amps: Vec<Complex64>) -> Result<(QuantumState, f64)> {
    let prob: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
    if prob < NULL_BRANCH_TOL {
        return Err(Error::NullBranch(prob));
    }
    let scale = 1.0 / prob.sqrt();
    for a in amps.iter_mut() {
        *a *= scale;
    }
    Ok((QuantumState { amplitudes: amps, layout }, prob))
}

/// Unnormalized in-place Walsh–Hadamard transform.
fn walsh_hadamard(v: &mut [Complex64]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for i in start..start + h {
                let (a, b) = (v[i], v[i + h]);
                v[i] = a + b;
                v[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Hermitian, unit-trace, positive semi-definite matrix, optionally carrying a
/// register layout (required for register-addressed operations).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: CMat,
    layout: Option<RegisterLayout>,
}

impl DensityMatrix {
    /// Validate Hermiticity, unit trace and positivity at 1e−10.
    pub fn new(matrix: CMat) -> Result<Self> {
        let dm = Self { matrix, layout: None };
        dm.validate(1e-10)?;
        Ok(dm)
    }

    pub fn with_layout(matrix: CMat, layout: RegisterLayout) -> Result<Self> {
        if matrix.nrows() != layout.dim() {
            return Err(Error::Dimension("matrix does not match layout".into()));
        }
        let dm = Self {
            matrix,
            layout: Some(layout),
        };
        dm.validate(1e-10)?;
        Ok(dm)
    }

    /// Skip validation; used for intermediate channel outputs.
    pub fn new_unchecked(matrix: CMat, layout: Option<RegisterLayout>) -> Self {
        Self { matrix, layout }
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let m = &self.matrix;
        if !m.is_square() {
            return Err(Error::Dimension("density matrix must be square".into()));
        }
        let herm = crate::linalg::max_abs_diff(m, &m.adjoint());
        if herm > tol {
            return Err(Error::InvalidArgument(format!("not Hermitian (deviation {herm:.3e})")));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > tol || tr.im.abs() > tol {
            return Err(Error::InvalidArgument(format!("trace {tr} is not 1")));
        }
        let min = self.min_eigenvalue();
        if min < -tol {
            return Err(Error::InvalidArgument(format!("negative eigenvalue {min:.3e}")));
        }
        Ok(())
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMat {
        self.matrix
    }

    pub fn layout(&self) -> Option<&RegisterLayout> {
        self.layout.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> Complex64 {
        self.matrix.trace()
    }

    pub fn purity(&self) -> f64 {
        (&self.matrix * &self.matrix).trace().re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.matrix + self.matrix.adjoint()) * Complex64::new(0.5, 0.0);
        herm_eigen(&h).0.first().copied().unwrap_or(0.0)
    }

    /// `tr(ρ σ)`.
    pub fn overlap(&self, other: &DensityMatrix) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension("density matrices of different dimension".into()));
        }
        Ok((&self.matrix * &other.matrix).trace().re)
    }

    /// `⟨ψ|ρ|ψ⟩`.
    pub fn expectation(&self, psi: &[Complex64]) -> Result<f64> {
        if psi.len() != self.dim() {
            return Err(Error::Dimension("state and density matrix differ in dimension".into()));
        }
        let v = crate::linalg::CVec::from_column_slice(psi);
        Ok((v.adjoint() * &self.matrix * &v)[(0, 0)].re)
    }

    fn require_layout(&self) -> Result<&RegisterLayout> {
        self.layout
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("density matrix has no register layout".into()))
    }

    /// `ρ → U ρ U†` on the target registers under the controls.
    pub fn apply_controlled_unitary(
        &mut self,
        u: &CMat,
        targets: &[&str],
        controls: &[Control<'_>],
    ) -> Result<()> {
        let layout = self.require_layout()?.clone();
        let dev = unitarity_deviation(u);
        if dev > UNITARY_TOL {
            return Err(Error::NonUnitary(dev));
        }
        let n = self.dim();
        // Left multiplication acts on each column as a state vector.
        let mut col = QuantumState {
            amplitudes: vec![Complex64::new(0.0, 0.0); n],
            layout: layout.clone(),
        };
        for j in 0..n {
            for i in 0..n {
                col.amplitudes[i] = self.matrix[(i, j)];
            }
            col.apply_controlled_unitary(u, targets, controls)?;
            for i in 0..n {
                self.matrix[(i, j)] = col.amplitudes[i];
            }
        }
        // Right multiplication by U† acts on each row through conj(U).
        let u_conj = u.map(|z| z.conj());
        for i in 0..n {
            for j in 0..n {
                col.amplitudes[j] = self.matrix[(i, j)];
            }
            col.apply_controlled_unitary(&u_conj, targets, controls)?;
            for j in 0..n {
                self.matrix[(i, j)] = col.amplitudes[j];
            }
        }
        Ok(())
    }

    /// Apply a map to every (row-block, column-block) pair of the target
    /// register, where `f(row_bit, col_bit, block)` sees the value of one
    /// control bit on each side. This expresses controlled channels whose
    /// action on coherences depends on both control values.
    pub fn apply_block_map(
        &mut self,
        target: &str,
        control: (&str, usize),
        mut f: impl FnMut(bool, bool, &CMat) -> CMat,
    ) -> Result<()> {
        let layout = self.require_layout()?.clone();
        let (tmask, offsets) = layout.offsets(&[target])?;
        let (cshift, cbits) = layout.locate(control.0)?;
        if control.1 >= cbits {
            return Err(Error::InvalidArgument("control bit out of range".into()));
        }
        let cbit = 1usize << (cshift + control.1);
        let d = offsets.len();
        let bases: Vec<usize> = (0..self.dim()).filter(|b| b & tmask == 0).collect();
        let mut block = CMat::zeros(d, d);
        for &rb in &bases {
            for &cb in &bases {
                for (i, oi) in offsets.iter().enumerate() {
                    for (j, oj) in offsets.iter().enumerate() {
                        block[(i, j)] = self.matrix[(rb | oi, cb | oj)];
                    }
                }
                let out = f(rb & cbit != 0, cb & cbit != 0, &block);
                for (i, oi) in offsets.iter().enumerate() {
                    for (j, oj) in offsets.iter().enumerate() {
                        self.matrix[(rb | oi, cb | oj)] = out[(i, j)];
                    }
                }
            }
        }
        Ok(())
    }

    /// Project a register onto a basis outcome, drop it, renormalize.
    pub fn postselect(&self, register: &str, outcome: usize) -> Result<(DensityMatrix, f64)> {
        let layout = self.require_layout()?;
        let (shift, bits) = layout.locate(register)?;
        if outcome >= 1 << bits {
            return Err(Error::InvalidArgument(format!("outcome {outcome} out of range")));
        }
        let keep: Vec<usize> = (0..self.dim())
            .filter(|i| (i >> shift) & ((1 << bits) - 1) == outcome)
            .collect();
        let sub = CMat::from_fn(keep.len(), keep.len(), |i, j| self.matrix[(keep[i], keep[j])]);
        let prob = sub.trace().re;
        if prob < NULL_BRANCH_TOL {
            return Err(Error::NullBranch(prob));
        }
        Ok((
            DensityMatrix {
                matrix: sub / Complex64::new(prob, 0.0),
                layout: Some(layout.without(&[register])),
            },
            prob,
        ))
    }

    pub fn partial_trace(&self, traced: &[&str]) -> Result<DensityMatrix> {
        let layout = self.require_layout()?;
        let kept: Vec<&str> = layout
            .registers
            .iter()
            .map(|r| r.name.as_str())
            .filter(|n| !traced.contains(n))
            .collect();
        if kept.is_empty() {
            return Err(Error::InvalidArgument("cannot trace out every register".into()));
        }
        let (_, kept_off) = layout.offsets(&kept)?;
        let (_, traced_off) = if traced.is_empty() {
            (0, vec![0])
        } else {
            layout.offsets(traced)?
        };
        let out = CMat::from_fn(kept_off.len(), kept_off.len(), |i, j| {
            traced_off
                .iter()
                .map(|t| self.matrix[(kept_off[i] | t, kept_off[j] | t)])
                .sum()
        });
        Ok(DensityMatrix {
            matrix: out,
            layout: Some(layout.without(traced)),
        })
    }

    /// Eigenvector of the largest eigenvalue.
    pub fn dominant_eigenvector(&self) -> (f64, Vec<Complex64>) {
        let h = (&self.matrix + self.matrix.adjoint()) * Complex64::new(0.5, 0.0);
        let (values, vectors) = herm_eigen(&h);
        let last = values.len() - 1;
        (values[last], vectors.column(last).iter().copied().collect())
    }

    pub fn dump(&self) -> serde_json::Value {
        serde_json::json!({
            "layout": self.layout,
            "real": self.matrix.row_iter().map(|r| r.iter().map(|z| z.re).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "imag": self.matrix.row_iter().map(|r| r.iter().map(|z| z.im).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, max_abs_diff};

    fn layout(regs: &[(&str, usize)]) -> RegisterLayout {
        RegisterLayout::new(regs).unwrap()
    }

    fn close(a: &[Complex64], b: &[Complex64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).norm() < tol)
    }

    fn pauli_x() -> CMat {
        CMat::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)])
    }

    #[test]
    fn allocation() {
        let s = QuantumState::allocate(layout(&[("a", 1)]));
        assert_eq!(s.amplitudes(), &[c(1.0), c(0.0)]);
        let s = QuantumState::allocate(layout(&[("a", 2), ("b", 1)]));
        assert_eq!(s.amplitudes().len(), 8);
        assert_eq!(s.amplitudes()[0], c(1.0));
        assert!(matches!(
            RegisterLayout::with_cap(&[("a", 25)], 24),
            Err(Error::QubitCap { requested: 25, cap: 24 })
        ));
        assert!(RegisterLayout::new(&[("a", 1), ("a", 1)]).is_err());
    }

    #[test]
    fn pauli_x_and_identity() {
        let mut s = QuantumState::allocate(layout(&[("a", 1)]));
        s.apply_unitary(&CMat::identity(2, 2), &["a"]).unwrap();
        assert_eq!(s.amplitudes(), &[c(1.0), c(0.0)]);
        s.apply_unitary(&pauli_x(), &["a"]).unwrap();
        assert_eq!(s.amplitudes(), &[c(0.0), c(1.0)]);
        let bad = CMat::from_row_slice(2, 2, &[c(1.0), c(1.0), c(0.0), c(1.0)]);
        assert!(matches!(s.apply_unitary(&bad, &["a"]), Err(Error::NonUnitary(_))));
        assert!(matches!(
            s.apply_unitary(&CMat::identity(4, 4), &["a"]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn big_endian_register_order() {
        // X on the second register flips the least significant bit.
        let mut s = QuantumState::allocate(layout(&[("a", 1), ("b", 1)]));
        s.apply_unitary(&pauli_x(), &["b"]).unwrap();
        assert_eq!(s.amplitudes()[1], c(1.0));
        assert_eq!(s.layout().value_of(1, "b").unwrap(), 1);
    }

    #[test]
    fn hadamard_examples() {
        let mut s = QuantumState::allocate(layout(&[("a", 1)]));
        s.hadamard_all("a").unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(s.amplitudes(), &[c(h), c(h)], 1e-15));
        let mut s = QuantumState::allocate(layout(&[("a", 2)]));
        s.hadamard_all("a").unwrap();
        assert!(close(s.amplitudes(), &[c(0.5); 4], 1e-15));
        let before = s.clone();
        s.hadamard_all("a").unwrap();
        s.hadamard_all("a").unwrap();
        assert!(close(s.amplitudes(), before.amplitudes(), 1e-12));
        assert!(matches!(s.hadamard_all("zz"), Err(Error::UnknownRegister(_))));
    }

    #[test]
    fn rotation_examples() {
        let mut s = QuantumState::allocate(layout(&[("v", 2), ("anc", 1)]));
        s.controlled_amplitude_rotation("v", |_| 0.0, "anc", 1.0, &[]).unwrap();
        assert_eq!(s.amplitudes()[0], c(1.0));

        let mut s = QuantumState::allocate(layout(&[("v", 1), ("anc", 1)]));
        s.controlled_amplitude_rotation("v", |_| 0.5, "anc", 2.0, &[]).unwrap();
        assert!((s.amplitudes()[1] - c(1.0)).norm() < 1e-15);

        let mut s = QuantumState::allocate(layout(&[("v", 1), ("anc", 1)]));
        s.controlled_amplitude_rotation("v", |_| 0.6, "anc", 1.0, &[]).unwrap();
        assert!(close(&s.amplitudes()[..2], &[c(0.8), c(0.6)], 1e-15));

        let mut s = QuantumState::allocate(layout(&[("v", 1), ("anc", 1)]));
        assert!(matches!(
            s.controlled_amplitude_rotation("v", |_| 0.6, "anc", 2.0, &[]),
            Err(Error::RotationOverflow(_))
        ));
    }

    #[test]
    fn postselect_examples() {
        let mut s = QuantumState::allocate(layout(&[("a", 1)]));
        s.hadamard_all("a").unwrap();
        let two = QuantumState::allocate(layout(&[("a", 1), ("b", 1)]));
        let (_, p) = s.postselect("a", 1).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
        let mut prod = two.clone();
        prod.hadamard_all("b").unwrap();
        let (rest, p) = prod.postselect("a", 0).unwrap();
        assert!((p - 1.0).abs() < 1e-15);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(rest.amplitudes(), &[c(h), c(h)], 1e-15));
        assert!(matches!(prod.postselect("a", 1), Err(Error::NullBranch(_))));
    }

    #[test]
    fn projector_postselection() {
        let mut s = QuantumState::allocate(layout(&[("a", 1), ("b", 1)]));
        s.hadamard_all("a").unwrap();
        s.hadamard_all("b").unwrap();
        let (by_basis, p1) = s.postselect("a", 1).unwrap();
        let (by_proj, p2) = s.postselect_projector(&["a"], &[c(0.0), c(1.0)]).unwrap();
        assert!((p1 - p2).abs() < 1e-15);
        assert!(close(by_basis.amplitudes(), by_proj.amplitudes(), 1e-15));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(matches!(
            s.postselect_projector(&["a"], &[c(h), c(-h)]),
            Err(Error::NullBranch(_))
        ));
    }

    #[test]
    fn partial_trace_examples() {
        let mut prod = QuantumState::allocate(layout(&[("a", 1), ("b", 1)]));
        prod.hadamard_all("b").unwrap();
        let rho = prod.partial_trace(&["a"]).unwrap();
        assert!((rho.purity() - 1.0).abs() < 1e-12);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let bell = QuantumState::from_amplitudes(
            layout(&[("a", 1), ("b", 1)]),
            vec![c(h), c(0.0), c(0.0), c(h)],
        )
        .unwrap();
        let rho = bell.partial_trace(&["b"]).unwrap();
        assert!(max_abs_diff(rho.matrix(), &(CMat::identity(2, 2) * c(0.5))) < 1e-15);
        assert!(bell.partial_trace(&["a", "b"]).is_err());
    }

    #[test]
    fn sampling_examples() {
        let basis = QuantumState::basis(layout(&[("a", 2)]), 2).unwrap();
        let counts = basis.measure_samples("a", 1000, 1).unwrap();
        assert_eq!(counts.len(), 1);
        assert_eq!(counts[&2], 1000);

        let mut plus = QuantumState::allocate(layout(&[("a", 1)]));
        plus.hadamard_all("a").unwrap();
        let counts = plus.measure_samples("a", 100_000, 7).unwrap();
        let sigma = (100_000.0f64 * 0.25).sqrt();
        for k in 0..2 {
            assert!((counts[&k] as f64 - 50_000.0).abs() < 5.0 * sigma);
        }
        assert_eq!(counts.values().sum::<u64>(), 100_000);
        assert_eq!(counts, plus.measure_samples("a", 100_000, 7).unwrap());
        assert!(plus.measure_samples("a", 0, 7).is_err());
    }

    #[test]
    fn qft_round_trip_and_phase_readout() {
        let n = 3;
        let dim = 1 << n;
        let theta = 3.0 / 8.0;
        let amps: Vec<Complex64> = (0..dim)
            .map(|j| (Complex64::new(0.0, -2.0 * std::f64::consts::PI * j as f64 * theta)).exp() / (dim as f64).sqrt())
            .collect();
        let mut s = QuantumState::from_amplitudes(layout(&[("p", n)]), amps.clone()).unwrap();
        s.qft("p", false).unwrap();
        let probs = s.probabilities("p").unwrap();
        assert!((probs[3] - 1.0).abs() < 1e-12);
        s.qft("p", true).unwrap();
        assert!(close(s.amplitudes(), &amps, 1e-12));
    }

    #[test]
    fn density_unitary_and_postselect() {
        let mut s = QuantumState::allocate(layout(&[("a", 1), ("b", 1)]));
        s.hadamard_all("a").unwrap();
        let mut rho = s.to_density();
        rho.apply_controlled_unitary(&pauli_x(), &["b"], &[Control::Equals("a", 1)])
            .unwrap();
        let mut s2 = s.clone();
        s2.apply_controlled_unitary(&pauli_x(), &["b"], &[Control::Equals("a", 1)])
            .unwrap();
        assert!(max_abs_diff(rho.matrix(), s2.to_density().matrix()) < 1e-15);
        let (post, p) = rho.postselect("a", 1).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
        assert!((post.matrix()[(1, 1)] - c(1.0)).norm() < 1e-15);
        rho.validate(1e-10).unwrap();
    }
}
