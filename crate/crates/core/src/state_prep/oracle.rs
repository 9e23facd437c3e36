use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{pow2_ceil, RMat};
use crate::qsim::{Control, QuantumState};

/// How stored values are represented in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Values stored exactly.
    #[default]
    Exact,
    /// Values rounded to `frac_bits` fractional bits.
    FixedPoint { frac_bits: u32 },
}

impl Precision {
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Precision::Exact => x,
            Precision::FixedPoint { frac_bits } => {
                let scale = (frac_bits as f64).exp2();
                (x * scale).round() / scale
            }
        }
    }

    /// Worst-case per-entry rounding error.
    pub fn max_error(self) -> f64 {
        match self {
            Precision::Exact => 0.0,
            Precision::FixedPoint { frac_bits } => (-(frac_bits as f64) - 1.0).exp2(),
        }
    }
}

/// Simulated quantum memory: `Σ α_i |i⟩|0⟩ → Σ α_i |i⟩|d_i⟩`.
///
/// The data register holds a code word per distinct stored value rather than
/// the raw fixed-point bits, so wide words (e.g. 32 fractional bits) remain
/// simulable; code 0 is reserved for the value 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QramOracle {
    values: Vec<f64>,
    codes: Vec<usize>,
    codebook: Vec<f64>,
    precision: Precision,
}

impl QramOracle {
    pub fn new(raw: &[f64], precision: Precision) -> Self {
        let values: Vec<f64> = raw
            .iter()
            .map(|&x| {
                let q = precision.quantize(x);
                if q == 0.0 {
                    0.0
                } else {
                    q
                }
            })
            .collect();
        let mut distinct: Vec<f64> = values.iter().copied().filter(|v| *v != 0.0).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut codebook = Vec::with_capacity(distinct.len() + 1);
        codebook.push(0.0);
        codebook.extend(distinct);
        let codes = values
            .iter()
            .map(|v| {
                if *v == 0.0 {
                    0
                } else {
                    codebook[1..]
                        .binary_search_by(|probe| probe.total_cmp(v))
                        .map(|k| k + 1)
                        .expect("value present in codebook")
                }
            })
            .collect();
        Self {
            values,
            codes,
            codebook,
            precision,
        }
    }

    /// Table of the elements `Σ_jk`, indexed `j·N_pad + k`.
    pub fn covariance(sigma: &RMat, precision: Precision) -> Self {
        let n = sigma.nrows();
        let (np, _) = pow2_ceil(n);
        let mut table = vec![0.0; np * np];
        for j in 0..n {
            for k in 0..n {
                table[j * np + k] = sigma[(j, k)];
            }
        }
        Self::new(&table, precision)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Stored (possibly quantized) value `d_i`; zero beyond the table.
    pub fn value(&self, index: usize) -> f64 {
        self.values.get(index).copied().unwrap_or(0.0)
    }

    pub fn code(&self, index: usize) -> usize {
        self.codes.get(index).copied().unwrap_or(0)
    }

    pub fn decode(&self, code: usize) -> f64 {
        self.codebook.get(code).copied().unwrap_or(0.0)
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Qubits needed by the simulated data register.
    pub fn data_qubits(&self) -> usize {
        pow2_ceil(self.codebook.len()).1.max(1)
    }

    /// Nominal memory word width `m`.
    pub fn word_bits(&self) -> usize {
        match self.precision {
            Precision::Exact => self.data_qubits(),
            Precision::FixedPoint { frac_bits } => {
                let max = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let int_bits = if max >= 1.0 { max.log2().floor() as usize + 1 } else { 0 };
                1 + int_bits + frac_bits as usize
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn xor_query(
    oracle: &QramOracle,
    state: &mut QuantumState,
    index_registers: &[&str],
    data_register: &str,
    controls: &[Control<'_>],
    expect_loaded: bool,
) -> Result<()> {
    let layout = state.layout().clone();
    let (dshift, dbits) = layout.locate(data_register)?;
    if dbits < oracle.data_qubits() {
        return Err(Error::Dimension(format!(
            "data register {data_register:?} has {dbits} qubits, oracle needs {}",
            oracle.data_qubits()
        )));
    }
    let mut index_fields = Vec::new();
    for r in index_registers {
        index_fields.push(layout.locate(r)?);
    }
    // Validate the branch contents first so a failed call leaves the state untouched.
    let probe = |state: &QuantumState| -> Result<Vec<(usize, usize)>> {
        let mut moves = Vec::new();
        let (cmask, cval) = layout.resolve(controls)?;
        for (i, a) in state.amplitudes().iter().enumerate() {
            if i & cmask != cval {
                continue;
            }
            let mut idx = 0usize;
            for &(shift, bits) in &index_fields {
                idx = (idx << bits) | ((i >> shift) & ((1 << bits) - 1));
            }
            let code = oracle.code(idx);
            let held = (i >> dshift) & ((1 << dbits) - 1);
            if a.norm_sqr() > 0.0 {
                let ok = if expect_loaded { held == code } else { held == 0 };
                if !ok {
                    return Err(Error::RegisterOccupied);
                }
            }
            if code != 0 {
                moves.push((i, i ^ (code << dshift)));
            }
        }
        Ok(moves)
    };
    let moves = probe(state)?;
    let mut amps: Vec<Complex64> = state.amplitudes().to_vec();
    for &(from, to) in &moves {
        amps[to] = state.amplitudes()[from];
    }
    *state = QuantumState::from_amplitudes(layout, amps)?;
    Ok(())
}

/// Load `|d_i⟩` into an empty data register in every (controlled) branch.
pub fn oracle_query(
    oracle: &QramOracle,
    state: &mut QuantumState,
    index_registers: &[&str],
    data_register: &str,
    controls: &[Control<'_>],
) -> Result<()> {
    xor_query(oracle, state, index_registers, data_register, controls, false)
}

/// Inverse of [`oracle_query`]: clears a data register holding `|d_i⟩`.
pub fn oracle_uncompute(
    oracle: &QramOracle,
    state: &mut QuantumState,
    index_registers: &[&str],
    data_register: &str,
    controls: &[Control<'_>],
) -> Result<()> {
    xor_query(oracle, state, index_registers, data_register, controls, true)
}

/// Column positions of the nonzero elements of each row of a sparse matrix:
/// `|i, l⟩ → |i, g(i, l)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityOracle {
    columns: Vec<Vec<usize>>,
}

impl SparsityOracle {
    pub fn new(sigma: &RMat, zero_tol: f64) -> Self {
        let columns = (0..sigma.nrows())
            .map(|i| {
                (0..sigma.ncols())
                    .filter(|&k| sigma[(i, k)].abs() > zero_tol)
                    .collect()
            })
            .collect();
        Self { columns }
    }

    /// Maximum number of nonzeros in any row.
    pub fn sparsity(&self) -> usize {
        self.columns.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Column of the `l`-th nonzero of row `i`.
    pub fn column(&self, i: usize, l: usize) -> Option<usize> {
        self.columns.get(i)?.get(l).copied()
    }

    /// The same map as a memory table indexed `i·s_pad + l`; slots past a
    /// row's last nonzero hold 0.
    pub fn to_qram(&self) -> QramOracle {
        let (sp, _) = pow2_ceil(self.sparsity().max(1));
        let mut table = vec![0.0; self.columns.len() * sp];
        for (i, cols) in self.columns.iter().enumerate() {
            for (l, &c) in cols.iter().enumerate() {
                table[i * sp + l] = c as f64;
            }
        }
        QramOracle::new(&table, Precision::Exact)
    }
}
