use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, pow2_ceil, CMat};
use crate::qsim::{Control, QuantumState, RegisterLayout};

/// Binary tree of subnorms over a vector: leaves hold `v_i²`, every parent
/// holds the sum of its two children, and the root holds `‖v‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KPTree {
    depth: usize,
    /// Level-order node values, root level first.
    levels: Vec<Vec<f64>>,
    signs: Vec<i8>,
}

impl KPTree {
    pub fn build(v: &[f64]) -> Result<Self> {
        Self::build_with(v, None)
    }

    /// Same as [`KPTree::build`] but with leaf squares rounded to
    /// `frac_bits` fractional bits.
    pub fn build_quantized(v: &[f64], frac_bits: u32) -> Result<Self> {
        Self::build_with(v, Some(frac_bits))
    }

    fn build_with(v: &[f64], frac_bits: Option<u32>) -> Result<Self> {
        if v.is_empty() || v.iter().all(|x| *x == 0.0) {
            return Err(Error::InvalidArgument("cannot build a tree over a zero vector".into()));
        }
        let (width, depth) = pow2_ceil(v.len());
        let mut leaves = vec![0.0; width];
        for (l, x) in leaves.iter_mut().zip(v) {
            *l = match frac_bits {
                None => x * x,
                Some(b) => {
                    let scale = (b as f64).exp2();
                    (x * x * scale).round() / scale
                }
            };
        }
        let signs = v.iter().map(|x| if *x < 0.0 { -1 } else { 1 }).collect();
        let mut levels = vec![leaves];
        for _ in 0..depth {
            let below = levels.last().expect("at least one level");
            let above = below.chunks(2).map(|p| p[0] + p[1]).collect();
            levels.push(above);
        }
        levels.reverse();
        Ok(Self { depth, levels, signs })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn root(&self) -> f64 {
        self.levels[0][0]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn leaves(&self) -> &[f64] {
        &self.levels[self.depth]
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    /// Set `v_index` and refresh the `depth + 1` nodes on its root path.
    pub fn update(&mut self, index: usize, value: f64) -> Result<()> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "index {index} out of range for a tree over {} entries",
                self.len()
            )));
        }
        self.signs[index] = if value < 0.0 { -1 } else { 1 };
        self.levels[self.depth][index] = value * value;
        let mut pos = index;
        for level in (0..self.depth).rev() {
            pos /= 2;
            let below = &self.levels[level + 1];
            let sum = below[2 * pos] + below[2 * pos + 1];
            self.levels[level][pos] = sum;
        }
        Ok(())
    }

    /// Largest relative violation of the parent = sum-of-children rule.
    pub fn consistency_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for level in 0..self.depth {
            for (p, parent) in self.levels[level].iter().enumerate() {
                let sum = self.levels[level + 1][2 * p] + self.levels[level + 1][2 * p + 1];
                let scale = parent.abs().max(sum.abs()).max(f64::MIN_POSITIVE);
                worst = worst.max((parent - sum).abs() / scale);
            }
        }
        worst
    }

    fn qubit_names(&self) -> Vec<String> {
        (0..self.depth).map(|k| format!("q{k}")).collect()
    }

    fn cascade(&self, state: &mut QuantumState) -> Result<()> {
        let names = self.qubit_names();
        for level in 0..self.depth {
            for (prefix, &node) in self.levels[level].iter().enumerate() {
                let left = self.levels[level + 1][2 * prefix];
                let cos = if node > 0.0 { (left / node).clamp(0.0, 1.0).sqrt() } else { 1.0 };
                let sin = (1.0 - cos * cos).max(0.0).sqrt();
                let ry = CMat::from_row_slice(2, 2, &[c(cos), c(-sin), c(sin), c(cos)]);
                let controls: Vec<Control<'_>> = (0..level)
                    .map(|j| Control::Equals(names[j].as_str(), (prefix >> (level - 1 - j)) & 1))
                    .collect();
                state.apply_controlled_unitary(&ry, &[names[level].as_str()], &controls)?;
            }
        }
        Ok(())
    }

    fn run(&self, input_index: usize) -> Result<QuantumState> {
        let names = self.qubit_names();
        let spec: Vec<(&str, usize)> = names.iter().map(|n| (n.as_str(), 1)).collect();
        let mut state = QuantumState::basis(RegisterLayout::new(&spec)?, input_index)?;
        self.cascade(&mut state)?;
        let mut state = state.relabel(RegisterLayout::new(&[("index", self.depth)])?)?;
        let signs = &self.signs;
        state.map_blocks(&["index"], &[], |block| {
            for (a, s) in block.iter_mut().zip(signs) {
                *a *= *s as f64;
            }
        })?;
        Ok(state)
    }

    /// Deterministic preparation of `Σ_i sign_i |v_i| |i⟩ / ‖v‖` on a single
    /// register named `index`.
    pub fn prepare(&self) -> Result<QuantumState> {
        if self.root() <= 0.0 {
            return Err(Error::NullBranch(0.0));
        }
        self.run(0)
    }

    /// Full matrix of the rotation cascade followed by the sign diagonal;
    /// its first column is the prepared state.
    pub fn preparation_unitary(&self) -> Result<CMat> {
        let dim = 1usize << self.depth;
        let mut u = CMat::zeros(dim, dim);
        for j in 0..dim {
            let s = self.run(j)?;
            for (i, a) in s.amplitudes().iter().enumerate() {
                u[(i, j)] = *a;
            }
        }
        Ok(u)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
