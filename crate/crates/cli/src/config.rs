use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qfolio::hamiltonian_sim::EvolutionMethod;
use qfolio::market_data::FactorModelSpec;
use qfolio::portfolio_qp::BudgetMode;
use serde::{Deserialize, Serialize};

use crate::Cli;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_assets: usize,
    /// Number of price ticks; the returns panel has `n_times − dt_period` periods.
    pub n_times: usize,
    pub n_factors: usize,
    pub loadings_scale: f64,
    pub idiosyncratic_scale: f64,
    pub drift: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_assets: 4,
            n_times: 33,
            n_factors: 1,
            loadings_scale: 0.01,
            idiosyncratic_scale: 0.005,
            drift: Vec::new(),
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn factor_model(&self) -> FactorModelSpec {
        FactorModelSpec {
            n_factors: self.n_factors,
            loadings_scale: self.loadings_scale,
            idiosyncratic_scale: self.idiosyncratic_scale,
            drift: self.drift.clone(),
            seed: self.seed,
        }
    }

    /// `NxT`, e.g. `4x33`.
    fn parse_shape(s: &str) -> Result<(usize, usize)> {
        let (n, t) = s
            .split_once(['x', 'X'])
            .with_context(|| format!("--synthetic expects NxT, got {s:?}"))?;
        Ok((n.trim().parse()?, t.trim().parse()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub dt_period: usize,
    pub mu_min: Option<f64>,
    pub mu_max: Option<f64>,
    pub mu_steps: usize,
    /// Target return for `solve`.
    pub mu: Option<f64>,
    pub xi: f64,
    pub budget_mode: BudgetMode,
    /// Rescale the return and budget rows to `trΣ` before the quantum solve.
    pub balance_constraints: bool,
    /// `None` picks 1.1 times the largest inverse eigenvalue gap over the grid.
    pub kappa: Option<f64>,
    pub phase_bits: usize,
    pub backend: EvolutionMethod,
    pub t0: Option<f64>,
    pub trotter_steps: usize,
    pub density_copies: usize,
    /// Swap-test shots; 0 reads out exactly.
    pub shots: u64,
    /// Computational-basis samples for the long/short estimator in `solve`.
    pub samples: u64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            synthetic: None,
            dt_period: 1,
            mu_min: None,
            mu_max: None,
            mu_steps: 5,
            mu: None,
            xi: 1.0,
            budget_mode: BudgetMode::Unit,
            balance_constraints: true,
            kappa: None,
            phase_bits: 10,
            backend: EvolutionMethod::Exact,
            t0: None,
            trotter_steps: 32,
            density_copies: 16,
            shots: 0,
            samples: 10_000,
            seed: 0,
            out: PathBuf::from("qfolio-out"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Config file (if any) with command-line flags applied on top.
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(p) = &cli.input {
            cfg.input = Some(p.clone());
            cfg.synthetic = None;
        }
        if let Some(shape) = &cli.synthetic {
            let (n, t) = SyntheticSpec::parse_shape(shape)?;
            let mut spec = cfg.synthetic.take().unwrap_or_default();
            spec.n_assets = n;
            spec.n_times = t;
            cfg.synthetic = Some(spec);
            cfg.input = None;
        }
        if let Some(k) = cli.factors {
            cfg.synthetic.get_or_insert_with(SyntheticSpec::default).n_factors = k;
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = cli.$field.clone() {
                    cfg.$field = v.into();
                }
            )*};
        }
        set!(dt_period, mu_steps, xi, budget_mode, phase_bits, backend, trotter_steps, density_copies, shots, samples, seed, out);
        if cli.mu_min.is_some() {
            cfg.mu_min = cli.mu_min;
        }
        if cli.mu_max.is_some() {
            cfg.mu_max = cli.mu_max;
        }
        if cli.mu.is_some() {
            cfg.mu = cli.mu;
        }
        if cli.no_balance {
            cfg.balance_constraints = false;
        }
        if cli.kappa.is_some() {
            cfg.kappa = cli.kappa;
        }
        if cli.t0.is_some() {
            cfg.t0 = cli.t0;
        }
        if cfg.input.is_none() && cfg.synthetic.is_none() {
            cfg.synthetic = Some(SyntheticSpec::default());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_some() && self.synthetic.is_some() {
            bail!("`input` and `synthetic` are mutually exclusive");
        }
        if self.dt_period == 0 {
            bail!("dt_period must be at least 1");
        }
        if self.mu_steps == 0 {
            bail!("mu_steps must be at least 1");
        }
        if let (Some(lo), Some(hi)) = (self.mu_min, self.mu_max) {
            if !(lo <= hi) {
                bail!("mu_min ({lo}) must not exceed mu_max ({hi})");
            }
        }
        for (name, v) in [("mu_min", self.mu_min), ("mu_max", self.mu_max), ("mu", self.mu), ("t0", self.t0)] {
            if let Some(v) = v {
                if !v.is_finite() {
                    bail!("{name} must be finite");
                }
            }
        }
        if !self.xi.is_finite() || self.xi == 0.0 {
            bail!("xi must be finite and nonzero");
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0 && k.is_finite()) {
                bail!("kappa must be positive");
            }
        }
        if let Some(t0) = self.t0 {
            if t0 <= 0.0 {
                bail!("t0 must be positive");
            }
        }
        if !(3..=12).contains(&self.phase_bits) {
            bail!("phase_bits must be between 3 and 12");
        }
        if self.trotter_steps == 0 || self.density_copies == 0 {
            bail!("trotter_steps and density_copies must be at least 1");
        }
        if self.samples == 0 {
            bail!("samples must be at least 1");
        }
        if let Some(s) = &self.synthetic {
            if s.n_assets < 2 || s.n_times < 3 {
                bail!("synthetic panel needs at least 2 assets and 3 ticks");
            }
            if s.n_factors == 0 || s.n_factors > s.n_assets {
                bail!("synthetic n_factors must be in 1..={}", s.n_assets);
            }
        }
        Ok(())
    }

    pub fn mu_grid(&self, lo_default: f64, hi_default: f64) -> Vec<f64> {
        let lo = self.mu_min.unwrap_or(lo_default);
        let hi = self.mu_max.unwrap_or(hi_default);
        if self.mu_steps == 1 {
            return vec![lo];
        }
        let step = (hi - lo) / (self.mu_steps - 1) as f64;
        (0..self.mu_steps).map(|i| lo + step * i as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let cfg: RunConfig = toml::from_str(
            "mu_min = 0.1\nmu_max = 0.2\nbackend = \"trotter\"\nbudget_mode = \"prices\"\n[synthetic]\nn_assets = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.backend, EvolutionMethod::Trotter);
        assert_eq!(cfg.synthetic.as_ref().unwrap().n_assets, 3);
        assert_eq!(cfg.synthetic.as_ref().unwrap().n_times, 33);
        let back: RunConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig {
            input: Some("a.csv".into()),
            synthetic: Some(SyntheticSpec::default()),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.synthetic = None;
        assert!(cfg.validate().is_ok());
        cfg.phase_bits = 2;
        assert!(cfg.validate().is_err());
        cfg.phase_bits = 10;
        cfg.mu_min = Some(1.0);
        cfg.mu_max = Some(0.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grids() {
        let cfg = RunConfig {
            mu_min: Some(0.0),
            mu_max: Some(1.0),
            ..RunConfig::default()
        };
        assert_eq!(cfg.mu_grid(5.0, 6.0), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let cfg = RunConfig {
            mu_steps: 1,
            ..RunConfig::default()
        };
        assert_eq!(cfg.mu_grid(0.3, 0.9), vec![0.3]);
        assert_eq!(SyntheticSpec::parse_shape("4x33").unwrap(), (4, 33));
        assert!(SyntheticSpec::parse_shape("4,33").is_err());
    }
}
