use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use qfolio::hhl::{extract_w, hhl_solve, HHLConfig};
use qfolio::linalg::{pow2_ceil, sym_eigen, RMat};
use qfolio::market_data::{compute_returns, generate_synthetic, load_prices, ReturnsPanel};
use qfolio::portfolio_qp::{
    budget_vector, build_kkt, solve_exact, BudgetMode, ConstraintScaling, KKTSystem, PINV_REL_CUTOFF,
};
use qfolio::readout::{
    covariance_density_from_sigma, frontier_quantum, risk_estimate, sample_portfolio_with_sigma,
    sampling_error_report, FrontierProblem,
};
use qfolio::state_prep::{
    covariance_density, estimate_trace_sigma, prepare_chi, prepare_chi_tilde, prepare_r_state, Precision,
};
use qfolio::verify::{run_all, VerifyConfig, SCHEMA_VERSION};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

const PARTIAL: u8 = 2;

struct Dataset {
    labels: Vec<String>,
    panel: ReturnsPanel,
    /// Latest prices, the budget vector in `prices` mode.
    prices: DVector<f64>,
}

impl Dataset {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let series = match (&cfg.input, &cfg.synthetic) {
            (Some(path), None) => load_prices(path).with_context(|| format!("loading {}", path.display()))?,
            (None, Some(spec)) => generate_synthetic(&spec.factor_model(), spec.n_assets, spec.n_times)?,
            _ => bail!("exactly one of input or synthetic must be set"),
        };
        let panel = compute_returns(&series, cfg.dt_period)?;
        Ok(Self {
            labels: series.asset_labels().to_vec(),
            prices: series.latest(),
            panel,
        })
    }

    fn r(&self) -> &DVector<f64> {
        self.panel.expected_return()
    }

    fn sigma(&self) -> &RMat {
        self.panel.covariance()
    }

    fn budget(&self, mode: BudgetMode) -> DVector<f64> {
        budget_vector(&self.prices, mode, self.prices.len())
    }

    fn scaling(&self, cfg: &RunConfig) -> ConstraintScaling {
        if cfg.balance_constraints {
            ConstraintScaling::balanced(self.r(), &self.prices, self.sigma(), cfg.budget_mode)
        } else {
            ConstraintScaling::IDENTITY
        }
    }

    /// The system handed to HHL.
    fn quantum_kkt(&self, cfg: &RunConfig, mu: f64) -> qfolio::Result<KKTSystem> {
        self.scaling(cfg)
            .build_kkt(self.r(), &self.prices, self.sigma(), mu, cfg.xi, cfg.budget_mode)
    }

    fn default_grid(&self, cfg: &RunConfig) -> Vec<f64> {
        let r = self.r();
        cfg.mu_grid(r.min() * cfg.xi, r.max() * cfg.xi)
    }
}

/// `1.1 · max_μ 1/|λ_min(M̂)|` over the nonzero spectrum; grid points that
/// cannot be assembled are skipped here and reported by the solve itself.
fn auto_kappa(data: &Dataset, cfg: &RunConfig, grid: &[f64]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &mu in grid {
        let Ok(k) = data.quantum_kkt(cfg, mu) else {
            continue;
        };
        let (values, _) = sym_eigen(k.m_hat());
        let top = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let lmin = values
            .iter()
            .map(|v| v.abs())
            .filter(|v| *v > PINV_REL_CUTOFF * top)
            .fold(f64::INFINITY, f64::min);
        if lmin.is_finite() {
            worst = worst.max(1.0 / lmin);
        }
    }
    if worst == 0.0 {
        bail!("could not derive kappa: no grid point yields a usable KKT matrix");
    }
    Ok(1.1 * worst)
}

fn hhl_config(cfg: &RunConfig, kappa: f64) -> HHLConfig {
    HHLConfig {
        backend: cfg.backend,
        t0: cfg.t0,
        trotter_steps: cfg.trotter_steps,
        density_copies: cfg.density_copies,
        seed: cfg.seed,
        ..HHLConfig::new(kappa, cfg.phase_bits)
    }
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

pub fn frontier(cfg: &RunConfig) -> Result<ExitCode> {
    let data = Dataset::load(cfg)?;
    let grid = data.default_grid(cfg);
    let kappa = match cfg.kappa {
        Some(k) => k,
        None => auto_kappa(&data, cfg, &grid)?,
    };
    let hhl = hhl_config(cfg, kappa);
    let pi = data.budget(cfg.budget_mode);
    let problem = FrontierProblem {
        r: data.r(),
        pi: &pi,
        sigma: data.sigma(),
        xi: cfg.xi,
        budget_mode: cfg.budget_mode,
        balance_constraints: cfg.balance_constraints,
    };
    let curve = frontier_quantum(&problem, &grid, &hhl, cfg.shots, cfg.seed)?;
    let out = prepare_out(cfg)?;
    std::fs::write(out.join("frontier.csv"), curve.to_csv())?;
    write_json(
        out,
        "frontier.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "config": cfg,
            "assets": data.labels,
            "kappa": kappa,
            "constraint_scaling": data.scaling(cfg),
            "points": curve.points.iter().map(|p| json!({
                "mu": p.mu,
                "risk_classical": p.risk_classical,
                "risk_quantum": p.risk_quantum,
                "risk_std_error": p.risk_std_error,
                "fidelity": p.fidelity,
            })).collect::<Vec<_>>(),
            "omitted": curve.omitted,
        }),
    )?;
    write_json(
        out,
        "diagnostics.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "config": cfg,
            "hhl": hhl,
            "points": curve.points.iter().map(|p| json!({
                "mu": p.mu,
                "fidelity": p.fidelity,
                "hhl_fidelity": p.hhl_fidelity,
                "p_w": p.p_w,
                "epsilon_kappa": p.epsilon_kappa,
                "warnings": p.warnings,
            })).collect::<Vec<_>>(),
            "omitted": curve.omitted,
        }),
    )?;
    println!(
        "{} of {} frontier points written to {}",
        curve.points.len(),
        grid.len(),
        out.display()
    );
    if curve.points.is_empty() {
        bail!("every grid point was omitted");
    }
    Ok(if curve.omitted.is_empty() {
        ExitCode::SUCCESS
    } else {
        for o in &curve.omitted {
            eprintln!("omitted μ = {}: {}", o.mu, o.reason);
        }
        ExitCode::from(PARTIAL)
    })
}

pub fn solve(cfg: &RunConfig) -> Result<ExitCode> {
    let Some(mu) = cfg.mu else {
        bail!("solve needs a target return (--mu or `mu` in the config)");
    };
    let data = Dataset::load(cfg)?;
    let kappa = match cfg.kappa {
        Some(k) => k,
        None => auto_kappa(&data, cfg, &[mu])?,
    };
    let hhl = hhl_config(cfg, kappa);
    let pi = data.budget(cfg.budget_mode);
    let sigma = data.sigma();
    let k = build_kkt(data.r(), &pi, sigma, mu, cfg.xi, cfg.budget_mode)?;
    let classical = solve_exact(&k)?;
    let res = hhl_solve(&data.quantum_kkt(cfg, mu)?, &hhl)?;
    let (w_state, p_asset) = extract_w(&res)?;
    let rho = covariance_density_from_sigma(sigma)?;
    let risk = risk_estimate(&w_state, &rho, sigma.trace(), cfg.shots, cfg.seed)?;
    let norm2 = res.physical_scale.powi(2) * p_asset;
    let w_cl = classical.weights_vector();
    let cos: f64 = w_state.amplitudes().iter().zip(w_cl.iter()).map(|(a, x)| a.re * x).sum::<f64>() / w_cl.norm();
    let w_quantum: Vec<f64> = res.physical_solution().rows(2, data.r().len()).iter().copied().collect();

    let sampled = sample_portfolio_with_sigma(&w_state, data.r(), sigma, cfg.samples, cfg.seed)?;
    let report = sampling_error_report(&sampled, &w_cl, sigma)?;

    let out = prepare_out(cfg)?;
    write_json(
        out,
        "solution.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "config": cfg,
            "assets": data.labels,
            "mu": mu,
            "kappa": kappa,
            "constraint_scaling": data.scaling(cfg),
            "fidelity": cos * cos,
            "asset_probability": p_asset,
            "risk_classical": classical.risk,
            "risk_quantum": risk.risk * norm2,
            "risk_std_error": risk.std_error * norm2,
            "weights_classical": classical.weights,
            "weights_quantum": w_quantum,
            "classical": classical,
            "hhl": res.to_json(),
        }),
    )?;
    write_json(
        out,
        "portfolio.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "config": cfg,
            "assets": data.labels,
            "w_prime": sampled.w_prime,
            "sampling": sampled,
            "error_report": report,
        }),
    )?;
    println!(
        "μ = {mu}: fidelity {:.6}, risk classical {:.6e}, quantum {:.6e}; written to {}",
        cos * cos,
        classical.risk,
        risk.risk * norm2,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn verify(cfg: &RunConfig) -> Result<ExitCode> {
    let vcfg = VerifyConfig {
        seed: cfg.seed,
        n_phase_bits: cfg.phase_bits,
    };
    let report = run_all(&vcfg);
    for c in &report.criteria {
        println!("{}", c.summary_line());
    }
    let out = prepare_out(cfg)?;
    write_json(out, "verify.json", &report)?;
    let passed = report.criteria.iter().filter(|c| c.passed).count();
    println!("{passed}/{} criteria passed", report.criteria.len());
    Ok(if report.all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

pub fn prep_demo(cfg: &RunConfig) -> Result<ExitCode> {
    let data = Dataset::load(cfg)?;
    let panel = &data.panel;
    let chi = prepare_chi(panel, None, Precision::Exact)?;
    let r_state = prepare_r_state(&chi, "t")?;

    // |χ̃⟩ needs a power-of-two number of periods; keep the most recent ones.
    let t = panel.n_times();
    let used = 1usize << (usize::BITS - 1 - t.leading_zeros());
    let tilde_panel = if used == t {
        panel.clone()
    } else {
        let returns = panel.returns();
        ReturnsPanel::from_returns(returns.columns(t - used, used).into_owned())?
    };
    let chi_tilde = prepare_chi_tilde(&tilde_panel, None, Precision::Exact)?;
    let rho = covariance_density(&chi_tilde)?;
    let sigma = tilde_panel.covariance();
    let tr = sigma.trace();
    let n = sigma.nrows();
    let mut max_err: f64 = 0.0;
    for i in 0..rho.dim() {
        for j in 0..rho.dim() {
            let want = if i < n && j < n { sigma[(i, j)] / tr } else { 0.0 };
            max_err = max_err.max((rho.matrix()[(i, j)].re - want).abs().max(rho.matrix()[(i, j)].im.abs()));
        }
    }
    let (n_pad, _) = pow2_ceil(n);
    let trace_estimate = estimate_trace_sigma(chi_tilde.success_probability, chi_tilde.delta_used, used, n_pad)?;

    let out = prepare_out(cfg)?;
    write_json(
        out,
        "prep.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "config": cfg,
            "assets": data.labels,
            "n_periods": t,
            "chi": {
                "success_probability": chi.success_probability,
                "delta": chi.delta_used,
                "state": chi.state.dump(),
            },
            "r_state": {
                "success_probability": r_state.success_probability,
                "state": r_state.state.dump(),
            },
            "chi_tilde": {
                "periods_used": used,
                "success_probability": chi_tilde.success_probability,
                "delta": chi_tilde.delta_used,
                "state": chi_tilde.state.dump(),
            },
            "covariance_density": rho.dump(),
            "covariance_density_max_error": max_err,
            "trace_sigma": tr,
            "trace_sigma_estimate": trace_estimate,
        }),
    )?;
    println!(
        "prepared |χ⟩ (P = {:.4e}) and |χ̃⟩ over {used} periods (P = {:.4e}); ρ error {max_err:.2e}; written to {}",
        chi.success_probability,
        chi_tilde.success_probability,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}
