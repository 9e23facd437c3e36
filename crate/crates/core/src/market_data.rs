//! Price histories, simple returns, and the sample statistics (expected
//! return vector and covariance) that feed both the classical solver and the
//! quantum state preparation.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, RMat};

/// An N×T′ panel of strictly positive asset prices.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    prices: RMat,
    asset_labels: Vec<String>,
    time_axis: Vec<String>,
}

impl PriceSeries {
    pub fn new(prices: RMat, asset_labels: Vec<String>, time_axis: Vec<String>) -> Result<Self> {
        let (n, t) = prices.shape();
        if n < 2 {
            return Err(Error::Dimension(format!("N >= 2 required, got N = {n}")));
        }
        if t < 2 {
            return Err(Error::Dimension(format!("T' >= 2 required, got T' = {t}")));
        }
        if asset_labels.len() != n || time_axis.len() != t {
            return Err(Error::Dimension(format!(
                "{n}x{t} price matrix with {} labels and {} timestamps",
                asset_labels.len(),
                time_axis.len()
            )));
        }
        for s in 0..n {
            for k in 0..t {
                let p = prices[(s, k)];
                if !(p > 0.0) || !p.is_finite() {
                    return Err(Error::NonPositivePrice {
                        row: k + 1,
                        asset: asset_labels[s].clone(),
                    });
                }
            }
        }
        Ok(Self {
            prices,
            asset_labels,
            time_axis,
        })
    }

    pub fn prices(&self) -> &RMat {
        &self.prices
    }

    pub fn asset_labels(&self) -> &[String] {
        &self.asset_labels
    }

    pub fn time_axis(&self) -> &[String] {
        &self.time_axis
    }

    pub fn n_assets(&self) -> usize {
        self.prices.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.prices.ncols()
    }

    /// Most recent price of every asset.
    pub fn latest(&self) -> DVector<f64> {
        self.prices.column(self.n_times() - 1).into_owned()
    }
}

/// Read a `time,<asset>...` CSV file.
pub fn load_prices(path: impl AsRef<Path>) -> Result<PriceSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_prices_from_reader(file)
}

pub fn load_prices_from_reader(reader: impl Read) -> Result<PriceSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 3 {
        return Err(Error::Dimension(format!(
            "N >= 2 required, header has {} asset column(s)",
            header.len().saturating_sub(1)
        )));
    }
    let labels: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut times = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); labels.len()];
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let row = k + 1;
        if record.len() != header.len() {
            return Err(Error::RaggedRow {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        times.push(record[0].to_owned());
        for (j, cell) in record.iter().skip(1).enumerate() {
            let value: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row,
                column: labels[j].clone(),
                value: cell.to_owned(),
            })?;
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositivePrice {
                    row,
                    asset: labels[j].clone(),
                });
            }
            columns[j].push(value);
        }
    }
    let t = times.len();
    let prices = DMatrix::from_fn(labels.len(), t, |s, k| columns[s][k]);
    PriceSeries::new(prices, labels, times)
}

/// Returns, expected returns and sample covariance derived from a price panel.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel {
    returns: RMat,
    expected_return: DVector<f64>,
    covariance: RMat,
    norm_y: f64,
    norm_y_prime: f64,
    norm_y_tilde: f64,
}

/// JSON layout of a [`ReturnsPanel`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReturnsPanelJson {
    pub returns: Vec<Vec<f64>>,
    pub expected_return: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub norms: PanelNorms,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PanelNorms {
    pub y: f64,
    pub y_prime: f64,
    pub y_tilde: f64,
}

impl ReturnsPanel {
    /// Build the statistics directly from an N×T matrix of returns.
    pub fn from_returns(returns: RMat) -> Result<Self> {
        let (n, t) = returns.shape();
        if n == 0 {
            return Err(Error::Dimension("empty returns panel".into()));
        }
        if t < 2 {
            return Err(Error::Dimension(format!("need T >= 2, got T = {t}")));
        }
        let expected_return = DVector::from_fn(n, |s, _| returns.row(s).sum() / t as f64);
        let mut centered = returns.clone();
        for s in 0..n {
            for k in 0..t {
                centered[(s, k)] -= expected_return[s];
            }
        }
        let mut covariance = &centered * centered.transpose() / (t as f64 - 1.0);
        // symmetrize away rounding
        covariance = (&covariance + covariance.transpose()) * 0.5;
        let norm_y = returns.norm();
        let norm_y_prime = returns.column_sum().norm_squared().sqrt();
        let norm_y_tilde = centered.norm();
        Ok(Self {
            returns,
            expected_return,
            covariance,
            norm_y,
            norm_y_prime,
            norm_y_tilde,
        })
    }

    pub fn returns(&self) -> &RMat {
        &self.returns
    }

    pub fn expected_return(&self) -> &DVector<f64> {
        &self.expected_return
    }

    pub fn covariance(&self) -> &RMat {
        &self.covariance
    }

    pub fn n_assets(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.returns.ncols()
    }

    /// `|y|`, the Frobenius norm of the returns.
    pub fn norm_y(&self) -> f64 {
        self.norm_y
    }

    /// `|y'|`, the norm of the per-asset return sums.
    pub fn norm_y_prime(&self) -> f64 {
        self.norm_y_prime
    }

    /// `|ỹ|`, the norm of the mean-adjusted returns.
    pub fn norm_y_tilde(&self) -> f64 {
        self.norm_y_tilde
    }

    pub fn trace_sigma(&self) -> f64 {
        self.covariance.trace()
    }

    pub fn max_abs_return(&self) -> f64 {
        self.returns.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_json(&self) -> ReturnsPanelJson {
        let rows = |m: &RMat| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        ReturnsPanelJson {
            returns: rows(&self.returns),
            expected_return: self.expected_return.iter().copied().collect(),
            covariance: rows(&self.covariance),
            norms: PanelNorms {
                y: self.norm_y,
                y_prime: self.norm_y_prime,
                y_tilde: self.norm_y_tilde,
            },
        }
    }
}

/// Simple returns over `dt_period` ticks.
pub fn compute_returns(p: &PriceSeries, dt_period: usize) -> Result<ReturnsPanel> {
    let t_prime = p.n_times();
    if dt_period == 0 {
        return Err(Error::InvalidArgument("dt_period must be positive".into()));
    }
    if dt_period >= t_prime {
        return Err(Error::Dimension(format!(
            "dt_period {dt_period} must be smaller than T' = {t_prime}"
        )));
    }
    let t = t_prime - dt_period;
    if t < 2 {
        return Err(Error::Dimension(format!("need T >= 2, got T = {t}")));
    }
    let prices = p.prices();
    let returns = DMatrix::from_fn(p.n_assets(), t, |s, k| {
        let before = prices[(s, k)];
        (prices[(s, k + dt_period)] - before) / before
    });
    ReturnsPanel::from_returns(returns)
}

/// Numerical rank of a symmetric PSD matrix at `rel_tol · ‖m‖₂`.
pub fn numerical_rank(m: &RMat, rel_tol: f64) -> usize {
    let (values, _) = sym_eigen(m);
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    values.iter().filter(|v| v.abs() > rel_tol * scale).count()
}

/// Parameters of the seeded linear factor model used for synthetic panels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FactorModelSpec {
    pub n_factors: usize,
    pub loadings_scale: f64,
    pub idiosyncratic_scale: f64,
    /// Per-asset constant return offset; empty means zero drift.
    #[serde(default)]
    pub drift: Vec<f64>,
    pub seed: u64,
}

impl FactorModelSpec {
    pub fn new(n_factors: usize, seed: u64) -> Self {
        Self {
            n_factors,
            loadings_scale: 0.01,
            idiosyncratic_scale: 0.0,
            drift: Vec::new(),
            seed,
        }
    }
}

/// Synthesize a price panel whose returns are `L·f(t) + ε(t) + drift`.
///
/// Factors and idiosyncratic noise are standard Gaussians scaled by
/// `loadings_scale` and `idiosyncratic_scale`; returns are clipped at −0.9 so
/// prices stay positive. Initial prices are 100.
pub fn generate_synthetic(
    spec: &FactorModelSpec,
    n_assets: usize,
    n_times: usize,
) -> Result<PriceSeries> {
    if n_assets < 2 || n_times < 3 {
        return Err(Error::Dimension(format!(
            "need n_assets >= 2 and n_times >= 3, got {n_assets} x {n_times}"
        )));
    }
    if spec.n_factors == 0 || spec.n_factors > n_assets {
        return Err(Error::Dimension(format!(
            "n_factors must be in 1..={n_assets}, got {}",
            spec.n_factors
        )));
    }
    if !spec.drift.is_empty() && spec.drift.len() != n_assets {
        return Err(Error::Dimension(format!(
            "drift has {} entries for {n_assets} assets",
            spec.drift.len()
        )));
    }
    if spec.loadings_scale < 0.0 || spec.idiosyncratic_scale < 0.0 {
        return Err(Error::InvalidArgument("scales must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let loadings = DMatrix::from_fn(n_assets, spec.n_factors, |_, _| {
        spec.loadings_scale * gauss()
    });
    let mut prices = DMatrix::zeros(n_assets, n_times);
    prices.column_mut(0).fill(100.0);
    for k in 1..n_times {
        let factors = DVector::from_fn(spec.n_factors, |_, _| gauss());
        let common = &loadings * factors;
        for s in 0..n_assets {
            let drift = spec.drift.get(s).copied().unwrap_or(0.0);
            let y = (common[s] + spec.idiosyncratic_scale * gauss() + drift).max(-0.9);
            prices[(s, k)] = prices[(s, k - 1)] * (1.0 + y);
        }
    }
    let labels = (0..n_assets).map(|s| format!("A{s}")).collect();
    let times = (0..n_times).map(|k| k.to_string()).collect();
    PriceSeries::new(prices, labels, times)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(text: &str) -> Result<PriceSeries> {
        load_prices_from_reader(text.as_bytes())
    }

    #[test]
    fn parses_minimal_csv() {
        let p = csv("t,A,B\n1,100,50\n2,110,45\n").unwrap();
        assert_eq!(p.n_assets(), 2);
        assert_eq!(p.n_times(), 2);
        assert_eq!(p.asset_labels(), ["A", "B"]);
        assert_eq!(p.prices()[(1, 1)], 45.0);
    }

    #[test]
    fn rejects_zero_price() {
        let err = csv("t,A,B\n1,100,50\n2,110,0\n").unwrap_err();
        assert_eq!(err.to_string(), "non-positive price at (row 2, asset B)");
    }

    #[test]
    fn rejects_single_asset() {
        let err = csv("t,A\n1,100\n2,110\n").unwrap_err();
        assert!(err.to_string().contains("N >= 2 required"), "{err}");
    }

    #[test]
    fn rejects_ragged_and_non_numeric() {
        assert!(matches!(
            csv("t,A,B\n1,100,50\n2,110\n"),
            Err(Error::RaggedRow { row: 2, .. })
        ));
        assert!(matches!(
            csv("t,A,B\n1,100,x\n2,110,3\n"),
            Err(Error::NonNumeric { row: 1, .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_prices("/definitely/not/here.csv"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn ten_percent_return() {
        let p = csv("t,A,B\n1,100,50\n2,110,50\n3,121,50\n").unwrap();
        let panel = compute_returns(&p, 1).unwrap();
        assert!((panel.returns()[(0, 0)] - 0.10).abs() < 1e-15);
        assert!((panel.returns()[(0, 1)] - 0.10).abs() < 1e-15);
    }

    #[test]
    fn constant_prices_give_zero_statistics() {
        let p = csv("t,A,B\n1,5,7\n2,5,7\n3,5,7\n4,5,7\n").unwrap();
        let panel = compute_returns(&p, 1).unwrap();
        assert!(panel.returns().iter().all(|&v| v == 0.0));
        assert!(panel.expected_return().iter().all(|&v| v == 0.0));
        assert!(panel.covariance().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_periods() {
        let p = csv("t,A,B\n1,5,7\n2,6,7\n3,5,8\n").unwrap();
        assert!(compute_returns(&p, 3).is_err());
        let err = compute_returns(&p, 2).unwrap_err();
        assert!(err.to_string().contains("need T >= 2"));
    }

    #[test]
    fn covariance_matches_direct_summation() {
        // N=2, T=3 panel; oracle is the explicit outer-product sum.
        let y = DMatrix::from_row_slice(2, 3, &[0.01, -0.03, 0.05, 0.2, 0.1, -0.4]);
        let panel = ReturnsPanel::from_returns(y.clone()).unwrap();
        let mut mean = [0.0; 2];
        for s in 0..2 {
            for t in 0..3 {
                mean[s] += y[(s, t)] / 3.0;
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for t in 0..3 {
                    acc += (y[(a, t)] - mean[a]) * (y[(b, t)] - mean[b]);
                }
                assert!((panel.covariance()[(a, b)] - acc / 2.0).abs() < 1e-12);
            }
        }
        let tilde2 = panel.norm_y_tilde().powi(2);
        assert!((tilde2 - 2.0 * panel.trace_sigma()).abs() < 1e-12 * tilde2.max(1.0));
    }

    #[test]
    fn single_factor_gives_rank_one() {
        let spec = FactorModelSpec::new(1, 11);
        let p = generate_synthetic(&spec, 8, 40).unwrap();
        let panel = compute_returns(&p, 1).unwrap();
        assert_eq!(numerical_rank(panel.covariance(), 1e-8), 1);
    }

    #[test]
    fn three_factors_give_rank_three() {
        let spec = FactorModelSpec::new(3, 5);
        let p = generate_synthetic(&spec, 16, 60).unwrap();
        let panel = compute_returns(&p, 1).unwrap();
        assert_eq!(numerical_rank(panel.covariance(), 1e-8), 3);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let mut spec = FactorModelSpec::new(2, 99);
        spec.idiosyncratic_scale = 0.005;
        let a = generate_synthetic(&spec, 4, 20).unwrap();
        let b = generate_synthetic(&spec, 4, 20).unwrap();
        assert_eq!(a, b);
        assert!(generate_synthetic(&spec, 1, 20).is_err());
        assert!(generate_synthetic(&spec, 4, 2).is_err());
    }

    #[test]
    fn json_has_expected_keys() {
        let y = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, -0.1]);
        let json = serde_json::to_value(ReturnsPanel::from_returns(y).unwrap().to_json()).unwrap();
        for key in ["returns", "expected_return", "covariance", "norms"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
