use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use qfolio::hamiltonian_sim::{density_exponentiation_step, star_exponential, HamiltonianParts, StarCenter};
use qfolio::hhl::{hhl_solve, HHLConfig};
use qfolio::linalg::{hermitian_expm, op_norm, sym_eigen, to_complex, unitarity_deviation, CMat, RMat};
use qfolio::market_data::{compute_returns, PriceSeries, ReturnsPanel};
use qfolio::portfolio_qp::{build_kkt, pseudo_inverse_kappa, solve_exact, BudgetMode};
use qfolio::qsim::{DensityMatrix, QuantumState, RegisterLayout};
use qfolio::readout::{sample_portfolio, swap_test};
use qfolio::state_prep::{covariance_density, prepare_chi_tilde, KPTree, Precision};

fn matrix(n: usize, m: usize, lo: f64, hi: f64) -> impl Strategy<Value = RMat> {
    prop::collection::vec(lo..hi, n * m).prop_map(move |v| DMatrix::from_vec(n, m, v))
}

fn vector(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(lo..hi, n).prop_map(DVector::from_vec)
}

fn spd(n: usize) -> impl Strategy<Value = RMat> {
    matrix(n, n, -1.0, 1.0).prop_map(move |a| &a * a.transpose() + RMat::identity(n, n) * 0.1)
}

fn price_series(n: usize, t: usize) -> impl Strategy<Value = PriceSeries> {
    matrix(n, t, 1.0, 200.0).prop_map(move |p| {
        PriceSeries::new(
            p,
            (0..n).map(|i| format!("A{i}")).collect(),
            (0..t).map(|k| k.to_string()).collect(),
        )
        .unwrap()
    })
}

fn random_unitary(h: &RMat) -> CMat {
    let sym = (h + h.transpose()) * 0.5;
    hermitian_expm(&to_complex(&sym), 1.3)
}

fn kkt_instance(n: usize) -> impl Strategy<Value = (RMat, DVector<f64>, DVector<f64>)> {
    (spd(n), vector(n, 0.1, 2.0), vector(n, 0.5, 3.0)).prop_filter("R and Π independent", |(_, r, pi)| {
        let cos = r.dot(pi) / (r.norm() * pi.norm());
        cos.abs() < 0.995
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn covariance_is_psd_and_norm_identity_holds(p in price_series(4, 9)) {
        let panel = compute_returns(&p, 1).unwrap();
        let (values, _) = sym_eigen(panel.covariance());
        let floor = 1e-12 * values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(values.iter().all(|v| *v >= -floor));
        let t = panel.n_times() as f64;
        let lhs = panel.norm_y_tilde().powi(2);
        let rhs = (t - 1.0) * panel.trace_sigma();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1e-300));
    }

    #[test]
    fn returns_ignore_per_asset_price_scale(p in price_series(3, 6), asset in 0usize..3, c in 0.01f64..100.0) {
        let base = compute_returns(&p, 1).unwrap();
        let mut scaled = p.prices().clone();
        scaled.row_mut(asset).scale_mut(c);
        let q = PriceSeries::new(scaled, p.asset_labels().to_vec(), p.time_axis().to_vec()).unwrap();
        let other = compute_returns(&q, 1).unwrap();
        for k in 0..base.n_times() {
            let a = base.returns()[(asset, k)];
            prop_assert!((a - other.returns()[(asset, k)]).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn centered_rows_have_zero_mean(y in matrix(3, 7, -0.2, 0.2)) {
        let panel = ReturnsPanel::from_returns(y.clone()).unwrap();
        for s in 0..3 {
            let mean: f64 = (0..7).map(|k| y[(s, k)] - panel.expected_return()[s]).sum::<f64>() / 7.0;
            prop_assert!(mean.abs() <= 1e-12);
        }
    }

    #[test]
    fn kkt_residual_and_linearity((sigma, r, pi) in kkt_instance(5), mu in -1.0f64..1.0, xi in 0.5f64..2.0, c in 0.1f64..10.0) {
        let k = build_kkt(&r, &pi, &sigma, mu, xi, BudgetMode::Prices).unwrap();
        let sol = solve_exact(&k).unwrap();
        let x = DVector::from_iterator(7, [sol.eta, sol.theta].into_iter().chain(sol.weights.iter().copied()));
        let residual = (k.m_matrix() * &x - k.rhs()).norm();
        prop_assert!(residual <= 1e-9 * k.rhs().norm());

        let scaled = solve_exact(&build_kkt(&r, &pi, &sigma, c * mu, c * xi, BudgetMode::Prices).unwrap()).unwrap();
        let diff = (scaled.weights_vector() - sol.weights_vector() * c).norm();
        prop_assert!(diff <= 1e-8 * (1.0 + c * sol.weights_vector().norm()));
    }

    #[test]
    fn truncation_error_monotone_in_kappa((sigma, r, pi) in kkt_instance(3), mu in 0.1f64..1.0) {
        let k = build_kkt(&r, &pi, &sigma, mu, 1.0, BudgetMode::Prices).unwrap();
        let (values, _) = sym_eigen(k.m_hat());
        let lmin = values.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let mut last = f64::INFINITY;
        for kappa in [1.5, 3.0, 6.0, 12.0, 50.0, 200.0] {
            let (_, eps) = pseudo_inverse_kappa(k.m_hat(), k.rhs(), kappa).unwrap();
            prop_assert!(eps <= last + 1e-12);
            if 1.0 / kappa < lmin {
                prop_assert!(eps <= 1e-10);
            }
            last = eps;
        }
    }

    #[test]
    fn unitaries_preserve_norm(v in vector(8, -1.0, 1.0), h in matrix(4, 4, -1.0, 1.0)) {
        prop_assume!(v.norm() > 1e-3);
        let layout = RegisterLayout::new(&[("a", 1), ("b", 2)]).unwrap();
        let amps: Vec<Complex64> = (v.clone() / v.norm()).iter().map(|x| Complex64::new(*x, 0.0)).collect();
        let mut psi = QuantumState::from_amplitudes(layout, amps).unwrap();
        psi.apply_unitary(&random_unitary(&h), &["b"]).unwrap();
        psi.hadamard_all("a").unwrap();
        psi.qft("b", false).unwrap();
        prop_assert!((psi.norm() - 1.0).abs() <= 1e-10);

        let total: f64 = (0..4).map(|o| psi.postselect("b", o).map(|(_, p)| p).unwrap_or(0.0)).sum();
        prop_assert!((total - 1.0).abs() <= 1e-10);

        let reduced = psi.partial_trace(&["a"]).unwrap();
        prop_assert!((reduced.trace().re - 1.0).abs() <= 1e-10);
        prop_assert!(reduced.purity() <= 1.0 + 1e-10);
    }

    #[test]
    fn kp_tree_prepares_normalized_vector(v in prop::collection::vec(-5.0f64..5.0, 1..17)) {
        let v = DVector::from_vec(v);
        prop_assume!(v.norm() > 1e-6);
        let tree = KPTree::build(v.as_slice()).unwrap();
        prop_assert!(tree.consistency_error() <= 1e-12);
        prop_assert!((tree.root() - v.norm_squared()).abs() <= 1e-12 * v.norm_squared());
        let psi = tree.prepare().unwrap();
        let target = &v / v.norm();
        for (i, a) in psi.amplitudes().iter().enumerate() {
            let expect = target.get(i).copied().unwrap_or(0.0);
            prop_assert!((a - Complex64::new(expect, 0.0)).norm() <= 1e-10);
        }
    }

    #[test]
    fn covariance_density_matches_sample_covariance(y in matrix(4, 8, -0.1, 0.1)) {
        let panel = ReturnsPanel::from_returns(y).unwrap();
        let chi = prepare_chi_tilde(&panel, None, Precision::Exact).unwrap();
        let rho = covariance_density(&chi).unwrap();
        let expect = to_complex(&(panel.covariance() / panel.trace_sigma()));
        let diff = rho.matrix().view((0, 0), (4, 4)).into_owned() - expect;
        prop_assert!(diff.iter().all(|z| z.norm() <= 1e-9));
    }

    #[test]
    fn star_exponential_matches_dense(v in vector(4, -2.0, 2.0), t in 0.0f64..10.0, budget in any::<bool>()) {
        let center = if budget { StarCenter::Budget } else { StarCenter::Returns };
        let u = star_exponential(&v, center, 6, t).unwrap();
        let mut h = RMat::zeros(6, 6);
        let ci = center.index();
        for j in 0..4 {
            h[(ci, j + 2)] = v[j];
            h[(j + 2, ci)] = v[j];
        }
        let dense = hermitian_expm(&to_complex(&h), t);
        prop_assert!(op_norm(&(u - dense)) <= 1e-8);
    }

    #[test]
    fn hamiltonian_parts_reassemble((sigma, r, pi) in kkt_instance(4), mu in 0.1f64..1.0) {
        let k = build_kkt(&r, &pi, &sigma, mu, 1.0, BudgetMode::Prices).unwrap();
        let parts = HamiltonianParts::from_kkt(&k).unwrap();
        let diff = parts.total() - k.m_hat();
        prop_assert!(diff.iter().all(|x| x.abs() <= 1e-12));
        prop_assert!(unitarity_deviation(&parts.r_unitary(0.7).unwrap()) <= 1e-8);
    }

    #[test]
    fn density_step_keeps_state_physical(a in spd(3), b in spd(3), dt in 0.0f64..0.5) {
        let rho = DensityMatrix::new(to_complex(&(&a / a.trace()))).unwrap();
        let sigma = DensityMatrix::new(to_complex(&(&b / b.trace()))).unwrap();
        let out = density_exponentiation_step(&rho, &sigma, dt).unwrap();
        let m = out.matrix();
        prop_assert!((m - m.adjoint()).iter().all(|z| z.norm() <= 1e-9));
        prop_assert!((out.trace().re - 1.0).abs() <= 1e-9);
        prop_assert!(out.min_eigenvalue() >= -1e-9);
    }

    #[test]
    fn sampled_portfolio_is_unit_norm_with_return_signs(w in vector(8, -1.0, 1.0), r in vector(8, -1.0, 1.0), seed in any::<u64>()) {
        prop_assume!(w.norm() > 1e-3);
        let psi = QuantumState::from_real("asset", (w.clone() / w.norm()).as_slice()).unwrap();
        let res = sample_portfolio(&psi, &r, 500, seed).unwrap();
        let norm2: f64 = res.w_prime.iter().map(|x| x * x).sum();
        prop_assert!((norm2 - 1.0).abs() <= 1e-12);
        for (&j, &m) in &res.counts {
            if m > 0 && r[j] != 0.0 {
                prop_assert_eq!(res.w_prime[j].signum(), r[j].signum());
            }
        }
    }

    #[test]
    fn swap_test_stays_in_range(a in vector(4, -1.0, 1.0), b in vector(4, -1.0, 1.0), shots in 1u64..200, seed in any::<u64>()) {
        prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
        let pa = QuantumState::from_real("x", (a.clone() / a.norm()).as_slice()).unwrap();
        let pb = QuantumState::from_real("x", (b.clone() / b.norm()).as_slice()).unwrap();
        let est = swap_test((&pa).into(), (&pb).into(), shots, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&est.overlap));
        prop_assert!(est.std_error <= 1.0 / (shots as f64).sqrt() + 1e-12);
        if est.overlap > 0.0 && est.overlap < 1.0 {
            let p_hat = (1.0 + est.overlap) / 2.0;
            let expect = 2.0 * (p_hat * (1.0 - p_hat) / shots as f64).sqrt();
            prop_assert!((est.std_error - expect).abs() <= 1e-12);
        }
        let again = swap_test((&pa).into(), (&pb).into(), shots, seed).unwrap();
        prop_assert_eq!(est, again);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn hhl_state_is_normalized_with_valid_probability((sigma, r, pi) in kkt_instance(2), mu in 0.2f64..1.0) {
        let k = build_kkt(&r, &pi, &sigma, mu, 1.0, BudgetMode::Prices).unwrap();
        let (values, _) = sym_eigen(k.m_hat());
        let lmin = values.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let res = hhl_solve(&k, &HHLConfig::new(1.1 / lmin, 6)).unwrap();
        prop_assert!(res.p_w > 0.0 && res.p_w <= 1.0);
        let norm: f64 = res.solution_amplitudes().iter().map(|z| z.norm_sqr()).sum();
        prop_assert!((norm - 1.0).abs() <= 1e-10);
    }
}
