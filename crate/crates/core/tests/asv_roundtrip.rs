use proptest::prelude::*;
use sigvol::asv::{calibrate_asv, iv_atm_term, iv_long_atm, iv_short_maturity, SmileFit, SurfaceSlice};
use sigvol::sim::HestonParams;

fn slices(p: &HestonParams, sigma0: f64) -> SurfaceSlice {
    SurfaceSlice {
        atm_term_structure: [0.01, 0.03, 0.06, 0.1].iter().map(|&t| (t, iv_atm_term(p, sigma0, t))).collect(),
        short_smile: [-0.1, -0.05, 0.0, 0.05, 0.1].iter().map(|&x| (x, iv_short_maturity(p, sigma0, x))).collect(),
        long_atm: [1.5, 2.5, 4.0, 6.0].iter().map(|&t| (1.0 / t, iv_long_atm(p, sigma0, t))).collect(),
    }
}

fn feller_params() -> impl Strategy<Value = (f64, HestonParams)> {
    (0.05f64..1.0, 0.5f64..6.0, 0.01f64..0.5, 0.05f64..1.0, -0.9f64..0.9).prop_map(|(s0, kappa, theta, frac, rho)| {
        let nu = frac * (2.0 * kappa * theta).sqrt();
        (s0, HestonParams { x0: s0 * s0, kappa, theta, nu, rho })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn formula_surfaces_round_trip((sigma0, p) in feller_params()) {
        let fit = calibrate_asv(&slices(&p, sigma0), SmileFit::Quadratic).map_err(|e| TestCaseError::fail(format!("{e}")))?;
        let got = fit.params;
        for (name, a, b) in [("sigma0", got.sigma0, sigma0), ("nu", got.nu, p.nu), ("kappa", got.kappa, p.kappa), ("theta", got.theta, p.theta)] {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs(), "{name}: {a} vs {b}, {got:?}");
        }
        prop_assert!((got.rho - p.rho).abs() <= 1e-6 * p.rho.abs().max(1e-3), "{got:?} vs {p:?}");
    }

    #[test]
    fn atm_intercept_is_sigma0((sigma0, p) in feller_params()) {
        let fit = calibrate_asv(&slices(&p, sigma0), SmileFit::Quadratic);
        if let Ok(fit) = fit {
            prop_assert!((fit.atm_fit.coefficients[0] - sigma0).abs() < 1e-12);
        }
    }
}
