use sigvol::sim::{correlate, euler_cir, simulate_brownian, volterra_fbm, HestonParams, TimeGrid, VolterraKernel};

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn cir_mean_reverts_to_theta() {
    let p = HestonParams { x0: 0.25, kappa: 3.3, theta: 0.15, nu: 0.35, rho: 0.0 };
    let batch = simulate_brownian(20_000, 300, 1.0, 7).unwrap();
    let terminal: Vec<f64> = (0..batch.n_paths).map(|q| *euler_cir(&p, batch.dw_path(q), 1.0 / 300.0).last().unwrap()).collect();
    let (m, v) = mean_var(&terminal);
    let se = (v / terminal.len() as f64).sqrt();
    assert!((m - p.mean_at(1.0)).abs() <= 3.0 * se, "{m} vs {}", p.mean_at(1.0));
}

#[test]
fn cir_without_noise_is_the_ode_euler_map() {
    let p = HestonParams { x0: 0.04, kappa: 2.0, theta: 0.09, nu: 0.0, rho: 0.0 };
    let x = euler_cir(&p, &[0.0; 100], 0.01);
    let want = 0.09 + (0.04 - 0.09) * (1.0f64 - 0.02).powi(100);
    assert!((x[100] - want).abs() < 1e-15);
}

#[test]
fn correlated_increments_have_the_requested_correlation() {
    let batch = simulate_brownian(4000, 50, 1.0, 3).unwrap();
    let z = correlate(&batch.dw, &batch.db, -0.5).unwrap();
    let (_, vw) = mean_var(&batch.dw);
    let (_, vz) = mean_var(&z);
    let cov = batch.dw.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / z.len() as f64;
    let corr = cov / (vw * vz).sqrt();
    assert!((corr + 0.5).abs() < 0.01, "{corr}");
    assert!((vz / vw - 1.0).abs() < 0.02);
}

#[test]
fn volterra_variance_matches_t_to_2h() {
    let grid = TimeGrid::new(64, 2.0).unwrap();
    let batch = simulate_brownian(40_000, 64, 2.0, 11).unwrap();
    for h in [0.1, 0.3, 0.7] {
        let paths = volterra_fbm(h, &batch).unwrap();
        for k in [16, 64] {
            let vals: Vec<f64> = paths.iter().map(|p| p[k]).collect();
            let (_, v) = mean_var(&vals);
            let ratio = v / grid.time(k).powf(2.0 * h);
            assert!((ratio - 1.0).abs() < 0.03, "H={h} k={k}: {ratio}");
        }
    }
}

#[test]
fn half_hurst_is_brownian_motion_bitwise() {
    let batch = simulate_brownian(64, 40, 1.0, 13).unwrap();
    let kernel = VolterraKernel::new(0.5, &batch.grid).unwrap();
    for q in 0..batch.n_paths {
        let wh = kernel.apply(batch.dw_path(q));
        let mut acc = 0.0;
        for (k, &w) in batch.dw_path(q).iter().enumerate() {
            acc += w;
            assert_eq!(wh[k + 1].to_bits(), acc.to_bits());
        }
    }
}
