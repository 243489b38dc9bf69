use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigvol::calibration::{assign_weights, attach_implied_vols, loss, loss_and_gradient, SigPricer, WeightMode};
use sigvol::features::{FeatureCache, FeatureSpec};
use sigvol::pricing::{bs_price, OptionQuote};
use sigvol::sim::{HestonParams, TimeGrid};
use sigvol::tensor::Labeling;

fn cache() -> FeatureCache {
    FeatureCache::build(FeatureSpec {
        primary: HestonParams { x0: 0.1, kappa: 2.0, theta: 0.15, nu: 0.2, rho: -0.3 },
        grid: TimeGrid::new(96, 1.6).unwrap(),
        maturities: vec![0.1, 0.6, 1.1, 1.6],
        level: 3,
        n_paths: 4096,
        seed: 17,
        antithetic: false,
    })
    .unwrap()
}

fn market() -> Vec<OptionQuote> {
    let mut q = Vec::new();
    for &t in &[0.1, 0.6, 1.1, 1.6] {
        for &k in &[90.0, 95.0, 100.0, 105.0, 110.0] {
            let sigma = 0.2 + 0.3 * (k / 100.0f64).ln().powi(2) - 0.02 * t;
            q.push(OptionQuote::new(k, t, bs_price(100.0, k, t, 0.0, sigma)));
        }
    }
    attach_implied_vols(&mut q, 100.0, 0.0).unwrap();
    assign_weights(&mut q, WeightMode::InverseVega, 100.0, 0.0).unwrap();
    q
}

fn random_ell(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let lab = Labeling::new(2, 3).unwrap();
    lab.words()
        .map(|w| {
            if w.is_empty() {
                rng.random_range(0.1..0.3)
            } else {
                rng.random_range(-0.1..0.1) / (1..=w.len()).product::<usize>() as f64
            }
        })
        .collect()
}

#[test]
fn gradient_is_stable_under_step_refinement() {
    let cache = cache();
    let quotes = market();
    let pricer = SigPricer::new(&cache, &quotes, 100.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let ell = random_ell(&mut rng);
        let (f1, g1) = loss_and_gradient(&pricer, &quotes, &ell, 1e-6).unwrap();
        let (f2, g2) = loss_and_gradient(&pricer, &quotes, &ell, 1e-8).unwrap();
        assert_eq!(f1, f2);
        let scale = g2.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (i, (a, b)) in g1.iter().zip(&g2).enumerate() {
            assert!((a - b).abs() <= 1e-3 * scale, "component {i}: {a} vs {b} (scale {scale})");
        }
    }
}

#[test]
fn gradient_predicts_the_loss_change() {
    let cache = cache();
    let quotes = market();
    let pricer = SigPricer::new(&cache, &quotes, 100.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ell = random_ell(&mut rng);
    let (f, g) = loss_and_gradient(&pricer, &quotes, &ell, 1e-6).unwrap();
    let dir: Vec<f64> = g.iter().map(|v| -v).collect();
    let t = 1e-4 / dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let moved: Vec<f64> = ell.iter().zip(&dir).map(|(l, d)| l + t * d).collect();
    let actual = loss(&moved, &quotes, &cache, 100.0).unwrap() - f;
    let predicted = -t * g.iter().map(|v| v * v).sum::<f64>();
    assert!(actual < 0.0);
    assert!((actual - predicted).abs() <= 0.05 * predicted.abs(), "{actual} vs {predicted}");
}
