//! Black-Scholes pricing, Vega, implied-volatility inversion and Monte Carlo
//! call pricing.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// A European call quote on the surface.
#[derive(Clone, Debug, PartialEq)]
pub struct OptionQuote {
    pub strike: f64,
    pub maturity: f64,
    /// Discounted call price.
    pub price: f64,
    pub implied_vol: Option<f64>,
    pub weight: f64,
}

impl OptionQuote {
    pub fn new(strike: f64, maturity: f64, price: f64) -> Self {
        OptionQuote {
            strike,
            maturity,
            price,
            implied_vol: None,
            weight: 1.0,
        }
    }
}

fn d_plus_minus(s0: f64, k: f64, t: f64, r: f64, sigma: f64) -> (f64, f64) {
    let sd = sigma * t.sqrt();
    let d1 = ((s0 / k).ln() + r * t) / sd + 0.5 * sd;
    (d1, d1 - sd)
}

/// Black-Scholes call price. Falls back to the intrinsic value
/// `max(S0 - K e^{-rT}, 0)` when `sigma * sqrt(T)` vanishes.
pub fn bs_price(s0: f64, k: f64, t: f64, r: f64, sigma: f64) -> f64 {
    let df_k = k * (-r * t).exp();
    if sigma * t.sqrt() < 1e-300 {
        return (s0 - df_k).max(0.0);
    }
    let (d1, d2) = d_plus_minus(s0, k, t, r, sigma);
    s0 * norm_cdf(d1) - df_k * norm_cdf(d2)
}

/// Black-Scholes put via the normal-symmetry formula.
pub fn bs_put(s0: f64, k: f64, t: f64, r: f64, sigma: f64) -> f64 {
    let df_k = k * (-r * t).exp();
    if sigma * t.sqrt() < 1e-300 {
        return (df_k - s0).max(0.0);
    }
    let (d1, d2) = d_plus_minus(s0, k, t, r, sigma);
    df_k * norm_cdf(-d2) - s0 * norm_cdf(-d1)
}

/// `S0 φ(d+) sqrt(T)`.
pub fn bs_vega(s0: f64, k: f64, t: f64, r: f64, sigma: f64) -> f64 {
    if sigma * t.sqrt() < 1e-300 {
        return 0.0;
    }
    let (d1, _) = d_plus_minus(s0, k, t, r, sigma);
    s0 * norm_pdf(d1) * t.sqrt()
}

/// No-arbitrage bounds `[max(S0 - K e^{-rT}, 0), S0]` for a call.
pub fn call_bounds(s0: f64, k: f64, t: f64, r: f64) -> (f64, f64) {
    ((s0 - k * (-r * t).exp()).max(0.0), s0)
}

/// Move a price that breached the no-arbitrage bounds back inside by `1e-10`.
/// Returns the price and whether it was clamped.
pub fn clamp_to_bounds(price: f64, s0: f64, k: f64, t: f64, r: f64) -> (f64, bool) {
    const EPS: f64 = 1e-10;
    let (lo, hi) = call_bounds(s0, k, t, r);
    if price <= lo + EPS {
        (lo + EPS, price < lo + EPS)
    } else if price >= hi - EPS {
        (hi - EPS, true)
    } else {
        (price, false)
    }
}

/// Invert the Black-Scholes call formula in `sigma`.
///
/// Bisection on `[1e-6, 5]` (widened if needed) until the bracket is below
/// `1e-4`, then Newton steps with Vega, kept inside the bracket.
pub fn implied_vol(price: f64, s0: f64, k: f64, t: f64, r: f64) -> Result<f64> {
    let (lo_bound, hi_bound) = call_bounds(s0, k, t, r);
    if !(price > lo_bound) {
        return Err(Error::Inversion {
            price,
            bound: "lower",
            value: lo_bound,
        });
    }
    if !(price < hi_bound) {
        return Err(Error::Inversion {
            price,
            bound: "upper",
            value: hi_bound,
        });
    }
    let f = |s: f64| bs_price(s0, k, t, r, s) - price;
    let mut lo = 1e-6;
    let mut hi = 5.0;
    if f(lo) > 0.0 {
        // price sits between intrinsic and the sigma = 1e-6 value
        lo = 0.0;
    }
    while f(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::Numerical(format!(
                "implied vol above 1000 for price {price}"
            )));
        }
    }
    while hi - lo > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut sigma = 0.5 * (lo + hi);
    for _ in 0..100 {
        let diff = f(sigma);
        if diff.abs() <= 1e-12 * price.max(1.0) {
            break;
        }
        if diff > 0.0 {
            hi = sigma;
        } else {
            lo = sigma;
        }
        let vega = bs_vega(s0, k, t, r, sigma);
        let mut next = if vega > 0.0 { sigma - diff / vega } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - sigma).abs() < 1e-15 {
            sigma = next;
            break;
        }
        sigma = next;
    }
    Ok(sigma)
}

/// Monte Carlo call estimate from discounted terminal prices:
/// mean of `(S~_T - e^{-rT} K)_+` and its standard error.
pub fn mc_call_price(discounted_terminal: &[f64], k: f64, r: f64, t: f64) -> (f64, f64) {
    let n = discounted_terminal.len();
    assert!(n > 0, "empty Monte Carlo sample");
    let strike = k * (-r * t).exp();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for &s in discounted_terminal {
        let p = (s - strike).max(0.0);
        sum += p;
        sum_sq += p * p;
    }
    let nf = n as f64;
    let mean = sum / nf;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}
