//! Second-order asymptotic implied volatility of the Heston model and the
//! regression procedure that inverts it.
//!
//! Three expansions are used: the smile at zero maturity (quadratic in the
//! log-moneyness `x - k`), the ATM term structure near `T = 0` (linear in
//! `T`), and the ATM level for large `T` (linear in `1/T`). Line fits give
//! `sigma0`, the product `rho * nu` and three scalar targets, from which
//! `(nu, kappa, theta)` follow by a damped Newton solve.

use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::sim::HestonParams;

/// Heston parameters in the form the expansions use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct AsvParams {
    pub sigma0: f64,
    pub nu: f64,
    pub kappa: f64,
    pub theta: f64,
    pub rho: f64,
}

impl AsvParams {
    /// Variance-form Heston parameters (`x0 = sigma0^2`).
    pub fn to_heston(&self) -> HestonParams {
        HestonParams {
            x0: self.sigma0 * self.sigma0,
            kappa: self.kappa,
            theta: self.theta,
            nu: self.nu,
            rho: self.rho,
        }
    }

    pub fn from_heston(p: &HestonParams) -> Self {
        AsvParams {
            sigma0: p.x0.sqrt(),
            nu: p.nu,
            kappa: p.kappa,
            theta: p.theta,
            rho: p.rho,
        }
    }
}

/// Smile at zero maturity as a function of `x - k = ln(S0/K)`.
pub fn iv_short_maturity(p: &HestonParams, sigma0: f64, x_minus_k: f64) -> f64 {
    let rn = p.rho * p.nu;
    sigma0 - rn / (4.0 * sigma0) * x_minus_k + p.nu * p.nu / (24.0 * sigma0.powi(3)) * x_minus_k * x_minus_k
}

/// Slope of the short-maturity ATM term structure.
pub fn atm_term_slope(p: &HestonParams, sigma0: f64) -> f64 {
    let s2 = sigma0 * sigma0;
    (3.0 * s2 * p.rho * p.nu - 6.0 * p.kappa * (s2 - p.theta) - p.nu * p.nu) / (24.0 * sigma0)
}

/// ATM implied vol for small `T`.
pub fn iv_atm_term(p: &HestonParams, sigma0: f64, t: f64) -> f64 {
    sigma0 + t * atm_term_slope(p, sigma0)
}

/// `(intercept, coefficient of 1/T)` of the large-maturity ATM expansion.
pub fn long_atm_coefficients(p: &HestonParams, sigma0: f64) -> (f64, f64) {
    let (nu, kappa, theta, rho) = (p.nu, p.kappa, p.theta, p.rho);
    let st = theta.sqrt();
    let s2 = sigma0 * sigma0;
    let intercept = st * (1.0 + nu * rho / (4.0 * kappa) - nu * nu / (32.0 * kappa * kappa));
    let slope = (s2 - theta) / (2.0 * kappa * st) + nu * rho * (s2 - 2.0 * theta) / (4.0 * kappa * kappa * st)
        - nu * nu * (s2 - 2.5 * theta + 4.0 * kappa) / (32.0 * st * kappa.powi(3));
    (intercept, slope)
}

/// ATM implied vol for large `T`.
pub fn iv_long_atm(p: &HestonParams, sigma0: f64, t: f64) -> f64 {
    let (a, b) = long_atm_coefficients(p, sigma0);
    a + b / t
}

/// Regression inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SurfaceSlice {
    /// `(T, ATM IV)` at short maturities.
    pub atm_term_structure: Vec<(f64, f64)>,
    /// `(x - k, IV)` at the shortest maturity.
    pub short_smile: Vec<(f64, f64)>,
    /// `(1/T, ATM IV)` at long maturities.
    pub long_atm: Vec<(f64, f64)>,
}

/// Which maturities feed which regression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SliceSelection {
    /// ATM term structure uses `T <= atm_max_t`.
    pub atm_max_t: f64,
    /// Short smile is taken at the shortest maturity, which must be `<= short_max_t`.
    pub short_max_t: f64,
    /// Long fit uses `T >= long_min_t`.
    pub long_min_t: f64,
}

impl Default for SliceSelection {
    fn default() -> Self {
        SliceSelection {
            atm_max_t: f64::INFINITY,
            short_max_t: 0.15,
            long_min_t: 1.0,
        }
    }
}

/// One point of an implied-vol surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SurfacePoint {
    pub maturity: f64,
    pub strike: f64,
    pub iv: f64,
}

impl SurfaceSlice {
    pub fn validate(&self) -> Result<()> {
        for (name, pts) in [
            ("ATM term structure", &self.atm_term_structure),
            ("short smile", &self.short_smile),
            ("long ATM", &self.long_atm),
        ] {
            if pts.len() < 2 {
                return domain(format!("{name} needs at least two points, got {}", pts.len()));
            }
            if pts.iter().any(|&(x, y)| !x.is_finite() || !(y > 0.0)) {
                return domain(format!("{name} has a non-finite abscissa or non-positive IV"));
            }
        }
        if self.atm_term_structure.iter().any(|&(t, _)| !(t > 0.0)) || self.long_atm.iter().any(|&(u, _)| !(u > 0.0)) {
            return domain("maturities must be positive");
        }
        Ok(())
    }

    /// Extract slices from a surface. ATM is `ln(S0/K) = -rT`; when no
    /// strike sits exactly there, the maturity's smile is interpolated by a
    /// quadratic in log-moneyness.
    pub fn from_surface(points: &[SurfacePoint], s0: f64, r: f64, sel: &SliceSelection) -> Result<Self> {
        let mut mats: Vec<f64> = Vec::new();
        for p in points {
            if !(p.maturity > 0.0) || !(p.strike > 0.0) || !(p.iv > 0.0) {
                return domain("surface points need positive maturity, strike and IV");
            }
            if !mats.iter().any(|m| (m - p.maturity).abs() < 1e-9) {
                mats.push(p.maturity);
            }
        }
        mats.sort_by(f64::total_cmp);
        let smile = |t: f64| -> Vec<(f64, f64)> {
            let mut s: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| (p.maturity - t).abs() < 1e-9)
                .map(|p| ((s0 / p.strike).ln(), p.iv))
                .collect();
            s.sort_by(|a, b| a.0.total_cmp(&b.0));
            s
        };
        let atm = |t: f64| -> Result<f64> {
            let s = smile(t);
            let target = -r * t;
            if let Some(&(_, iv)) = s.iter().find(|(x, _)| (x - target).abs() < 1e-9) {
                return Ok(iv);
            }
            if s.len() < 3 {
                return domain(format!("maturity {t} has no ATM strike and too few points to interpolate"));
            }
            let xs: Vec<f64> = s.iter().map(|p| p.0 - target).collect();
            let ys: Vec<f64> = s.iter().map(|p| p.1).collect();
            Ok(fit_polynomial(&xs, &ys, 2)?.coefficients[0])
        };
        let mut out = SurfaceSlice::default();
        for &t in &mats {
            if t <= sel.atm_max_t + 1e-12 {
                out.atm_term_structure.push((t, atm(t)?));
            }
            if t >= sel.long_min_t - 1e-12 {
                out.long_atm.push((1.0 / t, atm(t)?));
            }
        }
        match mats.first() {
            Some(&t) if t <= sel.short_max_t + 1e-12 => {
                out.short_smile = smile(t).into_iter().map(|(x, iv)| (x + r * t, iv)).collect();
            }
            _ => return domain("surface has no maturity short enough for the smile fit"),
        }
        if out.long_atm.len() < 2 {
            return domain("surface is missing long maturities for the 1/T fit");
        }
        Ok(out)
    }
}

/// Unit-weight least-squares polynomial.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolyFit {
    /// Ascending powers.
    pub coefficients: Vec<f64>,
    pub rss: f64,
    pub n: usize,
}

/// Least-squares polynomial of the given degree via normal equations on
/// centred, scaled abscissae.
pub fn fit_polynomial(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyFit> {
    let n = xs.len();
    if n != ys.len() || n < degree + 1 {
        return domain(format!("degree-{degree} fit needs at least {} points", degree + 1));
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let spread = xs.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
    if !(spread > 1e-14 * (1.0 + mean.abs())) {
        return Err(Error::Numerical("regression abscissae are collinear".into()));
    }
    let m = degree + 1;
    let mut a = vec![0.0; m * m];
    let mut b = vec![0.0; m];
    for (&x, &y) in xs.iter().zip(ys) {
        let z = (x - mean) / spread;
        let pows: Vec<f64> = (0..m).map(|k| z.powi(k as i32)).collect();
        for i in 0..m {
            b[i] += pows[i] * y;
            for j in 0..m {
                a[i * m + j] += pows[i] * pows[j];
            }
        }
    }
    let c = solve_dense(&mut a, &mut b, m).ok_or_else(|| Error::Numerical("regression abscissae are collinear".into()))?;
    // expand p(z) with z = (x - mean)/spread back to powers of x
    let mut coefficients = vec![0.0; m];
    for (k, ck) in c.iter().enumerate() {
        // (x - mean)^k / spread^k
        let scale = ck / spread.powi(k as i32);
        let mut binom = 1.0;
        for j in 0..=k {
            if j > 0 {
                binom = binom * (k - j + 1) as f64 / j as f64;
            }
            coefficients[j] += scale * binom * (-mean).powi((k - j) as i32);
        }
    }
    let rss = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let p: f64 = coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c);
            (y - p).powi(2)
        })
        .sum();
    Ok(PolyFit { coefficients, rss, n })
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let norm = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if !(a[piv * n + col].abs() > 1e-14 * norm) {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i * n + k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i * n + i];
    }
    Some(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmileFit {
    /// Straight line through the smile.
    Linear,
    /// Quadratic in `x - k`, matching the shape of the expansion; its
    /// linear coefficient is used.
    Quadratic,
}

#[derive(Clone, Debug, Serialize)]
pub struct AsvCalibration {
    pub params: AsvParams,
    pub atm_fit: PolyFit,
    pub smile_fit: PolyFit,
    pub long_fit: PolyFit,
    /// `rho * nu` from the smile's linear coefficient.
    pub rho_nu: f64,
    /// Residuals of the three solved relations at the root.
    pub residuals: [f64; 3],
    pub newton_iterations: usize,
}

/// Fit the three regressions and solve for the Heston parameters.
pub fn calibrate_asv(slices: &SurfaceSlice, smile: SmileFit) -> Result<AsvCalibration> {
    slices.validate()?;
    let unzip = |pts: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { pts.iter().copied().unzip() };
    let (xs, ys) = unzip(&slices.atm_term_structure);
    let atm_fit = fit_polynomial(&xs, &ys, 1)?;
    let (xs, ys) = unzip(&slices.short_smile);
    let degree = match smile {
        SmileFit::Quadratic if xs.len() >= 3 => 2,
        _ => 1,
    };
    let smile_fit = fit_polynomial(&xs, &ys, degree)?;
    let (xs, ys) = unzip(&slices.long_atm);
    let long_fit = fit_polynomial(&xs, &ys, 1)?;

    let sigma0 = atm_fit.coefficients[0];
    if !(sigma0 > 0.0) {
        return Err(Error::Numerical(format!("ATM intercept {sigma0} is not a volatility")));
    }
    let rho_nu = -4.0 * sigma0 * smile_fit.coefficients[1];
    let targets = Targets {
        sigma0,
        rho_nu,
        atm_slope: atm_fit.coefficients[1],
        long_intercept: long_fit.coefficients[0],
        long_slope: long_fit.coefficients[1],
    };
    // curvature nu^2 / (24 sigma0^3) of the quadratic smile fit
    let nu_hint = smile_fit
        .coefficients
        .get(2)
        .filter(|c| **c > 0.0)
        .map(|c| (24.0 * sigma0.powi(3) * c).sqrt());
    let (root, iterations) = targets.solve(nu_hint)?;
    let [nu, kappa, theta] = root;
    let rho = rho_nu / nu;
    if !(rho.abs() <= 1.0) {
        return Err(Error::Numerical(format!("recovered correlation {rho} lies outside [-1, 1]")));
    }
    Ok(AsvCalibration {
        params: AsvParams {
            sigma0,
            nu,
            kappa,
            theta,
            rho,
        },
        residuals: targets.residual(root),
        atm_fit,
        smile_fit,
        long_fit,
        rho_nu,
        newton_iterations: iterations,
    })
}

struct Targets {
    sigma0: f64,
    rho_nu: f64,
    atm_slope: f64,
    long_intercept: f64,
    long_slope: f64,
}

impl Targets {
    fn residual(&self, [nu, kappa, theta]: [f64; 3]) -> [f64; 3] {
        let p = HestonParams {
            x0: self.sigma0 * self.sigma0,
            kappa,
            theta,
            nu,
            rho: self.rho_nu / nu,
        };
        let (a, b) = long_atm_coefficients(&p, self.sigma0);
        [
            atm_term_slope(&p, self.sigma0) - self.atm_slope,
            a - self.long_intercept,
            b - self.long_slope,
        ]
    }

    fn norm(&self, x: [f64; 3]) -> f64 {
        self.residual(x).iter().map(|r| r * r).sum::<f64>().sqrt()
    }

    /// Damped Newton from the neutral seed and a fan of alternative seeds.
    /// The system can have several admissible roots; when the smile
    /// curvature gives an estimate of `nu`, the root closest to it wins,
    /// otherwise the first root found (neutral seed first).
    fn solve(&self, nu_hint: Option<f64>) -> Result<([f64; 3], usize)> {
        let s2 = self.sigma0 * self.sigma0;
        let mut seeds = vec![[self.rho_nu.abs().clamp(0.1, 0.5), 1.0, s2]];
        for &nu in &[0.05, 0.1, 0.3, 0.6, 1.0] {
            for &kappa in &[0.5, 2.0, 5.0, 10.0] {
                for &theta in &[0.5 * s2, s2, 2.0 * s2] {
                    seeds.push([nu, kappa, theta]);
                }
            }
        }
        // theta ~ (long intercept)^2; given nu, kappa follows from the ATM slope
        let theta0 = (self.long_intercept * self.long_intercept).max(1e-8);
        let kappa_for = |nu: f64| {
            let k = (3.0 * s2 * self.rho_nu - nu * nu - 24.0 * self.sigma0 * self.atm_slope) / (6.0 * (s2 - theta0));
            if k.is_finite() && k > 0.0 {
                k
            } else {
                1.0
            }
        };
        let mut front = Vec::new();
        if let Some(nu) = nu_hint {
            front.push([nu, kappa_for(nu), theta0]);
            front.push([nu, 1.0, theta0]);
        }
        for &nu in &[0.05, 0.1, 0.3, 0.6, 1.0] {
            front.push([nu, kappa_for(nu), theta0]);
        }
        seeds.splice(1..1, front);
        let scale = 1.0 + self.atm_slope.abs() + self.long_intercept.abs() + self.long_slope.abs();
        let mut roots: Vec<([f64; 3], usize)> = Vec::new();
        let mut best: Option<([f64; 3], f64)> = None;
        for seed in seeds {
            let (x, its) = self.newton(seed);
            let r = self.norm(x);
            if r <= 1e-12 * scale && (self.rho_nu / x[0]).abs() <= 1.0 {
                if nu_hint.is_none() {
                    return Ok((x, its));
                }
                roots.push((x, its));
            } else if best.as_ref().is_none_or(|b| r < b.1) {
                best = Some((x, r));
            }
        }
        if let (Some(hint), false) = (nu_hint, roots.is_empty()) {
            return Ok(roots
                .into_iter()
                .min_by(|a, b| (a.0[0] - hint).abs().total_cmp(&(b.0[0] - hint).abs()))
                .expect("non-empty"));
        }
        let (x, r) = best.expect("at least one seed");
        Err(Error::Numerical(format!(
            "ASV system did not converge: best (nu, kappa, theta) = {x:?}, residual norm {r:.3e}"
        )))
    }

    fn newton(&self, mut x: [f64; 3]) -> ([f64; 3], usize) {
        let mut f = self.norm(x);
        for it in 0..200 {
            let r = self.residual(x);
            let mut jac = [0.0; 9];
            for j in 0..3 {
                let h = 1e-7 * x[j].abs().max(1e-3);
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let (rp, rm) = (self.residual(xp), self.residual(xm));
                for i in 0..3 {
                    jac[i * 3 + j] = (rp[i] - rm[i]) / (2.0 * h);
                }
            }
            let mut rhs = [-r[0], -r[1], -r[2]];
            let Some(dx) = solve_dense(&mut jac, &mut rhs, 3) else {
                return (x, it);
            };
            let mut step = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let trial = [x[0] + step * dx[0], x[1] + step * dx[1], x[2] + step * dx[2]];
                if trial.iter().all(|v| *v > 0.0) {
                    let ft = self.norm(trial);
                    if ft < f || ft == 0.0 {
                        x = trial;
                        f = ft;
                        moved = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !moved || f == 0.0 {
                return (x, it + 1);
            }
        }
        (x, 200)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(rho: f64) -> HestonParams {
        HestonParams {
            x0: 0.04,
            kappa: 3.0,
            theta: 0.09,
            nu: 0.3,
            rho,
        }
    }

    #[test]
    fn derived_values() {
        assert!((iv_short_maturity(&reference(-0.5), 0.2, 0.1) - 0.2234375).abs() < 1e-15);
        assert!((atm_term_slope(&reference(0.0), 0.2) - 0.16875).abs() < 1e-15);
        let (a, _) = long_atm_coefficients(&reference(0.0), 0.2);
        assert!((a - 0.3 * (1.0 - 0.09 / 288.0)).abs() < 1e-15);
    }

    #[test]
    fn trivial_limits() {
        let p = reference(-0.5);
        assert_eq!(iv_short_maturity(&p, 0.2, 0.0), 0.2);
        assert_eq!(iv_atm_term(&p, 0.2, 0.0), 0.2);
        let p0 = reference(0.0);
        assert_eq!(iv_short_maturity(&p0, 0.2, 0.07), iv_short_maturity(&p0, 0.2, -0.07));
        let flat = HestonParams { theta: 0.04, ..p0 };
        assert!((atm_term_slope(&flat, 0.2) + 0.09 / 4.8).abs() < 1e-15);
        let still = HestonParams { nu: 0.0, ..p0 };
        let want = 0.3 + (0.04 - 0.09) / (2.0 * 3.0 * 0.3 * 2.0);
        assert!((iv_long_atm(&still, 0.2, 2.0) - want).abs() < 1e-15);
        assert!((iv_long_atm(&p0, 0.2, 1e12) - long_atm_coefficients(&p0, 0.2).0).abs() < 1e-12);
    }

    fn formula_slices(p: &HestonParams, s0: f64) -> SurfaceSlice {
        SurfaceSlice {
            atm_term_structure: [0.01, 0.02, 0.05, 0.1].iter().map(|&t| (t, iv_atm_term(p, s0, t))).collect(),
            short_smile: [-0.1, -0.04, 0.0, 0.03, 0.1, 0.15].iter().map(|&x| (x, iv_short_maturity(p, s0, x))).collect(),
            long_atm: [2.0, 3.0, 5.0, 8.0].iter().map(|&t| (1.0 / t, iv_long_atm(p, s0, t))).collect(),
        }
    }

    #[test]
    fn round_trip_reference_params() {
        let p = reference(-0.5);
        let fit = calibrate_asv(&formula_slices(&p, 0.2), SmileFit::Quadratic).unwrap();
        let got = fit.params;
        for (a, b) in [(got.sigma0, 0.2), (got.nu, 0.3), (got.kappa, 3.0), (got.theta, 0.09), (got.rho, -0.5)] {
            assert!((a - b).abs() <= 1e-6 * b.abs(), "{got:?}");
        }
        // sign of the fitted smile slope is opposite to rho
        assert!(fit.smile_fit.coefficients[1] > 0.0);
    }

    #[test]
    fn polynomial_fit_is_exact_on_polynomials() {
        let xs = [1.0, 2.0, 3.5, 4.0, 7.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.3 - 0.2 * x + 0.05 * x * x).collect();
        let f = fit_polynomial(&xs, &ys, 2).unwrap();
        assert!((f.coefficients[0] - 0.3).abs() < 1e-12);
        assert!((f.coefficients[1] + 0.2).abs() < 1e-12);
        assert!((f.coefficients[2] - 0.05).abs() < 1e-13);
        assert!(fit_polynomial(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], 1).is_err());
    }

    #[test]
    fn slices_from_surface() {
        let mut pts = Vec::new();
        for &t in &[0.05, 0.1, 1.0, 2.0] {
            for &k in &[90.0, 100.0, 110.0] {
                pts.push(SurfacePoint { maturity: t, strike: k, iv: 0.2 + 0.01 * t });
            }
        }
        let s = SurfaceSlice::from_surface(&pts, 100.0, 0.0, &SliceSelection::default()).unwrap();
        assert_eq!(s.atm_term_structure.len(), 4);
        assert_eq!(s.long_atm.len(), 2);
        assert_eq!(s.short_smile.len(), 3);
        let short_only: Vec<SurfacePoint> = pts.iter().copied().filter(|q| q.maturity < 0.5).collect();
        assert!(SurfaceSlice::from_surface(&short_only, 100.0, 0.0, &SliceSelection::default()).is_err());
    }
}
