//! Inverse-Vega weighted least-squares calibration of the signature
//! coefficients against call quotes, priced over a [`FeatureCache`].
//!
//! For a path with factor `U` and integral `v`, the terminal price is
//! `S0 exp(-|U l|^2 + l.v)`. Perturbing one coordinate by `h` changes the
//! exponent by `-(2h <U l, U e_i> + h^2 |U e_i|^2) + h v_i`, so all `2 d_N`
//! central-difference prices come from one pass over the path.

use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::features::FeatureCache;
use crate::optim::{minimize, Bounds, Objective, OptimConfig, OptimStatus};
use crate::pricing::{bs_vega, clamp_to_bounds, implied_vol, OptionQuote};
use crate::tensor::Labeling;

/// Paths per reduction block. Block sums are added in index order, so the
/// loss does not depend on the number of worker threads.
pub const REDUCTION_BLOCK: usize = 4096;

/// Smallest Vega used for weights; smaller values are floored here.
pub const VEGA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    InverseVega,
    Uniform,
}

#[derive(Clone, Debug)]
pub struct CalibrationConfig {
    pub maturities: Vec<f64>,
    pub strikes: Vec<f64>,
    pub n_mc: usize,
    pub level: usize,
    pub s0: f64,
    /// Coefficient `w` is boxed to `|l_w| <= bound_scale / |w|!`.
    pub bound_scale: f64,
    pub grad_tol: f64,
    pub f_tol: f64,
    pub max_iter: usize,
    /// Relative central-difference step.
    pub fd_step: f64,
    pub seed: u64,
    pub weight_mode: WeightMode,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            maturities: vec![0.1, 0.6, 1.1, 1.6],
            strikes: vec![90.0, 95.0, 100.0, 105.0, 110.0],
            n_mc: 800_000,
            level: 3,
            s0: 100.0,
            bound_scale: 5.0,
            grad_tol: 1e-8,
            f_tol: 1e-12,
            max_iter: 500,
            fd_step: 1e-6,
            seed: 2,
            weight_mode: WeightMode::InverseVega,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mc < 1000 {
            return domain("n_mc must be at least 1000");
        }
        if !(2..=3).contains(&self.level) {
            return domain("signature level must be 2 or 3");
        }
        if !(self.grad_tol > 0.0) || self.f_tol < 0.0 || !(self.fd_step > 0.0) {
            return domain("tolerances and step must be positive");
        }
        if !(self.s0 > 0.0) || !(self.bound_scale > 0.0) {
            return domain("s0 and bound_scale must be positive");
        }
        if self.maturities.is_empty() || self.strikes.is_empty() {
            return domain("empty maturity or strike grid");
        }
        Ok(())
    }

    /// Box `|l_w| <= bound_scale / |w|!`.
    pub fn bounds(&self, dim: usize) -> Result<Bounds> {
        let lab = Labeling::new(dim, self.level)?;
        let mut upper = Vec::with_capacity(lab.size());
        let mut fact = 1.0;
        for k in 0..=self.level {
            if k > 0 {
                fact *= k as f64;
            }
            upper.extend(std::iter::repeat_n(self.bound_scale / fact, lab.level_len(k)));
        }
        let lower = upper.iter().map(|u| -u).collect();
        Bounds::new(lower, upper)
    }
}

/// Fill in market implied vols (prices clamped to no-arbitrage bounds
/// first). Returns the number of clamped quotes.
pub fn attach_implied_vols(quotes: &mut [OptionQuote], s0: f64, r: f64) -> Result<usize> {
    let mut clamped = 0;
    for q in quotes.iter_mut() {
        let (p, c) = clamp_to_bounds(q.price, s0, q.strike, q.maturity, r);
        clamped += c as usize;
        q.implied_vol = Some(implied_vol(p, s0, q.strike, q.maturity, r)?);
    }
    Ok(clamped)
}

/// `1 / vega` at the market implied vol, normalized to sum to the number of
/// quotes. Returns the weights and how many Vegas hit [`VEGA_FLOOR`].
pub fn weights_inverse_vega(quotes: &[OptionQuote], s0: f64, r: f64) -> Result<(Vec<f64>, usize)> {
    if quotes.is_empty() {
        return Ok((Vec::new(), 0));
    }
    let mut floored = 0;
    let mut raw = Vec::with_capacity(quotes.len());
    for q in quotes {
        let iv = match q.implied_vol {
            Some(v) => v,
            None => {
                let (p, _) = clamp_to_bounds(q.price, s0, q.strike, q.maturity, r);
                implied_vol(p, s0, q.strike, q.maturity, r)?
            }
        };
        let mut vega = bs_vega(s0, q.strike, q.maturity, r, iv);
        if !(vega >= VEGA_FLOOR) {
            vega = VEGA_FLOOR;
            floored += 1;
        }
        raw.push(1.0 / vega);
    }
    let total: f64 = raw.iter().sum();
    let scale = quotes.len() as f64 / total;
    Ok((raw.into_iter().map(|w| w * scale).collect(), floored))
}

/// Apply a weight mode to the quotes in place.
pub fn assign_weights(quotes: &mut [OptionQuote], mode: WeightMode, s0: f64, r: f64) -> Result<usize> {
    match mode {
        WeightMode::Uniform => {
            quotes.iter_mut().for_each(|q| q.weight = 1.0);
            Ok(0)
        }
        WeightMode::InverseVega => {
            let (w, floored) = weights_inverse_vega(quotes, s0, r)?;
            for (q, w) in quotes.iter_mut().zip(w) {
                q.weight = w;
            }
            Ok(floored)
        }
    }
}

struct Group {
    column: usize,
    /// `(quote index, strike)`
    quotes: Vec<(usize, f64)>,
}

/// Monte Carlo pricer for a fixed quote set over a feature cache.
pub struct SigPricer<'a> {
    cache: &'a FeatureCache,
    s0: f64,
    groups: Vec<Group>,
    n_quotes: usize,
}

/// Prices at `l` and at `l +- h_i e_i`.
#[derive(Clone, Debug)]
pub struct PerturbedPrices {
    pub base: Vec<f64>,
    /// `plus[i][q]`
    pub plus: Vec<Vec<f64>>,
    pub minus: Vec<Vec<f64>>,
}

impl<'a> SigPricer<'a> {
    pub fn new(cache: &'a FeatureCache, quotes: &[OptionQuote], s0: f64) -> Result<Self> {
        if cache.n_valid() == 0 {
            return Err(Error::Numerical("feature cache has no valid paths".into()));
        }
        let mut groups: Vec<Group> = Vec::new();
        for (qi, q) in quotes.iter().enumerate() {
            let column = cache.maturity_index(q.maturity)?;
            match groups.iter_mut().find(|g| g.column == column) {
                Some(g) => g.quotes.push((qi, q.strike)),
                None => groups.push(Group {
                    column,
                    quotes: vec![(qi, q.strike)],
                }),
            }
        }
        Ok(SigPricer {
            cache,
            s0,
            groups,
            n_quotes: quotes.len(),
        })
    }

    fn check(&self, ell: &[f64]) -> Result<()> {
        if ell.len() != self.cache.size() {
            return domain(format!(
                "coefficient vector has length {}, cache expects {}",
                ell.len(),
                self.cache.size()
            ));
        }
        Ok(())
    }

    /// Call prices and standard errors for every quote.
    pub fn prices_with_se(&self, ell: &[f64]) -> Result<Vec<(f64, f64)>> {
        self.check(ell)?;
        let n = self.cache.size();
        let nv = self.cache.n_valid() as f64;
        let mut out = vec![(0.0, 0.0); self.n_quotes];
        for g in &self.groups {
            let k = g.quotes.len();
            let blocks = self.cache.map_paths(g.column, REDUCTION_BLOCK, |it| {
                let mut acc = vec![0.0; 2 * k];
                for (u, v) in it {
                    let s = path_price(u, v, n, ell, self.s0);
                    for (j, &(_, strike)) in g.quotes.iter().enumerate() {
                        let p = (s - strike).max(0.0);
                        acc[2 * j] += p;
                        acc[2 * j + 1] += p * p;
                    }
                }
                acc
            });
            let total = sum_blocks(blocks, 2 * k);
            for (j, &(qi, _)) in g.quotes.iter().enumerate() {
                let mean = total[2 * j] / nv;
                let var = if nv > 1.0 {
                    ((total[2 * j + 1] - nv * mean * mean) / (nv - 1.0)).max(0.0)
                } else {
                    0.0
                };
                out[qi] = (mean, (var / nv).sqrt());
            }
        }
        Ok(out)
    }

    pub fn prices(&self, ell: &[f64]) -> Result<Vec<f64>> {
        Ok(self.prices_with_se(ell)?.into_iter().map(|p| p.0).collect())
    }

    /// Prices at `l` and at each `l +- steps[i] e_i`, from one pass over
    /// the paths.
    pub fn perturbed_prices(&self, ell: &[f64], steps: &[f64]) -> Result<PerturbedPrices> {
        self.check(ell)?;
        if steps.len() != ell.len() {
            return domain("one step per coefficient is required");
        }
        let n = self.cache.size();
        let nv = self.cache.n_valid() as f64;
        let mut base = vec![0.0; self.n_quotes];
        let mut plus = vec![vec![0.0; self.n_quotes]; n];
        let mut minus = vec![vec![0.0; self.n_quotes]; n];
        for g in &self.groups {
            let k = g.quotes.len();
            // layout: [base k | plus n*k | minus n*k]
            let width = k * (1 + 2 * n);
            let blocks = self.cache.map_paths(g.column, REDUCTION_BLOCK, |it| {
                let mut acc = vec![0.0; width];
                let mut ul = vec![0.0; n];
                let mut cross = vec![0.0; n];
                let mut col_sq = vec![0.0; n];
                for (u, v) in it {
                    // U l and column norms / cross terms of U
                    let mut off = 0;
                    for i in 0..n {
                        let row = &u[off..off + n - i];
                        ul[i] = row.iter().zip(&ell[i..]).map(|(a, b)| a * b).sum();
                        off += n - i;
                    }
                    cross.iter_mut().for_each(|c| *c = 0.0);
                    col_sq.iter_mut().for_each(|c| *c = 0.0);
                    let mut off = 0;
                    for i in 0..n {
                        let row = &u[off..off + n - i];
                        for (jj, &uij) in row.iter().enumerate() {
                            cross[i + jj] += ul[i] * uij;
                            col_sq[i + jj] += uij * uij;
                        }
                        off += n - i;
                    }
                    let a: f64 = ul.iter().map(|x| x * x).sum();
                    let b: f64 = ell.iter().zip(v).map(|(x, y)| x * y).sum();
                    let s = self.s0 * (b - a).exp();
                    for (j, &(_, strike)) in g.quotes.iter().enumerate() {
                        acc[j] += (s - strike).max(0.0);
                    }
                    for i in 0..n {
                        let h = steps[i];
                        let quad = h * h * col_sq[i];
                        let lin = h * (v[i] - 2.0 * cross[i]);
                        let sp = s * (lin - quad).exp();
                        let sm = s * (-lin - quad).exp();
                        let pbase = k + i * k;
                        let mbase = k + n * k + i * k;
                        for (j, &(_, strike)) in g.quotes.iter().enumerate() {
                            acc[pbase + j] += (sp - strike).max(0.0);
                            acc[mbase + j] += (sm - strike).max(0.0);
                        }
                    }
                }
                acc
            });
            let total = sum_blocks(blocks, width);
            for (j, &(qi, _)) in g.quotes.iter().enumerate() {
                base[qi] = total[j] / nv;
                for i in 0..n {
                    plus[i][qi] = total[k + i * k + j] / nv;
                    minus[i][qi] = total[k + n * k + i * k + j] / nv;
                }
            }
        }
        Ok(PerturbedPrices { base, plus, minus })
    }
}

#[inline]
fn path_price(u: &[f64], v: &[f64], n: usize, ell: &[f64], s0: f64) -> f64 {
    let a = crate::model::quad_form(u, n, ell);
    let b: f64 = ell.iter().zip(v).map(|(x, y)| x * y).sum();
    s0 * (b - a).exp()
}

fn sum_blocks(blocks: Vec<Vec<f64>>, width: usize) -> Vec<f64> {
    let mut total = vec![0.0; width];
    for b in blocks {
        for (t, x) in total.iter_mut().zip(b) {
            *t += x;
        }
    }
    total
}

/// Weighted squared price error.
pub fn weighted_loss(quotes: &[OptionQuote], model: &[f64]) -> f64 {
    quotes
        .iter()
        .zip(model)
        .map(|(q, c)| q.weight * (q.price - c).powi(2))
        .sum()
}

/// `sum_i gamma_i (C^mkt_i - C_i(l))^2` over the cached paths.
pub fn loss(ell: &[f64], quotes: &[OptionQuote], cache: &FeatureCache, s0: f64) -> Result<f64> {
    if quotes.iter().any(|q| !(q.weight >= 0.0)) {
        return domain("weights must be non-negative");
    }
    let pricer = SigPricer::new(cache, quotes, s0)?;
    Ok(weighted_loss(quotes, &pricer.prices(ell)?))
}

/// Loss plus its central-difference gradient with per-coordinate steps
/// `h_i = rel_step * max(1, |l_i|)`.
pub fn loss_and_gradient(pricer: &SigPricer<'_>, quotes: &[OptionQuote], ell: &[f64], rel_step: f64) -> Result<(f64, Vec<f64>)> {
    let steps: Vec<f64> = ell.iter().map(|l| rel_step * l.abs().max(1.0)).collect();
    let pp = pricer.perturbed_prices(ell, &steps)?;
    let value = weighted_loss(quotes, &pp.base);
    let grad = (0..ell.len())
        .map(|i| {
            // L+ - L- = sum w (r+ - r-)(r+ + r-), accurate for tiny steps
            let diff: f64 = quotes
                .iter()
                .enumerate()
                .map(|(q, quote)| {
                    let rp = quote.price - pp.plus[i][q];
                    let rm = quote.price - pp.minus[i][q];
                    quote.weight * (rp - rm) * (rp + rm)
                })
                .sum();
            diff / (2.0 * steps[i])
        })
        .collect();
    Ok((value, grad))
}

struct LossObjective<'p, 'c> {
    pricer: &'p SigPricer<'c>,
    quotes: &'p [OptionQuote],
    rel_step: f64,
    error: Option<Error>,
}

impl Objective for LossObjective<'_, '_> {
    fn value(&mut self, x: &[f64]) -> f64 {
        match self.pricer.prices(x) {
            Ok(p) => weighted_loss(self.quotes, &p),
            Err(e) => {
                self.error.get_or_insert(e);
                f64::NAN
            }
        }
    }

    fn value_and_gradient(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        match loss_and_gradient(self.pricer, self.quotes, x, self.rel_step) {
            Ok(r) => r,
            Err(e) => {
                self.error.get_or_insert(e);
                (f64::NAN, vec![0.0; x.len()])
            }
        }
    }
}

/// One calibrated contract.
#[derive(Clone, Debug, Serialize)]
pub struct ContractFit {
    pub maturity: f64,
    pub strike: f64,
    pub weight: f64,
    pub market_price: f64,
    pub model_price: f64,
    pub model_price_se: f64,
    pub market_iv: f64,
    pub model_iv: Option<f64>,
    pub abs_iv_error: Option<f64>,
    /// Model price had to be clamped into the no-arbitrage band before inversion.
    pub clamped: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationResult {
    pub ell_star: Vec<f64>,
    pub initial_ell: Vec<f64>,
    pub loss: f64,
    pub n_iterations: usize,
    pub n_evaluations: usize,
    pub status: OptimStatus,
    pub converged: bool,
    pub loss_history: Vec<f64>,
    pub contracts: Vec<ContractFit>,
    pub factorization_failures: usize,
    pub ridged_factorizations: usize,
    pub floored_vegas: usize,
    /// Euclidean norm of each level block of `ell_star` (decay diagnostic).
    pub level_norms: Vec<f64>,
}

impl CalibrationResult {
    /// Largest absolute IV error; `None` if some model IV failed to invert.
    pub fn max_iv_error(&self) -> Option<f64> {
        self.contracts
            .iter()
            .map(|c| c.abs_iv_error)
            .try_fold(0.0f64, |m, e| e.map(|e| m.max(e)))
    }
}

/// `(mean market ATM IV, 0, ..., 0)`; ATM is the strike closest to `S0`.
pub fn initial_guess(quotes: &[OptionQuote], s0: f64, size: usize) -> Result<Vec<f64>> {
    let best = quotes
        .iter()
        .map(|q| (q.strike - s0).abs())
        .fold(f64::INFINITY, f64::min);
    let atm: Vec<f64> = quotes
        .iter()
        .filter(|q| (q.strike - s0).abs() <= best + 1e-12)
        .filter_map(|q| q.implied_vol)
        .collect();
    if atm.is_empty() {
        return domain("no at-the-money implied vol to initialize from");
    }
    let mut ell = vec![0.0; size];
    ell[0] = atm.iter().sum::<f64>() / atm.len() as f64;
    Ok(ell)
}

/// Calibrate `l` to the quotes with a fresh inverse-Vega (or uniform)
/// weighting and the default initial guess.
pub fn calibrate(config: &CalibrationConfig, quotes: &[OptionQuote], cache: &FeatureCache) -> Result<CalibrationResult> {
    config.validate()?;
    if cache.spec().level != config.level {
        return domain("cache level differs from the calibration level");
    }
    let mut quotes = quotes.to_vec();
    attach_implied_vols(&mut quotes, config.s0, 0.0)?;
    let floored = assign_weights(&mut quotes, config.weight_mode, config.s0, 0.0)?;
    let x0 = initial_guess(&quotes, config.s0, cache.size())?;
    calibrate_from(config, &quotes, cache, &x0, floored)
}

/// Calibrate starting at `x0`, with the weights already on the quotes.
pub fn calibrate_from(
    config: &CalibrationConfig,
    quotes: &[OptionQuote],
    cache: &FeatureCache,
    x0: &[f64],
    floored_vegas: usize,
) -> Result<CalibrationResult> {
    config.validate()?;
    let pricer = SigPricer::new(cache, quotes, config.s0)?;
    let bounds = config.bounds(cache.spec().dim())?;
    let mut obj = LossObjective {
        pricer: &pricer,
        quotes,
        rel_step: config.fd_step,
        error: None,
    };
    let opt_cfg = OptimConfig {
        grad_tol: config.grad_tol,
        f_tol: config.f_tol,
        max_iter: config.max_iter,
        ..Default::default()
    };
    let res = minimize(&mut obj, x0, &bounds, &opt_cfg)?;
    if let Some(e) = obj.error {
        return Err(e);
    }
    let priced = pricer.prices_with_se(&res.x)?;
    let contracts = quotes
        .iter()
        .zip(&priced)
        .map(|(q, &(p, se))| contract_fit(q, p, se, config.s0))
        .collect::<Result<Vec<_>>>()?;
    let lab = Labeling::new(cache.spec().dim(), config.level)?;
    let level_norms = (0..=config.level)
        .map(|k| res.x[lab.level_range(k)].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    Ok(CalibrationResult {
        ell_star: res.x,
        initial_ell: x0.to_vec(),
        loss: res.value,
        n_iterations: res.iterations,
        n_evaluations: res.evaluations,
        status: res.status,
        converged: res.status.converged(),
        loss_history: res.history,
        contracts,
        factorization_failures: cache.failures(),
        ridged_factorizations: cache.ridged(),
        floored_vegas,
        level_norms,
    })
}

fn contract_fit(q: &OptionQuote, model_price: f64, se: f64, s0: f64) -> Result<ContractFit> {
    let market_iv = match q.implied_vol {
        Some(v) => v,
        None => implied_vol(clamp_to_bounds(q.price, s0, q.strike, q.maturity, 0.0).0, s0, q.strike, q.maturity, 0.0)?,
    };
    let (p, clamped) = clamp_to_bounds(model_price, s0, q.strike, q.maturity, 0.0);
    let model_iv = implied_vol(p, s0, q.strike, q.maturity, 0.0).ok();
    Ok(ContractFit {
        maturity: q.maturity,
        strike: q.strike,
        weight: q.weight,
        market_price: q.price,
        model_price,
        model_price_se: se,
        market_iv,
        model_iv,
        abs_iv_error: model_iv.map(|v| (v - market_iv).abs()),
        clamped,
    })
}

/// Separate fit per maturity, each started from that maturity's ATM IV.
/// Weights are recomputed within each smile.
pub fn smile_calibrate(config: &CalibrationConfig, quotes: &[OptionQuote], cache: &FeatureCache) -> Result<Vec<CalibrationResult>> {
    let mut mats: Vec<f64> = Vec::new();
    for q in quotes {
        if !mats.iter().any(|m| (m - q.maturity).abs() < 1e-9) {
            mats.push(q.maturity);
        }
    }
    mats.sort_by(f64::total_cmp);
    mats.iter()
        .map(|&t| {
            let subset: Vec<OptionQuote> = quotes
                .iter()
                .filter(|q| (q.maturity - t).abs() < 1e-9)
                .cloned()
                .collect();
            calibrate(config, &subset, cache)
        })
        .collect()
}
