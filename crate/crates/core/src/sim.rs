//! Brownian drivers and the Heston / rough Bergomi simulators.
//!
//! Paths are generated in fixed-size blocks. Block `b` draws from its own
//! ChaCha stream `(seed, b)`, so every path is a pure function of
//! `(seed, path index)` and results do not depend on the worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{domain, Result};

/// Paths per RNG block.
pub const BLOCK_SIZE: usize = 512;

/// Uniform grid `t_k = k * dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    n_steps: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps == 0 {
            return domain("time grid needs at least one step");
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return domain(format!("horizon must be positive, got {horizon}"));
        }
        Ok(TimeGrid { n_steps, horizon })
    }

    /// Grid with `steps_per_year` steps per unit time covering `horizon`.
    pub fn with_rate(steps_per_year: usize, horizon: f64) -> Result<Self> {
        let n = (horizon * steps_per_year as f64).round() as usize;
        Self::new(n, horizon)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Grid index of `t`; errors unless `t` is a grid point (to 1e-9).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = t / self.dt();
        let k = x.round();
        if (x - k).abs() > 1e-9 * x.abs().max(1.0) || k < 0.0 || k as usize > self.n_steps {
            return domain(format!(
                "maturity {t} is not a point of the grid (dt = {}, horizon = {})",
                self.dt(),
                self.horizon
            ));
        }
        Ok(k as usize)
    }
}

/// CIR / Heston variance parameters. For the market model `x0` is the
/// initial variance `sigma0^2`; for a primary process it is the start level.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HestonParams {
    pub x0: f64,
    pub kappa: f64,
    pub theta: f64,
    pub nu: f64,
    pub rho: f64,
}

impl HestonParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.nu > 0.0) {
            return domain(format!(
                "kappa and nu must be positive (kappa={}, nu={})",
                self.kappa, self.nu
            ));
        }
        if !(self.theta >= 0.0) {
            return domain(format!("theta must be non-negative, got {}", self.theta));
        }
        if !(self.rho.abs() < 1.0) {
            return domain(format!("|rho| must be < 1, got {}", self.rho));
        }
        if !self.x0.is_finite() {
            return domain("x0 must be finite");
        }
        Ok(())
    }

    /// `2 kappa theta >= nu^2`.
    pub fn feller(&self) -> bool {
        2.0 * self.kappa * self.theta >= self.nu * self.nu
    }

    /// `E[X_t] = theta + (x0 - theta) e^{-kappa t}`.
    pub fn mean_at(&self, t: f64) -> f64 {
        self.theta + (self.x0 - self.theta) * (-self.kappa * t).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoughBergomiParams {
    pub sigma0: f64,
    pub eta: f64,
    pub hurst: f64,
}

impl RoughBergomiParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.hurst > 0.0 && self.hurst < 1.0) {
            return domain(format!("Hurst index must lie in (0,1), got {}", self.hurst));
        }
        if !(self.eta > 0.0 && self.sigma0 > 0.0) {
            return domain(format!(
                "eta and sigma0 must be positive (eta={}, sigma0={})",
                self.eta, self.sigma0
            ));
        }
        Ok(())
    }
}

/// Seeded generator of `(dW, dB)` increment pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrownianSource {
    pub seed: u64,
    pub grid: TimeGrid,
    pub antithetic: bool,
}

impl BrownianSource {
    pub fn new(seed: u64, grid: TimeGrid) -> Self {
        BrownianSource {
            seed,
            grid,
            antithetic: false,
        }
    }

    pub fn n_blocks(&self, n_paths: usize) -> usize {
        n_paths.div_ceil(BLOCK_SIZE)
    }

    /// Increments for `count` paths of block `block`, laid out path-major:
    /// `dw[p * n_steps + k]`. With antithetics, odd paths mirror even ones.
    pub fn block(&self, block: usize, count: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.grid.n_steps();
        let sd = self.grid.dt().sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(block as u64);
        let mut dw = vec![0.0; count * n];
        let mut db = vec![0.0; count * n];
        for p in 0..count {
            let (w, b) = (p * n..(p + 1) * n, p * n..(p + 1) * n);
            if self.antithetic && p % 2 == 1 {
                let prev = (p - 1) * n;
                for k in 0..n {
                    dw[w.start + k] = -dw[prev + k];
                    db[b.start + k] = -db[prev + k];
                }
                continue;
            }
            for x in &mut dw[w] {
                let z: f64 = rng.sample(StandardNormal);
                *x = z * sd;
            }
            for x in &mut db[b] {
                let z: f64 = rng.sample(StandardNormal);
                *x = z * sd;
            }
        }
        (dw, db)
    }

    /// Run `f(first_path_index, dw, db, count)` for every block in parallel
    /// and return the per-block results in block order.
    pub fn map_blocks<T, F>(&self, n_paths: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &[f64], &[f64], usize) -> T + Sync,
    {
        (0..self.n_blocks(n_paths))
            .into_par_iter()
            .map(|b| {
                let start = b * BLOCK_SIZE;
                let count = BLOCK_SIZE.min(n_paths - start);
                let (dw, db) = self.block(b, count);
                f(start, &dw, &db, count)
            })
            .collect()
    }
}

/// Materialized Brownian increments for a batch of paths.
#[derive(Clone, Debug)]
pub struct BrownianBatch {
    pub n_paths: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    /// `dw[p * n_steps + k]`, each `N(0, dt)`.
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

impl BrownianBatch {
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn dw_path(&self, p: usize) -> &[f64] {
        let n = self.n_steps();
        &self.dw[p * n..(p + 1) * n]
    }

    pub fn db_path(&self, p: usize) -> &[f64] {
        let n = self.n_steps();
        &self.db[p * n..(p + 1) * n]
    }

    /// `W_T` per path.
    pub fn terminal_w(&self) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.dw_path(p).iter().sum()).collect()
    }
}

pub fn simulate_brownian(n_paths: usize, n_steps: usize, horizon: f64, seed: u64) -> Result<BrownianBatch> {
    if n_paths == 0 {
        return domain("need at least one path");
    }
    let grid = TimeGrid::new(n_steps, horizon)?;
    let source = BrownianSource::new(seed, grid);
    let blocks = source.map_blocks(n_paths, |_, dw, db, _| (dw.to_vec(), db.to_vec()));
    let mut dw = Vec::with_capacity(n_paths * n_steps);
    let mut db = Vec::with_capacity(n_paths * n_steps);
    for (w, b) in blocks {
        dw.extend(w);
        db.extend(b);
    }
    Ok(BrownianBatch {
        n_paths,
        grid,
        seed,
        dw,
        db,
    })
}

/// `dZ = rho dW + sqrt(1 - rho^2) dB`.
pub fn correlate(dw: &[f64], db: &[f64], rho: f64) -> Result<Vec<f64>> {
    if !(rho.abs() <= 1.0) {
        return domain(format!("correlation {rho} outside [-1, 1]"));
    }
    if dw.len() != db.len() {
        return domain("increment arrays differ in length");
    }
    let c = (1.0 - rho * rho).sqrt();
    Ok(dw.iter().zip(db).map(|(w, b)| rho * w + c * b).collect())
}

pub(crate) fn correlate_into(dw: &[f64], db: &[f64], rho: f64, out: &mut [f64]) {
    let c = (1.0 - rho * rho).sqrt();
    for ((o, w), b) in out.iter_mut().zip(dw).zip(db) {
        *o = rho * w + c * b;
    }
}

/// Full-truncation Euler scheme for `dX = kappa (theta - X) dt + nu sqrt(X) dW`:
/// `X_{k+1} = X_k + kappa (theta - X_k^+) dt + nu sqrt(X_k^+) dW_k`.
/// Returns the raw scheme states (length `dw.len() + 1`); only `X^+` ever
/// enters a square root.
pub fn euler_cir(params: &HestonParams, dw: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(dw.len() + 1);
    euler_cir_into(params, dw, dt, &mut out);
    out
}

pub(crate) fn euler_cir_into(params: &HestonParams, dw: &[f64], dt: f64, out: &mut Vec<f64>) {
    out.clear();
    let mut x = params.x0;
    out.push(x);
    for &w in dw {
        let xp = x.max(0.0);
        x += params.kappa * (params.theta - xp) * dt + params.nu * xp.sqrt() * w;
        out.push(x);
    }
}

/// Discretized Volterra kernel `K_H(t,s) = sqrt(2H) (t-s)^{H-1/2}`.
///
/// Lag-`m` weight (cell `[t_{k-m}, t_{k-m+1}]` seen from `t_k`) is the
/// left-point value `sqrt(2H) (m dt)^{H-1/2}` for `m >= 2` and the exact
/// cell average `sqrt(2H) dt^{H-1/2} / (H + 1/2)` for the diagonal cell.
/// Each row is then rescaled so `Var(W^H_{t_k}) = t_k^{2H}` exactly.
#[derive(Clone, Debug)]
pub struct VolterraKernel {
    hurst: f64,
    dt: f64,
    lag_weights: Vec<f64>,
    row_scale: Vec<f64>,
}

impl VolterraKernel {
    pub fn new(hurst: f64, grid: &TimeGrid) -> Result<Self> {
        if !(hurst > 0.0 && hurst < 1.0) {
            return domain(format!("Hurst index must lie in (0,1), got {hurst}"));
        }
        let n = grid.n_steps();
        let dt = grid.dt();
        if hurst == 0.5 {
            return Ok(VolterraKernel {
                hurst,
                dt,
                lag_weights: vec![1.0; n + 1],
                row_scale: vec![1.0; n + 1],
            });
        }
        let c = (2.0 * hurst).sqrt();
        let a = hurst - 0.5;
        let mut lag_weights = vec![0.0; n + 1];
        for (m, w) in lag_weights.iter_mut().enumerate().skip(1) {
            *w = if m == 1 {
                c * dt.powf(a) / (hurst + 0.5)
            } else {
                c * (m as f64 * dt).powf(a)
            };
        }
        let mut row_scale = vec![1.0; n + 1];
        let mut sum_sq = 0.0;
        for k in 1..=n {
            sum_sq += lag_weights[k] * lag_weights[k];
            let target = (grid.time(k)).powf(2.0 * hurst);
            row_scale[k] = (target / (sum_sq * dt)).sqrt();
        }
        Ok(VolterraKernel {
            hurst,
            dt,
            lag_weights,
            row_scale,
        })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    /// Effective weight on `dW_j` for `W^H_{t_k}`, `j < k`.
    pub fn weight(&self, k: usize, j: usize) -> f64 {
        self.row_scale[k] * self.lag_weights[k - j]
    }

    /// `W^H` at every grid point of one path (length `dw.len() + 1`).
    pub fn apply(&self, dw: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(dw.len() + 1);
        self.apply_into(dw, &mut out);
        out
    }

    pub(crate) fn apply_into(&self, dw: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(0.0);
        let unit = self.hurst == 0.5;
        for k in 1..=dw.len() {
            let mut acc = 0.0;
            if unit {
                for &w in &dw[..k] {
                    acc += w;
                }
            } else {
                for (j, &w) in dw[..k].iter().enumerate() {
                    acc += self.lag_weights[k - j] * w;
                }
                acc *= self.row_scale[k];
            }
            out.push(acc);
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

/// Volterra fBM paths for every path in the batch.
pub fn volterra_fbm(hurst: f64, batch: &BrownianBatch) -> Result<Vec<Vec<f64>>> {
    let kernel = VolterraKernel::new(hurst, &batch.grid)?;
    Ok((0..batch.n_paths).map(|p| kernel.apply(batch.dw_path(p))).collect())
}

/// `sigma_t = sigma0 exp(eta W^H_t / 2 - eta^2 t^{2H} / 4)`, so that
/// `sigma_t^2 = sigma0^2 exp(eta W^H_t - eta^2 t^{2H} / 2)`.
pub fn rough_bergomi_vol(params: &RoughBergomiParams, wh: &[f64], grid: &TimeGrid) -> Vec<f64> {
    wh.iter()
        .enumerate()
        .map(|(k, &x)| {
            let t2h = grid.time(k).powf(2.0 * params.hurst);
            params.sigma0 * (0.5 * params.eta * x - 0.25 * params.eta * params.eta * t2h).exp()
        })
        .collect()
}

/// Volatility dynamics of a synthetic market.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MarketModel {
    /// Heston: `params.x0` is the initial variance, `params.rho` the
    /// spot/vol correlation.
    Heston(HestonParams),
    RoughBergomi { params: RoughBergomiParams, rho: f64 },
}

impl MarketModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            MarketModel::Heston(p) => p.validate(),
            MarketModel::RoughBergomi { params, rho } => {
                params.validate()?;
                if !(rho.abs() < 1.0) {
                    return domain(format!("|rho| must be < 1, got {rho}"));
                }
                Ok(())
            }
        }
    }

    pub fn rho(&self) -> f64 {
        match self {
            MarketModel::Heston(p) => p.rho,
            MarketModel::RoughBergomi { rho, .. } => *rho,
        }
    }
}

/// Simulated terminal prices, one column per maturity.
#[derive(Clone, Debug)]
pub struct TerminalPrices {
    pub maturities: Vec<f64>,
    pub r: f64,
    /// `prices[m][p]` = undiscounted `S_{T_m}` on path `p`.
    pub prices: Vec<Vec<f64>>,
}

impl TerminalPrices {
    /// `e^{-r T_m} S_{T_m}` for maturity column `m`.
    pub fn discounted(&self, m: usize) -> Vec<f64> {
        let df = (-self.r * self.maturities[m]).exp();
        self.prices[m].iter().map(|s| s * df).collect()
    }

    pub fn n_paths(&self) -> usize {
        self.prices.first().map_or(0, Vec::len)
    }
}

/// Log-Euler simulation of `dS = r S dt + sigma_t S dZ` under the chosen
/// volatility model:
/// `ln S_{k+1} = ln S_k + (r - sigma_k^2 / 2) dt + sigma_k dZ_k`.
pub fn market_terminal_prices(
    model: &MarketModel,
    s0: f64,
    r: f64,
    maturities: &[f64],
    n_paths: usize,
    source: &BrownianSource,
) -> Result<TerminalPrices> {
    model.validate()?;
    if !(s0 > 0.0) {
        return domain("spot must be positive");
    }
    if n_paths == 0 {
        return domain("need at least one path");
    }
    let grid = source.grid;
    let idx: Vec<usize> = maturities.iter().map(|&t| grid.index_of(t)).collect::<Result<_>>()?;
    if idx.iter().any(|&k| k == 0) {
        return domain("maturities must be positive");
    }
    let last = *idx.iter().max().expect("non-empty maturities");
    let kernel = match model {
        MarketModel::RoughBergomi { params, .. } => Some(VolterraKernel::new(params.hurst, &grid)?),
        MarketModel::Heston(_) => None,
    };
    let dt = grid.dt();
    let rho = model.rho();
    let n = grid.n_steps();
    // (grid index, maturity column) in time order
    let mut order: Vec<(usize, usize)> = idx.iter().copied().enumerate().map(|(m, k)| (k, m)).collect();
    order.sort_unstable();

    let blocks = source.map_blocks(n_paths, |_, dw, db, count| {
        let mut out = vec![Vec::with_capacity(count); idx.len()];
        let mut vol = Vec::with_capacity(n + 1);
        let mut dz = vec![0.0; n];
        let mut aux = Vec::with_capacity(n + 1);
        for p in 0..count {
            let dwp = &dw[p * n..p * n + last];
            let dbp = &db[p * n..p * n + last];
            correlate_into(dwp, dbp, rho, &mut dz[..last]);
            vol.clear();
            match model {
                MarketModel::Heston(hp) => {
                    euler_cir_into(hp, dwp, dt, &mut aux);
                    vol.extend(aux.iter().map(|v| v.max(0.0).sqrt()));
                }
                MarketModel::RoughBergomi { params, .. } => {
                    kernel.as_ref().expect("kernel").apply_into(dwp, &mut aux);
                    let eta = params.eta;
                    vol.extend(aux.iter().enumerate().map(|(k, &x)| {
                        let t2h = grid.time(k).powf(2.0 * params.hurst);
                        params.sigma0 * (0.5 * eta * x - 0.25 * eta * eta * t2h).exp()
                    }));
                }
            }
            let mut log_s = s0.ln();
            let mut next = 0;
            for k in 0..last {
                let s = vol[k];
                log_s += (r - 0.5 * s * s) * dt + s * dz[k];
                while next < order.len() && order[next].0 == k + 1 {
                    out[order[next].1].push(log_s.exp());
                    next += 1;
                }
            }
        }
        out
    });

    let mut prices = vec![Vec::with_capacity(n_paths); idx.len()];
    for block in blocks {
        for (col, vals) in prices.iter_mut().zip(block) {
            col.extend(vals);
        }
    }
    Ok(TerminalPrices {
        maturities: maturities.to_vec(),
        r,
        prices,
    })
}
