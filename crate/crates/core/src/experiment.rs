//! Experiment orchestration: configuration, synthetic markets, both
//! calibrations and the comparison tables, plus the CSV/JSON files that
//! carry results between CLI steps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::asv::{calibrate_asv, AsvCalibration, AsvParams, SliceSelection, SmileFit, SurfacePoint, SurfaceSlice};
use crate::calibration::{
    calibrate, smile_calibrate, CalibrationConfig, CalibrationResult, WeightMode,
};
use crate::error::{domain, Error, Result};
use crate::features::{FeatureCache, FeatureSpec};
use crate::pricing::{clamp_to_bounds, implied_vol, mc_call_price, OptionQuote};
use crate::sim::{market_terminal_prices, BrownianSource, HestonParams, MarketModel, RoughBergomiParams, TimeGrid};

/// Market dynamics as written in a config file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum MarketSpec {
    Heston { sigma0: f64, nu: f64, kappa: f64, theta: f64, rho: f64 },
    RoughBergomi { sigma0: f64, eta: f64, hurst: f64, rho: f64 },
}

impl MarketSpec {
    pub fn model(&self) -> MarketModel {
        match *self {
            MarketSpec::Heston { sigma0, nu, kappa, theta, rho } => MarketModel::Heston(HestonParams {
                x0: sigma0 * sigma0,
                kappa,
                theta,
                nu,
                rho,
            }),
            MarketSpec::RoughBergomi { sigma0, eta, hurst, rho } => MarketModel::RoughBergomi {
                params: RoughBergomiParams { sigma0, eta, hurst },
                rho,
            },
        }
    }

    pub fn asv_truth(&self) -> Option<AsvParams> {
        match *self {
            MarketSpec::Heston { sigma0, nu, kappa, theta, rho } => Some(AsvParams {
                sigma0,
                nu,
                kappa,
                theta,
                rho,
            }),
            MarketSpec::RoughBergomi { .. } => None,
        }
    }
}

/// Optimizer settings of the signature calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    pub bound_scale: f64,
    pub grad_tol: f64,
    pub f_tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
    pub weight_mode: WeightMode,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        let c = CalibrationConfig::default();
        CalibrationSettings {
            bound_scale: c.bound_scale,
            grad_tol: c.grad_tol,
            f_tol: c.f_tol,
            max_iter: c.max_iter,
            fd_step: c.fd_step,
            weight_mode: c.weight_mode,
        }
    }
}

/// The implied-vol surface fed to the asymptotic calibration. It is
/// simulated separately from the quote grid because the regressions need
/// maturities well below and above the calibration grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsvSettings {
    pub enabled: bool,
    pub maturities: Vec<f64>,
    pub strikes: Vec<f64>,
    pub selection: SliceSelection,
    pub smile_fit: SmileFit,
    /// Added to the market seed for the surface simulation.
    pub seed_offset: u64,
}

impl Default for AsvSettings {
    fn default() -> Self {
        AsvSettings {
            enabled: true,
            maturities: vec![0.02, 0.04, 0.06, 0.08, 0.1, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0],
            strikes: vec![96.0, 98.0, 100.0, 102.0, 104.0],
            selection: SliceSelection {
                atm_max_t: 0.1,
                short_max_t: 0.15,
                long_min_t: 1.0,
            },
            smile_fit: SmileFit::Quadratic,
            seed_offset: 7,
        }
    }
}

/// Everything that defines an experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub market: MarketSpec,
    /// Driver of the signature model; `rho` correlates the asset noise with it.
    pub primary: HestonParams,
    pub s0: f64,
    pub r: f64,
    pub maturities: Vec<f64>,
    pub strikes: Vec<f64>,
    pub steps_per_year: usize,
    pub n_mc_market: usize,
    pub n_mc_calib: usize,
    pub paper_scale_paths: usize,
    pub market_seed: u64,
    pub calib_seed: u64,
    pub antithetic: bool,
    pub level: usize,
    pub calibration: CalibrationSettings,
    pub asv: AsvSettings,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "uncorrelated".into(),
            market: MarketSpec::Heston {
                sigma0: 0.2,
                nu: 0.3,
                kappa: 3.0,
                theta: 0.09,
                rho: 0.0,
            },
            primary: HestonParams {
                x0: 0.1,
                kappa: 2.0,
                theta: 0.15,
                nu: 0.2,
                rho: 0.0,
            },
            s0: 100.0,
            r: 0.0,
            maturities: vec![0.1, 0.6, 1.1, 1.6],
            strikes: vec![90.0, 95.0, 100.0, 105.0, 110.0],
            steps_per_year: 300,
            n_mc_market: 100_000,
            n_mc_calib: 100_000,
            paper_scale_paths: 800_000,
            market_seed: 1,
            calib_seed: 2,
            antithetic: false,
            level: 3,
            calibration: CalibrationSettings::default(),
            asv: AsvSettings::default(),
            out_dir: PathBuf::from("runs/uncorrelated"),
        }
    }
}

impl ExperimentSpec {
    /// Uncorrelated Heston market with the matching primary process.
    pub fn uncorrelated() -> Self {
        Self::default()
    }

    /// Heston market with `rho = -0.5` and the correlated primary.
    pub fn correlated() -> Self {
        ExperimentSpec {
            name: "correlated".into(),
            market: MarketSpec::Heston {
                sigma0: 0.2,
                nu: 0.3,
                kappa: 3.0,
                theta: 0.09,
                rho: -0.5,
            },
            primary: HestonParams {
                x0: 0.25,
                kappa: 3.3,
                theta: 0.15,
                nu: 0.35,
                rho: -0.5,
            },
            market_seed: 3,
            calib_seed: 4,
            out_dir: PathBuf::from("runs/correlated"),
            ..Self::default()
        }
    }

    /// Rough Bergomi market, `H = 0.1`, uncorrelated primary.
    pub fn rough_bergomi() -> Self {
        ExperimentSpec {
            name: "rough_bergomi".into(),
            market: MarketSpec::RoughBergomi {
                sigma0: 0.2,
                eta: 0.5,
                hurst: 0.1,
                rho: 0.0,
            },
            market_seed: 5,
            asv: AsvSettings {
                enabled: false,
                ..AsvSettings::default()
            },
            out_dir: PathBuf::from("runs/rough_bergomi"),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "uncorrelated" => Ok(Self::uncorrelated()),
            "correlated" => Ok(Self::correlated()),
            "rough_bergomi" | "rough-bergomi" => Ok(Self::rough_bergomi()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.market.model().validate()?;
        self.primary.validate()?;
        if self.market_seed == self.calib_seed {
            return domain("market and calibration seeds must differ");
        }
        if self.maturities.is_empty() || self.strikes.is_empty() {
            return domain("maturity and strike grids must be non-empty");
        }
        if self.maturities.iter().chain(&self.strikes).any(|v| !(*v > 0.0)) {
            return domain("maturities and strikes must be positive");
        }
        if !(self.s0 > 0.0) || self.steps_per_year == 0 {
            return domain("s0 and steps_per_year must be positive");
        }
        if self.n_mc_market == 0 || self.n_mc_calib == 0 {
            return domain("path counts must be positive");
        }
        self.grid()?;
        Ok(())
    }

    /// Switch both path counts to the paper-scale value.
    pub fn to_paper_scale(&mut self) {
        self.n_mc_market = self.paper_scale_paths;
        self.n_mc_calib = self.paper_scale_paths;
    }

    /// Grid on `[0, max maturity]` with `steps_per_year` resolution; every
    /// maturity must land on a node.
    pub fn grid(&self) -> Result<TimeGrid> {
        grid_for(&self.maturities, self.steps_per_year)
    }

    pub fn feature_spec(&self) -> Result<FeatureSpec> {
        Ok(FeatureSpec {
            primary: self.primary,
            grid: self.grid()?,
            maturities: self.maturities.clone(),
            level: self.level,
            n_paths: self.n_mc_calib,
            seed: self.calib_seed,
            antithetic: self.antithetic,
        })
    }

    pub fn calibration_config(&self) -> CalibrationConfig {
        let c = &self.calibration;
        CalibrationConfig {
            maturities: self.maturities.clone(),
            strikes: self.strikes.clone(),
            n_mc: self.n_mc_calib,
            level: self.level,
            s0: self.s0,
            bound_scale: c.bound_scale,
            grad_tol: c.grad_tol,
            f_tol: c.f_tol,
            max_iter: c.max_iter,
            fd_step: c.fd_step,
            seed: self.calib_seed,
            weight_mode: c.weight_mode,
        }
    }
}

fn grid_for(maturities: &[f64], steps_per_year: usize) -> Result<TimeGrid> {
    let horizon = maturities.iter().copied().fold(0.0, f64::max);
    let steps = (horizon * steps_per_year as f64).round() as usize;
    let grid = TimeGrid::new(steps.max(1), horizon)?;
    for &t in maturities {
        grid.index_of(t)?;
    }
    Ok(grid)
}

/// Monte Carlo call quotes on a grid, with implied vols attached where the
/// inversion succeeds. Quotes are ordered by maturity, then strike.
pub fn simulate_quotes(
    model: &MarketModel,
    s0: f64,
    r: f64,
    maturities: &[f64],
    strikes: &[f64],
    n_paths: usize,
    source: &BrownianSource,
) -> Result<Vec<OptionQuote>> {
    let terminal = market_terminal_prices(model, s0, r, maturities, n_paths, source)?;
    let mut out = Vec::with_capacity(maturities.len() * strikes.len());
    for (m, &t) in maturities.iter().enumerate() {
        let disc = terminal.discounted(m);
        for &k in strikes {
            let (price, _) = mc_call_price(&disc, k, r, t);
            let mut q = OptionQuote::new(k, t, price);
            let (p, _) = clamp_to_bounds(price, s0, k, t, r);
            q.implied_vol = implied_vol(p, s0, k, t, r).ok();
            out.push(q);
        }
    }
    Ok(out)
}

/// Quotes of the configured market on the calibration grid.
pub fn generate_market(spec: &ExperimentSpec) -> Result<Vec<OptionQuote>> {
    spec.validate()?;
    let source = BrownianSource {
        seed: spec.market_seed,
        grid: spec.grid()?,
        antithetic: spec.antithetic,
    };
    simulate_quotes(
        &spec.market.model(),
        spec.s0,
        spec.r,
        &spec.maturities,
        &spec.strikes,
        spec.n_mc_market,
        &source,
    )
}

/// The regression surface for the asymptotic calibration.
pub fn generate_asv_surface(spec: &ExperimentSpec) -> Result<Vec<SurfacePoint>> {
    spec.validate()?;
    let a = &spec.asv;
    let source = BrownianSource {
        seed: spec.market_seed.wrapping_add(a.seed_offset),
        grid: grid_for(&a.maturities, spec.steps_per_year)?,
        antithetic: spec.antithetic,
    };
    let quotes = simulate_quotes(
        &spec.market.model(),
        spec.s0,
        spec.r,
        &a.maturities,
        &a.strikes,
        spec.n_mc_market,
        &source,
    )?;
    Ok(quotes
        .iter()
        .filter_map(|q| {
            q.implied_vol.map(|iv| SurfacePoint {
                maturity: q.maturity,
                strike: q.strike,
                iv,
            })
        })
        .collect())
}

pub fn run_asv(spec: &ExperimentSpec, surface: &[SurfacePoint]) -> Result<AsvCalibration> {
    let slices = SurfaceSlice::from_surface(surface, spec.s0, spec.r, &spec.asv.selection)?;
    calibrate_asv(&slices, spec.asv.smile_fit)
}

/// Prices of the calibrated Heston model on the quote grid, simulated with
/// the market's random numbers.
pub fn asv_model_quotes(spec: &ExperimentSpec, params: &AsvParams) -> Result<Vec<OptionQuote>> {
    let mut p = params.to_heston();
    // the recovered rho may sit on the boundary
    p.rho = p.rho.clamp(-0.999, 0.999);
    let source = BrownianSource {
        seed: spec.market_seed,
        grid: spec.grid()?,
        antithetic: spec.antithetic,
    };
    simulate_quotes(
        &MarketModel::Heston(p),
        spec.s0,
        spec.r,
        &spec.maturities,
        &spec.strikes,
        spec.n_mc_market,
        &source,
    )
}

/// Build (or load) the feature cache for the spec.
pub fn build_features(spec: &ExperimentSpec) -> Result<FeatureCache> {
    FeatureCache::build(spec.feature_spec()?)
}

/// Load the cache at `path` if present (its header must match the spec),
/// otherwise build it and write it there.
pub fn load_or_build_features(spec: &ExperimentSpec, path: &Path) -> Result<(FeatureCache, bool)> {
    let expected = spec.feature_spec()?;
    if path.exists() {
        let cache = FeatureCache::load_matching(BufReader::new(File::open(path)?), &expected)?;
        return Ok((cache, true));
    }
    let cache = FeatureCache::build(expected)?;
    let tmp = path.with_extension("tmp");
    cache.write_to(BufWriter::new(File::create(&tmp)?))?;
    std::fs::rename(&tmp, path)?;
    Ok((cache, false))
}

fn require_zero_rate(spec: &ExperimentSpec) -> Result<()> {
    if spec.r != 0.0 {
        return domain("the signature model is defined for r = 0");
    }
    Ok(())
}

pub fn run_sig(spec: &ExperimentSpec, quotes: &[OptionQuote], cache: &FeatureCache) -> Result<CalibrationResult> {
    require_zero_rate(spec)?;
    calibrate(&spec.calibration_config(), quotes, cache)
}

pub fn run_sig_per_smile(spec: &ExperimentSpec, quotes: &[OptionQuote], cache: &FeatureCache) -> Result<Vec<CalibrationResult>> {
    require_zero_rate(spec)?;
    smile_calibrate(&spec.calibration_config(), quotes, cache)
}

/// Model prices of a calibration as quotes.
pub fn result_quotes(res: &CalibrationResult) -> Vec<OptionQuote> {
    res.contracts
        .iter()
        .map(|c| {
            let mut q = OptionQuote::new(c.strike, c.maturity, c.model_price);
            q.implied_vol = c.model_iv;
            q
        })
        .collect()
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub maturity: f64,
    pub strike: f64,
    pub iv_sig: Option<f64>,
    pub iv_asv: Option<f64>,
    pub iv_mkt: f64,
    pub e_sig: Option<f64>,
    pub e_asv: Option<f64>,
}

fn iv_of(q: &OptionQuote, s0: f64, r: f64) -> Option<f64> {
    let (p, _) = clamp_to_bounds(q.price, s0, q.strike, q.maturity, r);
    implied_vol(p, s0, q.strike, q.maturity, r).ok()
}

fn find<'a>(quotes: &'a [OptionQuote], t: f64, k: f64) -> Option<&'a OptionQuote> {
    quotes
        .iter()
        .find(|q| (q.maturity - t).abs() < 1e-9 && (q.strike - k).abs() < 1e-9)
}

/// Join market, signature and asymptotic prices; every IV is recomputed
/// from the prices with the same inversion.
pub fn build_report(
    market: &[OptionQuote],
    sig: Option<&[OptionQuote]>,
    asv: Option<&[OptionQuote]>,
    s0: f64,
    r: f64,
) -> Result<Vec<ReportRow>> {
    if sig.is_none() && asv.is_none() {
        return domain("no calibration result to report");
    }
    market
        .iter()
        .map(|m| {
            let iv_mkt = iv_of(m, s0, r)
                .ok_or_else(|| Error::Numerical(format!("market quote T={} K={} does not invert", m.maturity, m.strike)))?;
            let model_iv = |set: Option<&[OptionQuote]>| -> Result<Option<f64>> {
                match set {
                    None => Ok(None),
                    Some(s) => {
                        let q = find(s, m.maturity, m.strike).ok_or_else(|| {
                            Error::Domain(format!("model prices miss contract T={} K={}", m.maturity, m.strike))
                        })?;
                        Ok(iv_of(q, s0, r))
                    }
                }
            };
            let iv_sig = model_iv(sig)?;
            let iv_asv = model_iv(asv)?;
            Ok(ReportRow {
                maturity: m.maturity,
                strike: m.strike,
                iv_sig,
                iv_asv,
                iv_mkt,
                e_sig: iv_sig.map(|v| (v - iv_mkt).abs()),
                e_asv: iv_asv.map(|v| (v - iv_mkt).abs()),
            })
        })
        .collect()
}

// ----- files -----

pub const QUOTES_FILE: &str = "market_quotes.csv";
pub const MARKET_IV_FILE: &str = "market_iv.csv";
pub const ASV_SURFACE_FILE: &str = "asv_surface.csv";
pub const FEATURES_FILE: &str = "features.bin";
pub const SIG_RESULT_FILE: &str = "sig_calibration.json";
pub const SIG_PRICES_FILE: &str = "sig_prices.csv";
pub const SIG_IV_FILE: &str = "sig_iv.csv";
pub const SIG_SMILE_RESULT_FILE: &str = "sig_smile_calibration.json";
pub const SIG_SMILE_PRICES_FILE: &str = "sig_smile_prices.csv";
pub const SIG_SMILE_IV_FILE: &str = "sig_smile_iv.csv";
pub const ASV_RESULT_FILE: &str = "asv_calibration.json";
pub const ASV_PARAMS_FILE: &str = "asv_params.csv";
pub const ASV_PRICES_FILE: &str = "asv_prices.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// `T,K,price`
pub fn write_quotes_csv(path: &Path, quotes: &[OptionQuote]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["T", "K", "price"])?;
    for q in quotes {
        w.write_record([q.maturity.to_string(), q.strike.to_string(), fmt(q.price)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_quotes_csv(path: &Path) -> Result<Vec<OptionQuote>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Config(format!("{}: bad value in column {i}", path.display())))
        };
        out.push(OptionQuote::new(field(1)?, field(0)?, field(2)?));
    }
    Ok(out)
}

/// `T,K,IV`; quotes whose IV did not invert are written with an empty IV.
pub fn write_iv_csv(path: &Path, quotes: &[OptionQuote]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["T", "K", "IV"])?;
    for q in quotes {
        w.write_record([q.maturity.to_string(), q.strike.to_string(), fmt_opt(q.implied_vol)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_surface_csv(path: &Path, points: &[SurfacePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["T", "K", "IV"])?;
    for p in points {
        w.write_record([p.maturity.to_string(), p.strike.to_string(), fmt(p.iv)])?;
    }
    w.flush()?;
    Ok(())
}

/// Read a `T,K,IV` file, skipping rows with an empty IV.
pub fn read_surface_csv(path: &Path) -> Result<Vec<SurfacePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        if get(2).is_empty() {
            continue;
        }
        let parse = |i: usize| -> Result<f64> {
            get(i)
                .parse()
                .map_err(|_| Error::Config(format!("{}: bad value in column {i}", path.display())))
        };
        out.push(SurfacePoint {
            maturity: parse(0)?,
            strike: parse(1)?,
            iv: parse(2)?,
        });
    }
    Ok(out)
}

/// `T,K,IV_SIG,IV_mkt,error`
pub fn write_sig_iv_csv(path: &Path, results: &[CalibrationResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["T", "K", "IV_SIG", "IV_mkt", "error"])?;
    for c in results.iter().flat_map(|r| &r.contracts) {
        w.write_record([
            c.maturity.to_string(),
            c.strike.to_string(),
            fmt_opt(c.model_iv),
            fmt(c.market_iv),
            fmt_opt(c.abs_iv_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `T,K,IV_SIG,IV_ASV,IV_mkt,e_SIG,e_ASV`, dropping the columns of a
/// missing model.
pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let has_sig = rows.iter().any(|r| r.iv_sig.is_some());
    let has_asv = rows.iter().any(|r| r.iv_asv.is_some());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["T", "K"];
    if has_sig {
        header.push("IV_SIG");
    }
    if has_asv {
        header.push("IV_ASV");
    }
    header.push("IV_mkt");
    if has_sig {
        header.push("e_SIG");
    }
    if has_asv {
        header.push("e_ASV");
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.maturity.to_string(), r.strike.to_string()];
        if has_sig {
            rec.push(fmt_opt(r.iv_sig));
        }
        if has_asv {
            rec.push(fmt_opt(r.iv_asv));
        }
        rec.push(fmt(r.iv_mkt));
        if has_sig {
            rec.push(fmt_opt(r.e_sig));
        }
        if has_asv {
            rec.push(fmt_opt(r.e_asv));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One `smile_T<maturity>.csv` per maturity with `K,IV_mkt,IV_SIG,IV_ASV`
/// (missing models dropped). Returns the written paths.
pub fn write_smile_csvs(dir: &Path, rows: &[ReportRow]) -> Result<Vec<PathBuf>> {
    let has_sig = rows.iter().any(|r| r.iv_sig.is_some());
    let has_asv = rows.iter().any(|r| r.iv_asv.is_some());
    let mut mats: Vec<f64> = Vec::new();
    for r in rows {
        if !mats.iter().any(|m| (m - r.maturity).abs() < 1e-9) {
            mats.push(r.maturity);
        }
    }
    let mut paths = Vec::new();
    for t in mats {
        let path = dir.join(format!("smile_T{t}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["K", "IV_mkt"];
        if has_sig {
            header.push("IV_SIG");
        }
        if has_asv {
            header.push("IV_ASV");
        }
        w.write_record(&header)?;
        for r in rows.iter().filter(|r| (r.maturity - t).abs() < 1e-9) {
            let mut rec = vec![r.strike.to_string(), fmt(r.iv_mkt)];
            if has_sig {
                rec.push(fmt_opt(r.iv_sig));
            }
            if has_asv {
                rec.push(fmt_opt(r.iv_asv));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

/// `parameter,value,truth`
pub fn write_asv_params_csv(path: &Path, fit: &AsvCalibration, truth: Option<&AsvParams>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["parameter", "value", "truth"])?;
    let p = &fit.params;
    let rows = [
        ("sigma0", p.sigma0, truth.map(|t| t.sigma0)),
        ("nu", p.nu, truth.map(|t| t.nu)),
        ("kappa", p.kappa, truth.map(|t| t.kappa)),
        ("theta", p.theta, truth.map(|t| t.theta)),
        ("rho", p.rho, truth.map(|t| t.rho)),
    ];
    for (name, v, t) in rows {
        w.write_record([name.to_string(), fmt(v), fmt_opt(t)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Sidecar describing how the files in a run directory were produced. It
/// holds no timestamps, so identical specs give identical manifests.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest<'a> {
    pub crate_version: &'static str,
    pub command: &'a str,
    pub spec: &'a ExperimentSpec,
    pub rng: &'static str,
    pub variance_scheme: &'static str,
    pub price_scheme: &'static str,
    pub fbm_scheme: &'static str,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'a str, spec: &'a ExperimentSpec) -> Self {
        Manifest {
            crate_version: env!("CARGO_PKG_VERSION"),
            command,
            spec,
            rng: "ChaCha8 stream per (seed, block of 512 paths), rand_distr standard normals",
            variance_scheme: "full-truncation Euler",
            price_scheme: "log-Euler",
            fbm_scheme: "left-point Volterra sum, exact diagonal cell, variance-matched rows",
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Write as `manifest_<command>.json` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("manifest_{}.json", self.command.replace('-', "_")));
        write_json(&path, self)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip_through_toml() {
        for spec in [ExperimentSpec::uncorrelated(), ExperimentSpec::correlated(), ExperimentSpec::rough_bergomi()] {
            spec.validate().unwrap();
            let text = spec.to_toml().unwrap();
            assert_eq!(ExperimentSpec::from_toml(&text).unwrap(), spec);
        }
    }

    #[test]
    fn partial_config_uses_defaults() {
        let spec = ExperimentSpec::from_toml("name = \"x\"\nn_mc_calib = 5000\n[market]\nmodel = \"rough_bergomi\"\nsigma0 = 0.2\neta = 0.5\nhurst = 0.1\nrho = 0.0\n").unwrap();
        assert_eq!(spec.n_mc_calib, 5000);
        assert_eq!(spec.strikes.len(), 5);
        assert!(matches!(spec.market, MarketSpec::RoughBergomi { .. }));
    }

    #[test]
    fn equal_seeds_are_rejected() {
        let spec = ExperimentSpec {
            calib_seed: 1,
            ..ExperimentSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn grid_has_dt_one_over_300() {
        let g = ExperimentSpec::default().grid().unwrap();
        assert_eq!(g.n_steps(), 480);
        assert_eq!(g.index_of(0.1).unwrap(), 30);
    }

    #[test]
    fn constant_vol_market_is_flat() {
        // nu tiny and theta = sigma0^2: variance stays at 0.04
        let spec = ExperimentSpec {
            market: MarketSpec::Heston {
                sigma0: 0.2,
                nu: 1e-8,
                kappa: 1.0,
                theta: 0.04,
                rho: 0.0,
            },
            n_mc_market: 20_000,
            ..ExperimentSpec::default()
        };
        let quotes = generate_market(&spec).unwrap();
        assert_eq!(quotes.len(), 20);
        let source = BrownianSource::new(spec.market_seed, spec.grid().unwrap());
        let terminal = market_terminal_prices(&spec.market.model(), 100.0, 0.0, &spec.maturities, 20_000, &source).unwrap();
        for q in &quotes {
            let m = spec.maturities.iter().position(|t| *t == q.maturity).unwrap();
            let (price, se) = mc_call_price(&terminal.discounted(m), q.strike, 0.0, q.maturity);
            assert_eq!(price, q.price);
            let bs = crate::pricing::bs_price(100.0, q.strike, q.maturity, 0.0, 0.2);
            assert!((q.price - bs).abs() < 4.0 * se, "T={} K={}: {} vs {bs} (se {se})", q.maturity, q.strike, q.price);
        }
        // at the money the surface is flat to within a few MC errors
        for q in quotes.iter().filter(|q| q.strike == 100.0) {
            assert!((q.implied_vol.unwrap() - 0.2).abs() < 0.005);
        }
    }

    #[test]
    fn report_omits_missing_models_and_recomputes_errors() {
        let dir = tempfile::tempdir().unwrap();
        let market = vec![OptionQuote::new(100.0, 0.5, 5.0)];
        let sig = vec![OptionQuote::new(100.0, 0.5, 5.2)];
        let rows = build_report(&market, Some(&sig), None, 100.0, 0.0).unwrap();
        let want = (iv_of(&sig[0], 100.0, 0.0).unwrap() - iv_of(&market[0], 100.0, 0.0).unwrap()).abs();
        assert!((rows[0].e_sig.unwrap() - want).abs() < 1e-15);
        let path = dir.path().join("r.csv");
        write_report_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("T,K,IV_SIG,IV_mkt,e_SIG\n"));
        assert!(build_report(&market, None, None, 100.0, 0.0).is_err());
    }

    #[test]
    fn quotes_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.csv");
        let quotes = vec![OptionQuote::new(95.0, 0.1, 5.5), OptionQuote::new(105.0, 1.6, 3.25)];
        write_quotes_csv(&path, &quotes).unwrap();
        let back = read_quotes_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].strike, 105.0);
        assert!((back[1].price - 3.25).abs() < 1e-12);
        assert!((back[0].maturity - 0.1).abs() < 1e-15);
    }
}
