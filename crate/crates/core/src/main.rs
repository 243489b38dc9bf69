use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use sigvol::calibration::CalibrationResult;
use sigvol::experiment::{self as exp, ExperimentSpec, Manifest};
use sigvol::{selftest, Error, Result};

/// Implied-volatility calibration with signature and asymptotic Heston models.
#[derive(Parser, Debug)]
#[command(name = "sigvol", version)]
struct Cli {
    /// TOML experiment file; omitted keys take the uncorrelated defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in experiment: uncorrelated, correlated or rough_bergomi.
    #[arg(long, global = true, conflicts_with = "config")]
    preset: Option<String>,
    /// Monte Carlo paths for both the market and the calibration.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Market seed; the calibration seed becomes seed + 1.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fit each maturity separately (calibrate-sig).
    #[arg(long, global = true)]
    per_smile: bool,
    /// Use the paper-scale path count from the config.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate market quotes and, for Heston markets, the regression surface.
    GenerateMarket,
    /// Build or load the feature cache and calibrate the signature model.
    CalibrateSig,
    /// Run the asymptotic calibration on the regression surface.
    CalibrateAsv,
    /// Join market, signature and asymptotic prices into comparison tables.
    Report,
    /// All four steps in sequence.
    Run,
    /// Run the acceptance checks.
    Selftest {
        /// Only the fast checks (no end-to-end experiments).
        #[arg(long)]
        quick: bool,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn effective_spec(cli: &Cli) -> Result<ExperimentSpec> {
    let mut spec = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentSpec::load(path)?,
        (None, Some(name)) => ExperimentSpec::preset(name)?,
        (None, None) => ExperimentSpec::default(),
    };
    if cli.paper_scale {
        spec.to_paper_scale();
    }
    if let Some(n) = cli.paths {
        spec.n_mc_market = n;
        spec.n_mc_calib = n;
    }
    if let Some(s) = cli.seed {
        spec.market_seed = s;
        spec.calib_seed = s.wrapping_add(1);
    }
    if let Some(out) = &cli.out {
        spec.out_dir = out.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Selftest { quick } = cli.command {
        let spec = if cli.config.is_some() || cli.preset.is_some() {
            Some(effective_spec(&cli)?)
        } else {
            None
        };
        let report = selftest::run_all(&selftest::Options { quick, base: spec, verbose: true });
        return Ok(if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE });
    }
    let spec = effective_spec(&cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", spec.to_toml()?);
        return Ok(ExitCode::SUCCESS);
    }
    std::fs::create_dir_all(&spec.out_dir)?;
    match cli.command {
        Command::GenerateMarket => generate_market(&spec)?,
        Command::CalibrateSig => calibrate_sig(&spec, cli.per_smile)?,
        Command::CalibrateAsv => calibrate_asv(&spec)?,
        Command::Report => report(&spec)?,
        Command::Run => {
            generate_market(&spec)?;
            calibrate_sig(&spec, cli.per_smile)?;
            if spec.asv.enabled {
                calibrate_asv(&spec)?;
            }
            report(&spec)?;
        }
        Command::Selftest { .. } | Command::ShowConfig => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}

fn out(spec: &ExperimentSpec, file: &str) -> PathBuf {
    spec.out_dir.join(file)
}

fn names(paths: &[&str]) -> Vec<String> {
    paths.iter().map(|s| s.to_string()).collect()
}

fn generate_market(spec: &ExperimentSpec) -> Result<()> {
    let start = Instant::now();
    let quotes = exp::generate_market(spec)?;
    exp::write_quotes_csv(&out(spec, exp::QUOTES_FILE), &quotes)?;
    exp::write_iv_csv(&out(spec, exp::MARKET_IV_FILE), &quotes)?;
    let mut manifest = Manifest::new("generate-market", spec);
    manifest.outputs = names(&[exp::QUOTES_FILE, exp::MARKET_IV_FILE]);
    let failed = quotes.iter().filter(|q| q.implied_vol.is_none()).count();
    for q in quotes.iter().filter(|q| q.implied_vol.is_none()) {
        let msg = format!("IV inversion failed for T={} K={}", q.maturity, q.strike);
        eprintln!("warning: {msg}");
        manifest.notes.push(msg);
    }
    if spec.asv.enabled && spec.market.asv_truth().is_some() {
        let surface = exp::generate_asv_surface(spec)?;
        exp::write_surface_csv(&out(spec, exp::ASV_SURFACE_FILE), &surface)?;
        manifest.outputs.push(exp::ASV_SURFACE_FILE.into());
    }
    manifest.write(&spec.out_dir)?;
    println!(
        "generate-market: {} quotes ({} without IV) at {} paths in {:.1}s -> {}",
        quotes.len(),
        failed,
        spec.n_mc_market,
        start.elapsed().as_secs_f64(),
        spec.out_dir.display()
    );
    Ok(())
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!("{} not found; run {hint} first", path.display())));
    }
    Ok(())
}

fn calibrate_sig(spec: &ExperimentSpec, per_smile: bool) -> Result<()> {
    let qpath = out(spec, exp::QUOTES_FILE);
    require(&qpath, "generate-market")?;
    let quotes = exp::read_quotes_csv(&qpath)?;
    let start = Instant::now();
    let (cache, loaded) = exp::load_or_build_features(spec, &out(spec, exp::FEATURES_FILE))?;
    println!(
        "features: {} {} paths ({} excluded, {} ridged) in {:.1}s",
        if loaded { "loaded" } else { "built" },
        cache.n_paths(),
        cache.failures(),
        cache.ridged(),
        start.elapsed().as_secs_f64()
    );
    let start = Instant::now();
    let (results, result_file, prices_file, iv_file, command) = if per_smile {
        (
            exp::run_sig_per_smile(spec, &quotes, &cache)?,
            exp::SIG_SMILE_RESULT_FILE,
            exp::SIG_SMILE_PRICES_FILE,
            exp::SIG_SMILE_IV_FILE,
            "calibrate-sig-per-smile",
        )
    } else {
        (
            vec![exp::run_sig(spec, &quotes, &cache)?],
            exp::SIG_RESULT_FILE,
            exp::SIG_PRICES_FILE,
            exp::SIG_IV_FILE,
            "calibrate-sig",
        )
    };
    if per_smile {
        exp::write_json(&out(spec, result_file), &results)?;
    } else {
        exp::write_json(&out(spec, result_file), &results[0])?;
    }
    let model: Vec<_> = results.iter().flat_map(exp::result_quotes).collect();
    exp::write_quotes_csv(&out(spec, prices_file), &model)?;
    exp::write_sig_iv_csv(&out(spec, iv_file), &results)?;
    let mut manifest = Manifest::new(command, spec);
    manifest.outputs = names(&[exp::FEATURES_FILE, result_file, prices_file, iv_file]);
    manifest.write(&spec.out_dir)?;
    for r in &results {
        print_sig_summary(r);
    }
    println!("calibration took {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn print_sig_summary(r: &CalibrationResult) {
    let mats: Vec<String> = {
        let mut m: Vec<f64> = r.contracts.iter().map(|c| c.maturity).collect();
        m.dedup();
        m.iter().map(|t| t.to_string()).collect()
    };
    let max = r.max_iv_error().map_or("n/a".into(), |e| format!("{e:.3e}"));
    println!(
        "sig [T={}]: loss {:.4e}, max |IV error| {max}, {} iterations, {:?}",
        mats.join(","),
        r.loss,
        r.n_iterations,
        r.status
    );
}

fn calibrate_asv(spec: &ExperimentSpec) -> Result<()> {
    let surface_path = out(spec, exp::ASV_SURFACE_FILE);
    let surface_path = if surface_path.exists() {
        surface_path
    } else {
        let p = out(spec, exp::MARKET_IV_FILE);
        require(&p, "generate-market")?;
        p
    };
    let surface = exp::read_surface_csv(&surface_path)?;
    let fit = exp::run_asv(spec, &surface)?;
    let truth = spec.market.asv_truth();
    exp::write_json(&out(spec, exp::ASV_RESULT_FILE), &fit)?;
    exp::write_asv_params_csv(&out(spec, exp::ASV_PARAMS_FILE), &fit, truth.as_ref())?;
    let model = exp::asv_model_quotes(spec, &fit.params)?;
    exp::write_quotes_csv(&out(spec, exp::ASV_PRICES_FILE), &model)?;
    let mut manifest = Manifest::new("calibrate-asv", spec);
    manifest.outputs = names(&[exp::ASV_RESULT_FILE, exp::ASV_PARAMS_FILE, exp::ASV_PRICES_FILE]);
    manifest.notes.push(format!("surface read from {}", surface_path.display()));
    manifest.write(&spec.out_dir)?;
    let p = fit.params;
    println!(
        "asv: sigma0 {:.6} nu {:.6} kappa {:.6} theta {:.6} rho {:.6}",
        p.sigma0, p.nu, p.kappa, p.theta, p.rho
    );
    Ok(())
}

fn report(spec: &ExperimentSpec) -> Result<()> {
    let qpath = out(spec, exp::QUOTES_FILE);
    require(&qpath, "generate-market")?;
    let market = exp::read_quotes_csv(&qpath)?;
    let read_opt = |file: &str| -> Result<Option<Vec<_>>> {
        let p = out(spec, file);
        if p.exists() {
            Ok(Some(exp::read_quotes_csv(&p)?))
        } else {
            Ok(None)
        }
    };
    let sig = read_opt(exp::SIG_PRICES_FILE)?;
    let asv = read_opt(exp::ASV_PRICES_FILE)?;
    let rows = exp::build_report(&market, sig.as_deref(), asv.as_deref(), spec.s0, spec.r)?;
    exp::write_report_csv(&out(spec, exp::REPORT_FILE), &rows)?;
    let smiles = exp::write_smile_csvs(&spec.out_dir, &rows)?;
    let mut outputs = vec![exp::REPORT_FILE.to_string()];
    outputs.extend(smiles.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()));
    let mut manifest = Manifest::new("report", spec);
    manifest.outputs = outputs;
    manifest.write(&spec.out_dir)?;
    let max = |f: fn(&exp::ReportRow) -> Option<f64>| rows.iter().filter_map(f).fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.max(e))));
    if let Some(e) = max(|r| r.e_sig) {
        println!("report: max e_SIG {e:.3e}");
    }
    if let Some(e) = max(|r| r.e_asv) {
        println!("report: max e_ASV {e:.3e}");
    }
    println!("report: {} rows -> {}", rows.len(), out(spec, exp::REPORT_FILE).display());
    Ok(())
}
