use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"
name = "cli-test"
n_mc_market = 1000
n_mc_calib = 1000
steps_per_year = 50

[calibration]
max_iter = 40

[asv]
enabled = false
"#;

fn sigvol(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sigvol"))
        .arg("--config")
        .arg(dir.join("spec.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.toml"), CONFIG).unwrap();
    dir
}

fn read(dir: &Path, file: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(file)).unwrap()
}

#[test]
fn identical_specs_give_identical_outputs() {
    let (a, b) = (setup(), setup());
    for d in [&a, &b] {
        let out = sigvol(d.path(), &["run"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["market_quotes.csv", "sig_prices.csv", "sig_iv.csv", "report.csv", "smile_T0.6.csv"] {
        assert_eq!(read(a.path(), file), read(b.path(), file), "{file} differs");
    }
    // the manifest embeds the output directory, everything else matches
    let strip = |s: String| s.lines().filter(|l| !l.contains("out_dir")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(read(a.path(), "manifest_calibrate_sig.json")), strip(read(b.path(), "manifest_calibrate_sig.json")));
}

#[test]
fn report_headers_and_missing_asv_columns() {
    let d = setup();
    assert!(sigvol(d.path(), &["run"]).status.success());
    let quotes = read(d.path(), "market_quotes.csv");
    assert_eq!(quotes.lines().next(), Some("T,K,price"));
    assert_eq!(quotes.lines().count(), 21);
    assert_eq!(read(d.path(), "market_iv.csv").lines().next(), Some("T,K,IV"));
    assert_eq!(read(d.path(), "sig_iv.csv").lines().next(), Some("T,K,IV_SIG,IV_mkt,error"));
    assert_eq!(read(d.path(), "report.csv").lines().next(), Some("T,K,IV_SIG,IV_mkt,e_SIG"));
    assert_eq!(read(d.path(), "smile_T0.1.csv").lines().next(), Some("K,IV_mkt,IV_SIG"));
}

#[test]
fn cache_mismatch_is_an_error() {
    let d = setup();
    assert!(sigvol(d.path(), &["generate-market"]).status.success());
    assert!(sigvol(d.path(), &["calibrate-sig"]).status.success());
    let out = sigvol(d.path(), &["--paths", "1200", "calibrate-sig"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn per_smile_writes_four_fits() {
    let d = setup();
    assert!(sigvol(d.path(), &["generate-market"]).status.success());
    let out = sigvol(d.path(), &["--per-smile", "calibrate-sig"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&read(d.path(), "sig_smile_calibration.json")).unwrap();
    assert_eq!(json.as_array().map(Vec::len), Some(4));
}

#[test]
fn missing_inputs_are_reported() {
    let d = setup();
    let out = sigvol(d.path(), &["calibrate-sig"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("generate-market"));
}
