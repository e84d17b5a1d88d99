//! Artifact files: schemas, offline re-analysis, and agreement of the
//! simulated summary rows with the analytic model.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

use qkdsim_core::analytic::evaluate;
use qkdsim_core::config::ExperimentConfig;
use qkdsim_core::encoder::EncoderImperfection;
use qkdsim_core::experiment::{analyze_tags, run_experiment, SummaryRow};
use qkdsim_core::io;
use qkdsim_core::sweep::scenario_of;
use qkdsim_core::{Error, Stage};

const OUTPUTS: [&str; 5] = ["summary.json", "summary.csv", "counts.json", "budget.json", "final.key"];

/// Eight seconds at 16 dB: enough sifted bits for a key.
fn short_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.run.duration_s = 8;
    c.run.lock_s = 3;
    c.run.interval_s = 4;
    c.run.master_seed = seed;
    c.encoder = EncoderImperfection::for_intrinsic_qber(0.004).unwrap();
    c.link = c.link.with_total_loss(16.0).unwrap();
    c
}

fn simulate(config: &ExperimentConfig) -> TempDir {
    let dir = TempDir::new().unwrap();
    run_experiment(config, dir.path()).unwrap();
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

fn check_schema(schema: &str, doc: &Value) {
    let schema: Value = serde_json::from_slice(&read(&schema_dir(), schema)).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

#[test]
fn json_artifacts_match_the_shipped_schemas() {
    let run = simulate(&short_config(1));
    for (file, schema) in [
        ("summary.json", "summary.schema.json"),
        ("counts.json", "counts.schema.json"),
        ("budget.json", "budget.schema.json"),
    ] {
        let doc: Value = serde_json::from_slice(&read(run.path(), file)).unwrap();
        check_schema(schema, &doc);
    }

    // a run too short for a key still conforms (null reconciliation)
    let mut c = short_config(2);
    c.link = c.link.with_total_loss(24.0).unwrap();
    c.run.duration_s = 4;
    let dir = TempDir::new().unwrap();
    let summary = run_experiment(&c, dir.path()).unwrap();
    assert_eq!(summary.totals.l, 0);
    assert!(summary.totals.reconciliation.is_none());
    check_schema("summary.schema.json", &serde_json::from_slice(&read(dir.path(), "summary.json")).unwrap());
}

#[test]
fn schemas_reject_foreign_fields() {
    let run = simulate(&short_config(3));
    let mut doc: Value = serde_json::from_slice(&read(run.path(), "counts.json")).unwrap();
    doc["extra"] = Value::from(1);
    let schema: Value = serde_json::from_slice(&read(&schema_dir(), "counts.schema.json")).unwrap();
    assert!(!jsonschema::is_valid(&schema, &doc));
}

#[test]
fn reanalysis_reproduces_the_run() {
    let config = short_config(4);
    let run = simulate(&config);
    let again = TempDir::new().unwrap();
    let summary = analyze_tags(&run.path().join("tags.bin"), &run.path().join("alice.bin"), &config, again.path()).unwrap();
    assert!(summary.totals.l > 0);
    let original: Value = serde_json::from_slice(&read(run.path(), "summary.json")).unwrap();
    assert_eq!(serde_json::to_value(&summary).unwrap(), original);
    for f in OUTPUTS {
        assert!(read(run.path(), f) == read(again.path(), f), "{f} differs");
    }
}

#[test]
fn shuffled_tag_file_gives_identical_results() {
    let config = short_config(5);
    let run = simulate(&config);
    let mut tags = io::read_tags(&run.path().join("tags.bin")).unwrap();
    tags.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let shuffled = run.path().join("shuffled.bin");
    let mut w = io::create(&shuffled).unwrap();
    io::write_tags(&mut w, &tags).unwrap();
    drop(w);

    let again = TempDir::new().unwrap();
    analyze_tags(&shuffled, &run.path().join("alice.bin"), &config, again.path()).unwrap();
    for f in OUTPUTS {
        assert!(read(run.path(), f) == read(again.path(), f), "{f} differs");
    }
}

#[test]
fn truncated_tag_file_names_the_offset() {
    let config = short_config(6);
    let run = simulate(&config);
    let mut bytes = read(run.path(), "tags.bin");
    assert_eq!(bytes.len() % io::RECORD_BYTES, 0);
    bytes.truncate(bytes.len() - 4);
    let cut = run.path().join("cut.bin");
    std::fs::write(&cut, &bytes).unwrap();
    let expected = (bytes.len() / io::RECORD_BYTES * io::RECORD_BYTES) as u64;

    let out = TempDir::new().unwrap();
    let err = analyze_tags(&cut, &run.path().join("alice.bin"), &config, out.path()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains(&format!("byte offset {expected}")), "{msg}");
    assert!(out.path().join("FAILED").exists());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = short_config(7);
    c.run.duration_s = 0;
    let dir = TempDir::new().unwrap();
    let err = run_experiment(&c, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: Stage::Config, .. }), "{err}");
    assert!(ExperimentConfig::from_toml_str("[run]\nduration_s = \"long\"\n").is_err());
    assert!(ExperimentConfig::from_toml_str("[nonsense]\nx = 1\n").is_err());
}

/// Mean and standard error of one summary column over full intervals.
fn column(rows: &[SummaryRow], f: impl Fn(&SummaryRow) -> f64) -> (f64, f64) {
    let v: Vec<f64> = rows.iter().map(f).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn check_against_analytic(name: &str, config: &ExperimentConfig) {
    let dir = TempDir::new().unwrap();
    let summary = run_experiment(config, dir.path()).unwrap();
    let full = (config.run.duration_s / config.run.interval_s) as usize;
    let rows = &summary.rows[..full];
    assert!(rows.len() >= 12, "{name}: {} rows", rows.len());

    // each row is a standalone block of interval_s seconds
    let mut scenario = scenario_of(config);
    let rates = evaluate(&config.protocol, &scenario).unwrap().rates;
    scenario.n_z_target = rates.sifted_rate_bps * config.run.interval_s as f64;
    let point = evaluate(&config.protocol, &scenario).unwrap();

    let expect = [
        ("tdr_hz", rates.tdr_hz, column(rows, |r| r.tdr_hz)),
        ("snr", rates.snr, column(rows, |r| r.snr.unwrap())),
        ("qber_z", rates.qber_z, column(rows, |r| r.qber_z)),
        ("qber_x", rates.qber_x, column(rows, |r| r.qber_x)),
        ("sifted_bps", rates.sifted_rate_bps, column(rows, |r| r.sifted_bps)),
        ("skr_inf_bps", point.skr_inf, column(rows, |r| r.skr_inf_bps)),
        ("skr_f_bps", point.skr_f, column(rows, |r| r.skr_f_bps)),
    ];
    assert!(point.skr_f > 0.0, "{name}: no finite key per row");
    for (col, analytic, (mean, se)) in expect {
        let z = (mean - analytic) / se;
            assert!(z.abs() <= 3.0, "{name} {col}: simulated {mean} ± {se}, analytic {analytic} (z = {z:.2})");
    }
}

/// Twelve rows of `interval_s` seconds, each long enough for a finite key.
fn mc_config(seed: u64, loss_db: f64, interval_s: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.run.interval_s = interval_s;
    c.run.duration_s = 12 * interval_s;
    c.run.lock_s = 3;
    c.run.master_seed = seed;
    c.link = c.link.with_total_loss(loss_db).unwrap();
    c.output.write_tags = false;
    c.output.write_alice = false;
    c.output.write_sifted = false;
    c
}

#[test]
fn simulated_rows_agree_with_the_model_at_16_db() {
    let mut c = mc_config(11, 16.0, 8);
    c.encoder = EncoderImperfection::for_intrinsic_qber(0.0036).unwrap();
    check_against_analytic("16 dB", &c);
}

#[test]
fn simulated_rows_agree_with_the_model_with_a_narrow_window() {
    let mut c = mc_config(12, 18.0, 16);
    c.encoder = EncoderImperfection::for_intrinsic_qber(0.008).unwrap();
    c.detectors.window_ps = 500.0;
    check_against_analytic("18 dB, 500 ps", &c);
}

#[test]
fn simulated_rows_agree_with_the_model_with_strong_background() {
    let mut c = mc_config(13, 14.0, 8);
    c.encoder = EncoderImperfection::for_intrinsic_qber(0.002).unwrap();
    c.link.background_rate_hz = 10_000.0;
    c.protocol.p_z_bob = 0.7;
    check_against_analytic("14 dB, background 10 kHz", &c);
}

