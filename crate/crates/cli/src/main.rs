use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use qkdsim_core::config::ExperimentConfig;
use qkdsim_core::experiment::{analyze_tags, postprocess, run_experiment, write_key_artifacts, RunSummary};
use qkdsim_core::io;
use qkdsim_core::postproc::{KeyBlock, ReconciliationReport};
use qkdsim_core::security::{optimize_operating_point, DecoyCounts, SearchSpace};
use qkdsim_core::sweep::{cutoff, sweep, write_sweep_csv, Axis};

/// Default output directory when `--out` is not given.
const OUT_DIR_ENV: &str = "QKDSIM_OUT_DIR";

/// Exit status of key-producing commands that ran but produced no key.
const NO_KEY: u8 = 3;

#[derive(Parser)]
#[command(name = "qkdsim", version, about = "Decoy-state BB84 free-space link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Start from a named preset (default, april18) instead of a file.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override a configuration key, e.g. `--set run.duration_s=120` or
    /// `--set detectors.window_ps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a run end to end and write its artifacts.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (default: $QKDSIM_OUT_DIR or ./qkdsim-out).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Re-run the receiver side and post-processing on recorded files.
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        tags: PathBuf,
        #[arg(long)]
        alice: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Analytic key rate along one axis, as CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// loss (total dB), qber (intrinsic) or block-size (sifted Z bits).
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        step: f64,
        /// Also locate the point where the finite-size key vanishes.
        #[arg(long)]
        cutoff: bool,
        /// Write the CSV here instead of standard output.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Search intensities and probabilities for the best modeled key rate.
    Optimize {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Reconcile, verify and amplify a recorded sifted key pair.
    Postprocess {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        alice_key: PathBuf,
        #[arg(long)]
        bob_key: PathBuf,
        /// Decoy tallies (`counts.json`) of the same run.
        #[arg(long)]
        counts: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print a configuration with every default filled in.
    ConfigInit {
        #[arg(long, default_value = "default")]
        preset: String,
    },
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, entry: &str) -> Result<()> {
    let (key, raw) = entry.split_once('=').with_context(|| format!("override {entry:?} is not KEY=VALUE"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("{p:?} in {key:?} is not a table"))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match (&self.config, &self.preset) {
            (Some(path), _) => {
                std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
            }
            (None, Some(name)) => ExperimentConfig::preset(name)?.to_toml_string()?,
            (None, None) => ExperimentConfig::default().to_toml_string()?,
        };
        let mut table: toml::Table = base.parse().context("parsing configuration")?;
        for o in &self.overrides {
            apply_override(&mut table, o)?;
        }
        Ok(ExperimentConfig::from_toml_str(&toml::to_string(&table)?)?)
    }
}

fn out_dir(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("qkdsim-out"))
}

fn print_reconciliation(r: &ReconciliationReport) {
    let f = r.f_ec_measured.map_or("n/a".to_string(), |f| format!("{f:.4}"));
    println!("Cascade: {} passes, {} bits leaked, f_EC = {f}", r.passes, r.leaked_bits);
}

fn report(summary: &RunSummary, dir: &Path) -> ExitCode {
    let t = &summary.totals;
    println!(
        "n_Z = {}  Q_Z = {:.4}%  Q_X = {:.4}%  duration = {} s",
        t.n_z,
        100.0 * t.qber_z,
        100.0 * t.qber_x,
        t.duration_s
    );
    if let Some(r) = &t.reconciliation {
        print_reconciliation(r);
    }
    println!(
        "l = {} bits  SKR_f = {:.1} bps  SKR_inf = {:.1} bps  -> {}",
        t.l,
        t.skr_f_bps,
        t.skr_inf_bps,
        dir.display()
    );
    if t.l > 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("no secret key produced");
        ExitCode::from(NO_KEY)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { config, out } => {
            let config = config.load()?;
            let dir = out_dir(out);
            let summary = run_experiment(&config, &dir)?;
            Ok(report(&summary, &dir))
        }
        Command::Analyze {
            config,
            tags,
            alice,
            out,
        } => {
            let config = config.load()?;
            let dir = out_dir(out);
            let summary = analyze_tags(&tags, &alice, &config, &dir)?;
            Ok(report(&summary, &dir))
        }
        Command::Sweep {
            config,
            axis,
            from,
            to,
            step,
            cutoff: find_cutoff,
            out,
        } => {
            let config = config.load()?;
            let points = sweep(&config, axis, from, to, step)?;
            let mut buf = Vec::new();
            write_sweep_csv(&mut buf, &points)?;
            match out {
                Some(path) => std::fs::write(&path, &buf).with_context(|| format!("writing {}", path.display()))?,
                None => std::io::stdout().write_all(&buf)?,
            }
            if find_cutoff {
                let tol = match axis {
                    Axis::BlockSize => 1.0,
                    _ => 1e-4 * (to - from).abs().max(1e-3),
                };
                match cutoff(&config, axis, from, to, tol)? {
                    Some(x) => eprintln!("finite-size key vanishes at {x}"),
                    None => eprintln!("finite-size key still positive at {to}"),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Optimize { config } => {
            let config = config.load()?;
            let scenario = qkdsim_core::sweep::scenario_of(&config);
            let start = qkdsim_core::analytic::evaluate(&config.protocol, &scenario)?;
            let best = optimize_operating_point(&config.protocol, &scenario, &SearchSpace::default())?;
            println!("{}", serde_json::to_string_pretty(&best)?);
            eprintln!(
                "configured point: {:.1} bps, optimum: {:.1} bps ({:.1}% of optimum)",
                start.skr_f,
                best.skr,
                100.0 * start.skr_f / best.skr
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Postprocess {
            config,
            alice_key,
            bob_key,
            counts,
            out,
        } => {
            let config = config.load()?;
            let read_key = |p: &Path| -> Result<KeyBlock> {
                let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(KeyBlock::from_bytes(&bytes)?)
            };
            let alice = read_key(&alice_key)?;
            let bob = read_key(&bob_key)?;
            let counts: DecoyCounts = io::read_json(&counts)?;
            let dir = out_dir(out);
            std::fs::create_dir_all(&dir)?;
            let post = postprocess(&config, &alice, &bob, &counts)?;
            write_key_artifacts(&dir, &post, &counts)?;
            if let Some(r) = &post.reconciliation {
                print_reconciliation(r);
            }
            println!("l = {} bits -> {}", post.finite.l, dir.display());
            if post.finite.l > 0 {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("no secret key produced");
                Ok(ExitCode::from(NO_KEY))
            }
        }
        Command::ConfigInit { preset } => {
            print!("{}", ExperimentConfig::preset(&preset)?.to_toml_string()?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides() {
        let mut t: toml::Table = ExperimentConfig::default().to_toml_string().unwrap().parse().unwrap();
        apply_override(&mut t, "run.duration_s=7").unwrap();
        apply_override(&mut t, "detectors.window_ps = 500.0").unwrap();
        let c = ExperimentConfig::from_toml_str(&toml::to_string(&t).unwrap()).unwrap();
        assert_eq!(c.run.duration_s, 7);
        assert_eq!(c.detectors.window_ps, 500.0);
        assert!(apply_override(&mut t, "nonsense").is_err());
    }

    #[test]
    fn parse_value_falls_back_to_string() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("april"), toml::Value::String("april".into()));
    }
}
