//! `gereach` command-line front end.
//!
//! Exit codes: 0 success, 1 a study verdict failed, 2 usage or configuration
//! error, 3 numerical failure. Errors are also printed to stderr as one JSON
//! object.

use std::f64::consts::TAU;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gereach::experiments::{apply_override, run_study, Provenance, StudyConfig, StudyKind, SCHEMA_VERSION};
use gereach::reach::global_reach;
use gereach::sampler::write_batch;
use gereach::theory::{homology_budget, sigma_c};
use gereach::{embed, Error};
use serde::Serialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "gereach", version, about = "Reach of self-normalised Gaussian embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory (default: `output.dir` from the config, else `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Worker thread cap. Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Config override, `dotted.key=value` with a JSON value. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Suppress the progress summary on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Check unit variance, positive semi-definiteness and non-degeneracy.
    ValidateKernel,
    /// Draw `k` field copies on the grid and dump them as a binary batch.
    Sample,
    /// Empirical local and global reach of one embedding.
    Reach,
    /// Theoretical limit `sigma_c^2` on the grid.
    Theory,
    /// Convergence study over `k_list` and seeds.
    Converge,
    /// Fluctuation covariances at probe pairs.
    Fluctuate,
    /// Moments of the sample correlation.
    Estimator,
    /// Brute-force geodesic oracle on small instances.
    Oracle,
    /// Sample-size budget for homology recovery.
    Budget,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Lib(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Lib(Error::Config(_)) => "config",
            Failure::Lib(Error::Io(_)) => "io",
            Failure::Lib(e) if e.is_numerical() => "numerical",
            Failure::Lib(_) => "input",
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Lib(e) => e.to_string(),
        }
    }
}

fn report_error(kind: &str, message: &str, code: u8) {
    let obj = json!({ "error": { "kind": kind, "message": message, "exit_code": code } });
    eprintln!("{obj}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report_error("usage", e.to_string().trim(), 2);
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let code = f.code();
            report_error(f.kind(), &f.message(), code);
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<StudyConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("--config PATH is required".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Lib(Error::Config(format!("cannot read {}: {e}", path.display()))))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Lib(Error::Config(format!("invalid JSON: {e}"))))?;
    for o in &cli.overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("override `{o}` is not KEY=VALUE")))?;
        apply_override(&mut value, key.trim(), raw)?;
    }
    if let Some(seed) = cli.seed {
        apply_override(&mut value, "seed", &seed.to_string())?;
    }
    Ok(StudyConfig::from_value(value)?)
}

fn out_dir(cli: &Cli, config: &StudyConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| config.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    let config = load_config(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let dir = out_dir(cli, &config);
    fs::create_dir_all(&dir)?;
    let provenance = Provenance::of(&config);
    let say = |msg: String| {
        if !cli.quiet {
            println!("{msg}");
        }
    };
    match cli.command {
        Command::ValidateKernel => {
            let report = config.kernel.validate(&config.grid()?)?;
            write_json(
                &dir.join("kernel_validation.json"),
                &json!({ "report": report, "provenance": provenance }),
            )?;
            say(format!(
                "unit_variance={} psd_ok={} nondegenerate={}",
                report.unit_variance, report.psd_ok, report.nondegenerate
            ));
            if !(report.unit_variance && report.psd_ok) {
                return Err(Error::InvalidKernel("kernel failed validation".into()).into());
            }
            Ok(0)
        }
        Command::Sample => {
            let batch = config.sample(config.k, config.seed)?;
            let file = fs::File::create(dir.join("batch.grfb"))?;
            write_batch(&batch, BufWriter::new(file))?;
            write_json(
                &dir.join("sample_summary.json"),
                &json!({
                    "k": batch.k(),
                    "n_points": batch.len(),
                    "dim": batch.dim(),
                    "method": batch.method(),
                    "seed": batch.seed(),
                    "provenance": provenance,
                }),
            )?;
            say(format!("wrote {} copies at {} points", batch.k(), batch.len()));
            Ok(0)
        }
        Command::Reach => {
            let batch = config.sample(config.k, config.seed)?;
            let cloud = embed(&batch)?;
            let mut report = global_reach(&cloud, config.diag_exclusion())?;
            report.attach_decomposition(&batch, &config.kernel, &cloud)?;
            fs::write(dir.join("reach.csv"), report.to_csv())?;
            write_json(
                &dir.join("reach_summary.json"),
                &json!({
                    "global_cot2": report.global_cot2,
                    "theta_k": report.theta_k,
                    "global_x": report.global_x,
                    "boundary_hits": report.boundary_hits(),
                    "diag_exclusion": report.diag_exclusion,
                    "k": report.k,
                    "provenance": provenance,
                }),
            )?;
            say(format!("cot2={:.6e} theta={:.6}", report.global_cot2, report.theta_k));
            Ok(0)
        }
        Command::Theory => {
            let profile = sigma_c(&config.kernel, &config.grid()?, config.refine)?;
            fs::write(dir.join("theory.csv"), profile.to_csv())?;
            write_json(
                &dir.join("theory_summary.json"),
                &json!({
                    "sigma_c2": profile.sigma_c_global,
                    "global_x": profile.global_x,
                    "diagonal_limit": profile.diagonal_limit,
                    "refined": profile.refined,
                    "provenance": provenance,
                }),
            )?;
            say(format!("sigma_c2={:.10}", profile.sigma_c_global));
            Ok(0)
        }
        Command::Budget => {
            let m = config.kernel.dim() as u32;
            let b = &config.budget;
            let vol = b.vol.unwrap_or(TAU.powi(m as i32));
            let budget = homology_budget(m, vol, b.tau, b.epsilon, b.delta)?;
            write_json(
                &dir.join("budget.json"),
                &json!({ "budget": budget, "provenance": provenance }),
            )?;
            say(format!("n_required={}", budget.n_required));
            Ok(0)
        }
        Command::Converge | Command::Fluctuate | Command::Estimator | Command::Oracle => {
            let kind = match cli.command {
                Command::Converge => StudyKind::Converge,
                Command::Fluctuate => StudyKind::Fluctuate,
                Command::Estimator => StudyKind::Estimator,
                _ => StudyKind::Oracle,
            };
            let mut cfg = config.clone();
            cfg.study = Some(kind);
            let report = run_study(&cfg)?;
            report.write(&dir, cfg.output.plot_data)?;
            for v in &report.verdicts {
                say(format!(
                    "{} {}: observed={:.6e} target={:.6e} allowed={:.3e}",
                    if v.pass { "PASS" } else { "FAIL" },
                    v.name,
                    v.observed,
                    v.target,
                    v.allowed
                ));
            }
            debug_assert_eq!(report.provenance.schema_version, SCHEMA_VERSION);
            Ok(if report.passed() { 0 } else { 1 })
        }
    }
}
