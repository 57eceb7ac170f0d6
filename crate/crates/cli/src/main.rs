use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rmldp_cli::config::{self, LoadedConfig};
use rmldp_cli::pipeline::{self, Overrides, Stage};
use rmldp_cli::verify::{self, VerifyOptions};
use rmldp_core::smoothing::{build_kernel, envelopes, linspace, verify_sandwich, KernelGrid, Psi};

#[derive(Parser, Debug)]
#[command(name = "rmldp", version, about = "Precise large deviations for products of random matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Base seed; falls back to RMLDP_SEED, then to the config
    #[arg(long)]
    seed: Option<u64>,
    /// Thread bound for all parallel work (1 = sequential)
    #[arg(long)]
    workers: Option<usize>,
    /// Grid resolution override
    #[arg(long)]
    resolution: Option<usize>,
    /// Output directory override
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate the config and exit
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the transfer-operator eigenproblem; writes spectral.json
    Spectral(Common),
    /// Build the Λ model; writes cumulants.csv
    Cumulants(Common),
    /// Run the estimators; writes estimates.csv
    Estimate(Common),
    /// Evaluate the predictors; writes predictions.csv
    Predict(Common),
    /// Estimates, predictions and their ratios; writes comparison.csv and plotdata/
    Compare(Common),
    /// Run the invariant suites; writes verify.json
    Verify {
        #[command(flatten)]
        common: Common,
        /// Skip the smoothing-kernel suite
        #[arg(long)]
        no_smoothing: bool,
    },
    /// Full pipeline plus configured checks; exit code reflects the checks
    Run(Common),
    /// Smoothing kernel and envelope tables for one ε
    Kernel {
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 1.0)]
        s: f64,
        /// upper_tail | lower_tail | window:A:DELTA
        #[arg(long, default_value = "upper_tail")]
        psi: String,
        #[arg(long, default_value = "out/kernel")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn init_pool(workers: Option<usize>) -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(w) = workers.filter(|&w| w > 0) {
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().context("configuring thread pool")?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    Ok(())
}

fn load(common: &Common) -> Result<LoadedConfig> {
    let mut loaded = config::load(&common.config)?;
    let seed = match common.seed {
        Some(s) => Some(s),
        None => match std::env::var("RMLDP_SEED") {
            Ok(v) => Some(v.trim().parse::<u64>().context("RMLDP_SEED is not a u64")?),
            Err(_) => None,
        },
    };
    let ov = Overrides { seed, workers: common.workers, resolution: common.resolution, out: common.out.clone() };
    ov.apply(&mut loaded.config);
    loaded.config.validate()?;
    verify::grid_ok(&loaded.config, &loaded.ensemble)?;
    Ok(loaded)
}

fn stage_cmd(common: &Common, stage: Stage) -> Result<ExitCode> {
    init_pool(common.workers)?;
    let loaded = load(common)?;
    if common.dry_run {
        println!("config ok: {}", loaded.config.name);
        return Ok(ExitCode::SUCCESS);
    }
    info!("running {:?} for {}", stage, loaded.config.name);
    let outcomes = pipeline::execute(&loaded, stage)?;
    let dir = pipeline::output_dir(&loaded.config);
    println!("wrote {}", dir.display());
    if stage == Stage::Run {
        let mut ok = true;
        for o in &outcomes {
            println!("{} {:?}: {}", if o.pass { "PASS" } else { "FAIL" }, o.check, o.detail);
            ok &= o.pass;
        }
        if !ok {
            return Ok(ExitCode::from(1));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_cmd(common: &Common, no_smoothing: bool) -> Result<ExitCode> {
    init_pool(common.workers)?;
    let loaded = load(common)?;
    if common.dry_run {
        println!("config ok: {}", loaded.config.name);
        return Ok(ExitCode::SUCCESS);
    }
    let workers = if loaded.config.estimator.workers == 1 { 1 } else { 0 };
    let results = verify::run_suite(&loaded.config, &loaded.ensemble, &VerifyOptions { smoothing: !no_smoothing, workers })?;
    let dir = pipeline::output_dir(&loaded.config);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&results)? + "\n")?;
    let mut ok = true;
    for r in &results {
        let tag = if r.skipped.is_some() && r.pass { "SKIP" } else if r.pass { "PASS" } else { "FAIL" };
        println!("{tag} {} value={:.3e} threshold={:.3e}{}", r.name, r.value, r.threshold, r.skipped.as_deref().map(|s| format!(" ({s})")).unwrap_or_default());
        ok &= r.pass;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn parse_psi(text: &str) -> Result<Psi> {
    match text {
        "upper_tail" => Ok(Psi::upper_tail()),
        "lower_tail" => Ok(Psi::lower_tail()),
        t if t.starts_with("window:") => {
            let parts: Vec<&str> = t["window:".len()..].split(':').collect();
            if parts.len() != 2 {
                bail!("window descriptor is window:A:DELTA");
            }
            Ok(Psi::window(parts[0].parse()?, parts[1].parse()?))
        }
        other => bail!("unknown psi descriptor {other}"),
    }
}

fn kernel_cmd(epsilon: f64, s: f64, psi: &str, out: &PathBuf, workers: Option<usize>) -> Result<ExitCode> {
    init_pool(workers)?;
    let psi = parse_psi(psi)?;
    let k = build_kernel(epsilon, &KernelGrid::default())?;
    let grid = linspace(-5.0, 20.0, 2001);
    let env = envelopes(&psi, s, epsilon, &grid);
    let rep = verify_sandwich(&env, &k, if workers == Some(1) { 1 } else { 0 });
    fs::create_dir_all(out)?;
    fs::write(out.join("kernel_density.csv"), k.csv_density())?;
    fs::write(out.join("kernel_transform.csv"), k.csv_transform())?;
    fs::write(out.join("envelope.csv"), env.csv())?;
    fs::write(out.join("sandwich.json"), serde_json::to_string_pretty(&rep)? + "\n")?;
    println!(
        "eps={epsilon} mass={:.12} C_rho={:.6e} max_violation={:.3e}",
        k.normalization, k.c_rho_eps, rep.max_violation
    );
    Ok(if rep.holds(1e-8) { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Spectral(c) => stage_cmd(c, Stage::Spectral),
        Command::Cumulants(c) => stage_cmd(c, Stage::Cumulants),
        Command::Estimate(c) => stage_cmd(c, Stage::Estimate),
        Command::Predict(c) => stage_cmd(c, Stage::Predict),
        Command::Compare(c) => stage_cmd(c, Stage::Compare),
        Command::Run(c) => stage_cmd(c, Stage::Run),
        Command::Verify { common, no_smoothing } => verify_cmd(common, *no_smoothing),
        Command::Kernel { epsilon, s, psi, out, workers } => kernel_cmd(*epsilon, *s, psi, out, *workers),
    };
    match res {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
