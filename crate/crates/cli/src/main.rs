use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use specpred_cli::commands::{self, Lemma2Args, SweepAxis};
use specpred_cli::config::{self, DescriptorFile, ScenarioFile};
use specpred_cli::csvio;
use specpred_core::lemma2::{Lemma2Config, TEST_TRIPLE_SCALE};
use specpred_core::spectral_model::Field;

#[derive(Parser)]
#[command(name = "specpred", version, about = "Predictor feedback for delayed boundary control: certify, simulate, check")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the certificate of a plant (built-in c = 15 reaction-diffusion by default).
    Certify {
        #[arg(long)]
        descriptor: Option<PathBuf>,
        /// Overrides the ensemble seed of the descriptor file.
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the simulation ensemble; the certificate then has no fitted constants.
        #[arg(long)]
        no_fit: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a scenario and write the trajectory CSV.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        certificate: Option<PathBuf>,
        /// Use the RK4 reference engine instead of the exponential integrator.
        #[arg(long)]
        oracle: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Check the ISS envelopes on a trajectory CSV or a freshly simulated scenario.
    Check {
        #[arg(long, required_unless_present = "scenario", conflicts_with = "scenario")]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        certificate: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate and check over a parameter grid, one CSV row per point.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        certificate: Option<PathBuf>,
        /// `param=lo:hi:n` with param in amplitude, omega, d1_scale, d2_scale;
        /// ends may be written as multiples of `delta`.
        #[arg(long)]
        sweep: SweepAxis,
        #[command(flatten)]
        common: Common,
    },
    /// Ensemble check of the delay-perturbation estimate on the reference triple.
    #[command(name = "validate-lemma2")]
    ValidateLemma2 {
        #[arg(long, default_value_t = TEST_TRIPLE_SCALE)]
        c_scale: f64,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        falsify_eps: Option<f64>,
        #[arg(long, default_value_t = 50)]
        members: usize,
        #[arg(long, default_value_t = Lemma2Config::default().seed)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
}

fn emit(out: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?);
            write(&mut f)?;
            f.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)?;
        }
    }
    Ok(())
}

fn emit_toml<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = config::write_toml(value)?;
    emit(out, |w| Ok(w.write_all(text.as_bytes())?))
}

fn verdict(pass: bool) -> ExitCode {
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Certify { descriptor, seed, no_fit, common } => {
            let mut file = match &descriptor {
                Some(p) => config::parse_file::<DescriptorFile>(p)?,
                None => DescriptorFile::builtin(),
            };
            if let Some(s) = seed {
                file.fit.seed = s;
            }
            let cert = commands::with_pool(common.jobs, || commands::certify_file(&file, !no_fit))??;
            eprintln!(
                "N0 = {}, delta_max = {:e}, certified delta = {:e}, sigma = {}, kappa = {}{}",
                cert.n0,
                cert.margin.delta_max,
                cert.delta,
                cert.sigma.sigma,
                cert.kappa,
                if cert.fitted.is_some() { ", fitted constants installed" } else { "" }
            );
            emit_toml(common.out.as_deref(), &cert)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { scenario, certificate, oracle, common } => {
            let scen: ScenarioFile = config::parse_file(&scenario)?;
            let cert = scen.resolve_certificate(certificate.as_deref(), Some(&scenario))?;
            let tr = commands::simulate_file(&scen, &cert, oracle)?;
            let complex = cert.field == Field::Complex;
            emit(common.out.as_deref(), |w| csvio::write_trajectory(&tr, complex, w))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { trajectory, scenario, certificate, common } => {
            let (tr, cert) = match (&trajectory, &scenario) {
                (Some(p), _) => {
                    let cert_path = certificate.as_deref().context("checking a trajectory CSV needs --certificate")?;
                    let f = File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
                    (csvio::read_trajectory(BufReader::new(f)).with_context(|| p.display().to_string())?, config::load_certificate(cert_path)?)
                }
                (None, Some(sp)) => {
                    let scen: ScenarioFile = config::parse_file(sp)?;
                    let cert = scen.resolve_certificate(certificate.as_deref(), Some(sp))?;
                    (commands::simulate_file(&scen, &cert, false)?, cert)
                }
                (None, None) => unreachable!("clap requires one input"),
            };
            let rep = commands::check_trajectory(&tr, &cert)?;
            for e in &rep.envelopes.estimates {
                eprintln!("{:<14} {} worst ratio {:.4} at t = {:.3}", e.name, if e.pass { "pass" } else { "FAIL" }, e.worst_ratio, e.t_worst);
            }
            if let Some(d) = &rep.decay {
                eprintln!("decay rate     {} kappa_hat {:.4} vs kappa {:.4}", if d.pass { "pass" } else { "FAIL" }, d.kappa_hat, d.kappa);
            }
            emit_toml(common.out.as_deref(), &rep)?;
            Ok(verdict(rep.pass))
        }
        Command::Sweep { scenario, certificate, sweep, common } => {
            let scen: ScenarioFile = config::parse_file(&scenario)?;
            let cert = scen.resolve_certificate(certificate.as_deref(), Some(&scenario))?;
            let rows = commands::with_pool(common.jobs, || commands::sweep(&scen, &cert, &sweep))??;
            emit(common.out.as_deref(), |w| commands::write_sweep_csv(&rows, w))?;
            Ok(verdict(commands::sweep_passes(&rows)))
        }
        Command::ValidateLemma2 { c_scale, eps, falsify_eps, members, seed, common } => {
            let args = Lemma2Args { c_scale, eps, falsify_eps, config: Lemma2Config { members, seed, ..Lemma2Config::default() } };
            let out = commands::with_pool(common.jobs, || commands::lemma2_run(&args))??;
            eprintln!("{}", out.validation.summary);
            if let Some(f) = &out.falsification {
                eprintln!("eps = {}: {}", f.eps, f.summary);
            }
            emit_toml(common.out.as_deref(), &out)?;
            Ok(verdict(out.pass))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("SPECPRED_LOG")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
