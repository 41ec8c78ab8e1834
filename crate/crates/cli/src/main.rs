use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use provider_profile::commands::{run, CommandKind, CompositeKind, RunConfig};
use provider_profile::hiermodel::PriorSpec;
use provider_profile::profiling::AnchorPolicy;

/// Classical and hierarchical Bayesian profiling of hospital outcomes.
#[derive(Parser, Debug)]
#[command(name = "provprof", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args, Debug)]
struct Shared {
    /// JSON run config; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for synthesis, chains and replicates.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Add the leave-one-out predictive check (one extra fit per hospital).
    #[arg(long, global = true)]
    crossval: bool,
    /// Hold the between-hospital standard deviation at this value.
    #[arg(long, global = true, value_name = "TAU")]
    tau_fixed: Option<f64>,
    /// Anchor rate in percent for standardized rates (default: pooled crude rate).
    #[arg(long, global = true, value_name = "RATE")]
    anchor: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic cohort from calibration targets.
    Simulate {
        /// Calibration targets JSON (shipped Massachusetts targets by default).
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Generating risk model JSON (shipped model by default).
        #[arg(long)]
        coefficients: Option<PathBuf>,
        /// Patients per hospital, replacing the target volumes.
        #[arg(long)]
        volume_override: Option<usize>,
    },
    /// Fit the hierarchical model and write the hospital report card.
    Profile { cohort: PathBuf },
    /// Compare hyperpriors on the same cohort.
    Sensitivity { cohort: PathBuf },
    /// Score hospitals on several process measures.
    Composite {
        /// Measure panel CSV.
        #[arg(long, conflicts_with = "patients", required_unless_present = "patients")]
        panel: Option<PathBuf>,
        /// Patient-level measure CSV.
        #[arg(long)]
        patients: Option<PathBuf>,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
    /// Fixed-effects z-scores and standardized rates.
    Classical { cohort: PathBuf },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    Pooled,
    AllOrNone,
    Rasch,
    #[value(name = "2pl")]
    TwoPl,
}

fn build_config(cli: Cli) -> Result<RunConfig, provider_profile::commands::CommandError> {
    let s = cli.shared;
    let mut cfg = match &s.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = s.seed {
        cfg.seed = seed;
    }
    if let Some(out) = s.out {
        cfg.out = out;
    }
    if s.threads.is_some() {
        cfg.threads = s.threads;
    }
    if s.crossval {
        cfg.profile.crossval = true;
    }
    if let Some(tau) = s.tau_fixed {
        cfg.model.prior = PriorSpec::Fixed { tau };
    }
    if let Some(a) = s.anchor {
        cfg.profile.anchor = AnchorPolicy::Explicit(a);
    }
    match cli.command {
        Cmd::Simulate { targets, coefficients, volume_override } => {
            cfg.command = CommandKind::Simulate;
            cfg.inputs.targets = targets.or(cfg.inputs.targets);
            cfg.inputs.coefficients = coefficients.or(cfg.inputs.coefficients);
            cfg.simulate.volume_override = volume_override.or(cfg.simulate.volume_override);
        }
        Cmd::Profile { cohort } => {
            cfg.command = CommandKind::Profile;
            cfg.inputs.cohort = Some(cohort);
        }
        Cmd::Sensitivity { cohort } => {
            cfg.command = CommandKind::Sensitivity;
            cfg.inputs.cohort = Some(cohort);
        }
        Cmd::Classical { cohort } => {
            cfg.command = CommandKind::Classical;
            cfg.inputs.cohort = Some(cohort);
        }
        Cmd::Composite { panel, patients, kind } => {
            cfg.command = CommandKind::Composite;
            cfg.inputs.panel = panel;
            cfg.inputs.patients = patients;
            if let Some(k) = kind {
                cfg.composite.kind = match k {
                    Kind::Pooled => CompositeKind::Pooled,
                    Kind::AllOrNone => CompositeKind::AllOrNone,
                    Kind::Rasch => CompositeKind::Rasch,
                    Kind::TwoPl => CompositeKind::TwoPl,
                };
            }
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build_config(cli).and_then(|cfg| run(&cfg));
    match result {
        Ok(outcome) => {
            let m = &outcome.manifest;
            for w in &m.warnings {
                eprintln!("warning: {w}");
            }
            for f in &m.outputs {
                println!("{}", m.config.out.join(&f.path).display());
            }
            if !m.converged {
                for f in m.fits.iter().filter(|f| !f.converged) {
                    eprintln!("not converged: {} (max R-hat {:?})", f.name, f.max_rhat);
                }
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
