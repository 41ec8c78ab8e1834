//! Reproducible, config-driven runs that write report files plus a manifest
//! of hashes into an output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classical::{
    fit_logistic_mle, oe_standardized, variation_indices, ClassicalError, OeRow, VariationIndices, ZOptions, ZReport,
};
use crate::composite::{
    all_or_none, fit_irt, icc_csv, icc_data, panel_from_patients, parse_panel_csv, parse_patient_csv, pooled_composite,
    AllOrNoneScore, CompositeError, IrtFit, IrtKind, PooledScore,
};
use crate::csv_field;
use crate::hiermodel::{HierError, HierSpec, PriorSpec};
use crate::numeric::Summary;
use crate::profiling::{
    extreme_diagnostics, profile, scatter_csv, scatter_data, sensitivity_csv, sensitivity_suite, AnchorPolicy, FitStatus,
    ProfileError, ProfileOptions, ProfileReport, SensitivityRow,
};
use crate::registry::{
    emit_csv, parse_csv, summarize, synthesize_cohort, CalibrationTargets, Cohort, CohortSummary, GeneratorMetadata,
    OutcomeModel, RegistryError, RiskModel, SynthesisOptions,
};
use crate::sampler::{ChainConfig, ParamSummary, SamplerError};

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error(transparent)]
    Hier(#[from] HierError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Composite(#[from] CompositeError),
}

impl CommandError {
    /// 2 for bad input, 1 when output cannot be written.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Write { .. } => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Simulate,
    #[default]
    Profile,
    Sensitivity,
    Composite,
    Classical,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Inputs {
    /// Patient-level cohort CSV (profile, sensitivity, classical).
    pub cohort: Option<PathBuf>,
    /// Calibration targets JSON (simulate; shipped targets when absent).
    pub targets: Option<PathBuf>,
    /// Generating risk model JSON (simulate; shipped model when absent).
    pub coefficients: Option<PathBuf>,
    /// Measure panel CSV (composite).
    pub panel: Option<PathBuf>,
    /// Patient-level measure CSV (composite).
    pub patients: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateOptions {
    pub volume_override: Option<usize>,
    pub outcome: OutcomeModel,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        SimulateOptions { volume_override: None, outcome: OutcomeModel::MatchDeathCounts }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeKind {
    #[default]
    Pooled,
    AllOrNone,
    Rasch,
    TwoPl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositeOptions {
    pub kind: CompositeKind,
    /// Quality grid of the item characteristic curves.
    pub icc_lo: f64,
    pub icc_hi: f64,
    pub icc_points: usize,
}

impl Default for CompositeOptions {
    fn default() -> Self {
        CompositeOptions { kind: CompositeKind::Pooled, icc_lo: -4.0, icc_hi: 4.0, icc_points: 81 }
    }
}

/// Fully resolved run: what to do, on which files, with which settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: CommandKind,
    pub inputs: Inputs,
    pub out: PathBuf,
    /// Master seed; copied into the chain and synthesis seeds.
    pub seed: u64,
    /// Worker cap for the whole run.
    pub threads: Option<usize>,
    pub model: HierSpec,
    pub chain: ChainConfig,
    /// Priors compared by the sensitivity command.
    pub priors: Vec<PriorSpec>,
    pub profile: ProfileOptions,
    pub simulate: SimulateOptions,
    pub composite: CompositeOptions,
    pub classical: ZOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: CommandKind::default(),
            inputs: Inputs::default(),
            out: PathBuf::from("out"),
            seed: 1,
            threads: None,
            model: HierSpec::default(),
            chain: ChainConfig::default(),
            priors: PriorSpec::sensitivity_defaults(),
            profile: ProfileOptions::default(),
            simulate: SimulateOptions::default(),
            composite: CompositeOptions::default(),
            classical: ZOptions::default(),
        }
    }
}

impl RunConfig {
    /// Config from a JSON file; absent keys take their defaults.
    pub fn load(path: &Path) -> Result<Self, CommandError> {
        let text = fs::read_to_string(path).map_err(|source| CommandError::Read { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))
    }

    /// Copies the master seed and thread cap into the nested settings.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.chain.seed = c.seed;
        c.chain.threads = c.threads;
        c
    }

    pub fn sha256(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub config_sha256: String,
    pub inputs: Vec<FileDigest>,
    /// Every file written besides the manifest, relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub converged: bool,
    pub fits: Vec<FitStatus>,
    pub warnings: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
}

impl RunOutcome {
    /// 0 when every fit converged, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.manifest.converged {
            0
        } else {
            3
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files of one run, collected before anything is written.
struct Run {
    cfg: RunConfig,
    config_sha256: String,
    inputs: Vec<FileDigest>,
    files: Vec<(String, String, Vec<u8>)>,
    fits: Vec<FitStatus>,
    converged: bool,
    warnings: Vec<String>,
}

impl Run {
    fn new(cfg: RunConfig) -> Self {
        let config_sha256 = cfg.sha256();
        Run { cfg, config_sha256, inputs: Vec::new(), files: Vec::new(), fits: Vec::new(), converged: true, warnings: Vec::new() }
    }

    fn read(&mut self, role: &str, path: &Path) -> Result<Vec<u8>, CommandError> {
        let bytes = fs::read(path).map_err(|source| CommandError::Read { path: path.display().to_string(), source })?;
        self.inputs.push(FileDigest { role: role.into(), path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(bytes)
    }

    fn json<T: Serialize>(&mut self, role: &str, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.files.push((role.into(), name.into(), text.into_bytes()));
    }

    /// CSV preceded by a `# seed=..,config_sha256=..` provenance line.
    fn csv(&mut self, role: &str, name: &str, body: &str) {
        let text = format!("# seed={},config_sha256={}\n{body}", self.cfg.seed, self.config_sha256);
        self.files.push((role.into(), name.into(), text.into_bytes()));
    }

    fn fit(&mut self, status: FitStatus) {
        self.converged &= status.converged;
        self.fits.push(status);
    }

    fn finish(self) -> Result<RunOutcome, CommandError> {
        let out = &self.cfg.out;
        let werr = |p: &Path| {
            let path = p.display().to_string();
            move |source| CommandError::Write { path, source }
        };
        fs::create_dir_all(out).map_err(werr(out))?;
        let mut outputs = Vec::new();
        for (role, name, bytes) in &self.files {
            let p = out.join(name);
            fs::write(&p, bytes).map_err(werr(&p))?;
            outputs.push(FileDigest { role: role.clone(), path: name.clone(), sha256: sha256_hex(bytes) });
        }
        let manifest = Manifest {
            tool: "provprof".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: self.cfg.clone(),
            config_sha256: self.config_sha256.clone(),
            inputs: self.inputs,
            outputs,
            converged: self.converged,
            fits: self.fits,
            warnings: self.warnings,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let p = out.join(MANIFEST_FILE);
        fs::write(&p, text).map_err(werr(&p))?;
        Ok(RunOutcome { manifest })
    }
}

/// Execute `cfg.command` and write its outputs and manifest into `cfg.out`.
/// Non-convergence still writes everything; see [`RunOutcome::exit_code`].
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, CommandError> {
    let cfg = cfg.resolved();
    cfg.model.validate()?;
    cfg.chain.validate()?;
    let go = || {
        let mut r = Run::new(cfg.clone());
        match cfg.command {
            CommandKind::Simulate => simulate(&mut r)?,
            CommandKind::Profile => profile_cmd(&mut r)?,
            CommandKind::Sensitivity => sensitivity(&mut r)?,
            CommandKind::Composite => composite(&mut r)?,
            CommandKind::Classical => classical_cmd(&mut r)?,
        }
        r.finish()
    };
    match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| CommandError::Config(format!("threads: {e}")))?
            .install(go),
        None => go(),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CommandError> {
    p.as_deref().ok_or_else(|| CommandError::Config(format!("{what} input is required")))
}

fn json_input<T: serde::de::DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<T, CommandError> {
    serde_json::from_slice(bytes).map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))
}

fn read_cohort(r: &mut Run) -> Result<Cohort, CommandError> {
    let path = required(&r.cfg.inputs.cohort, "cohort")?.to_path_buf();
    let bytes = r.read("cohort", &path)?;
    Ok(parse_csv(&bytes[..])?)
}

#[derive(Serialize)]
struct SimulationReport<'a> {
    generator: &'a GeneratorMetadata,
    summary: CohortSummary,
}

fn simulate(r: &mut Run) -> Result<(), CommandError> {
    let targets = match r.cfg.inputs.targets.clone() {
        Some(p) => {
            let b = r.read("targets", &p)?;
            json_input::<CalibrationTargets>(&b, &p)?
        }
        None => CalibrationTargets::massachusetts(),
    };
    let model = match r.cfg.inputs.coefficients.clone() {
        Some(p) => {
            let b = r.read("coefficients", &p)?;
            json_input::<RiskModel>(&b, &p)?
        }
        None => RiskModel::massachusetts(),
    };
    let opts = SynthesisOptions {
        outcome: r.cfg.simulate.outcome,
        volume_override: r.cfg.simulate.volume_override,
        ..SynthesisOptions::new(r.cfg.seed)
    };
    let (cohort, meta) = synthesize_cohort(&targets, &model, &opts)?;
    // the cohort stays directly ingestible, so it carries no provenance line
    r.files.push(("cohort".into(), "cohort.csv".into(), emit_csv(&cohort).into_bytes()));
    r.json("metadata", "metadata.json", &SimulationReport { generator: &meta, summary: summarize(&cohort) });
    Ok(())
}

/// Classical fixed-effects results reported next to the hierarchical ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalReport {
    pub intercept: f64,
    pub slopes: Vec<f64>,
    pub z: ZReport<f64>,
    pub oe: Vec<OeRow>,
    /// Variation of the crude hospital rates; `None` when undefined.
    pub variation: Option<VariationIndices<f64>>,
}

pub fn classical_report(cohort: &Cohort, opts: &ZOptions) -> Result<ClassicalReport, ClassicalError> {
    let fit = fit_logistic_mle::<f64>(cohort)?;
    let z = crate::classical::z_outliers(&fit, cohort, opts)?;
    let oe = oe_standardized(&fit, cohort);
    let s = summarize(cohort);
    let rates: Vec<f64> = s.hospitals.iter().map(|h| h.deaths as f64 / h.n as f64).collect();
    let volumes: Vec<usize> = s.hospitals.iter().map(|h| h.n).collect();
    Ok(ClassicalReport { intercept: fit.intercept, slopes: fit.slopes.clone(), z, oe, variation: variation_indices(&rates, &volumes).ok() })
}

/// `method,hospital_id,n,observed,expected,statistic,lower,upper,flag`, rates
/// in percent. `z` rows carry the z-score; `oe` rows the standardized rate
/// and its interval.
pub fn classical_csv(c: &ClassicalReport) -> String {
    let mut s = String::from("method,hospital_id,n,observed,expected,statistic,lower,upper,flag\n");
    for z in &c.z.rows {
        let _ = writeln!(
            s,
            "z,{},{},{},{},{},,,{}",
            csv_field(&z.hospital_id.0),
            z.n,
            100.0 * z.observed,
            100.0 * z.expected,
            z.z,
            u8::from(z.flagged)
        );
    }
    for o in &c.oe {
        let _ = writeln!(
            s,
            "oe,{},{},{},{},{},{},{},{}",
            csv_field(&o.hospital_id.0),
            o.n,
            o.observed_pct,
            o.expected_pct,
            o.standardized_pct,
            o.lower_pct,
            o.upper_pct,
            u8::from(o.flagged)
        );
    }
    s
}

#[derive(Serialize)]
struct ProfileFile<'a> {
    report: &'a ProfileReport,
    classical: Option<ClassicalReport>,
    posterior: Vec<ParamSummary>,
}

fn profile_cmd(r: &mut Run) -> Result<(), CommandError> {
    let cohort = read_cohort(r)?;
    if let AnchorPolicy::Explicit(a) = r.cfg.profile.anchor {
        if !(a > 0.0 && a < 100.0) {
            return Err(CommandError::Config(format!("anchor must be a rate in (0, 100), got {a}")));
        }
    }
    let (report, art) = profile(&r.cfg.model, &cohort, &r.cfg.chain, &r.cfg.profile)?;
    let classical = match classical_report(&cohort, &r.cfg.classical) {
        Ok(c) => Some(c),
        Err(e) => {
            r.warnings.push(format!("classical analysis skipped: {e}"));
            None
        }
    };
    for f in &report.fits {
        r.fit(f.clone());
    }
    r.json("report", "profile.json", &ProfileFile { report: &report, classical: classical.clone(), posterior: art.draws.summary_table() });
    r.csv("report_table", "profile.csv", &report.to_csv());
    r.csv("caterpillar", "caterpillar.csv", &report.caterpillar_csv());
    r.csv("scatter", "scatter.csv", &scatter_csv(&scatter_data(&art.rates)));
    if let Some(c) = &classical {
        r.csv("classical", "classical.csv", &classical_csv(c));
    }
    Ok(())
}

fn sensitivity(r: &mut Run) -> Result<(), CommandError> {
    let cohort = read_cohort(r)?;
    for p in &r.cfg.priors {
        p.validate()?;
    }
    let rows: Vec<SensitivityRow> = sensitivity_suite(&r.cfg.model, &cohort, &r.cfg.priors, &r.cfg.chain)?;
    for row in &rows {
        r.fit(FitStatus { name: row.label.clone(), converged: row.converged, max_rhat: None, min_ess: None });
    }
    r.json("report", "sensitivity.json", &rows);
    r.csv("table", "sensitivity.csv", &sensitivity_csv(&rows));
    Ok(())
}

/// An item response fit without its draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrtSummary {
    pub kind: IrtKind,
    pub measures: Vec<String>,
    pub dropped: Vec<String>,
    pub difficulty: Vec<Summary>,
    pub discrimination: Vec<Summary>,
    pub theta: Vec<(String, Summary)>,
    pub acceptance: std::collections::BTreeMap<String, f64>,
}

impl From<&IrtFit> for IrtSummary {
    fn from(f: &IrtFit) -> Self {
        IrtSummary {
            kind: f.kind,
            measures: f.measures.clone(),
            dropped: f.dropped.clone(),
            difficulty: f.difficulty.clone(),
            discrimination: f.discrimination.clone(),
            theta: f.hospitals.iter().map(|h| h.0.clone()).zip(f.theta.iter().copied()).collect(),
            acceptance: f.draws.acceptance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompositeReport {
    Pooled { scores: Vec<PooledScore> },
    AllOrNone { scores: Vec<AllOrNoneScore> },
    Irt { pooled: Vec<PooledScore>, fit: IrtSummary },
}

fn pooled_csv(scores: &[PooledScore]) -> String {
    let mut s = String::from("hospital_id,successes,eligible,rate,top_decile\n");
    for p in scores {
        let _ = writeln!(s, "{},{},{},{},{}", csv_field(&p.hospital_id.0), p.successes, p.eligible, p.rate, u8::from(p.top_decile));
    }
    s
}

fn composite(r: &mut Run) -> Result<(), CommandError> {
    let inputs = r.cfg.inputs.clone();
    let opts = r.cfg.composite.clone();
    let (panel, patients) = match (&inputs.panel, &inputs.patients) {
        (Some(p), None) => {
            let b = r.read("panel", p)?;
            (parse_panel_csv(&b[..])?, None)
        }
        (None, Some(p)) => {
            let b = r.read("patients", p)?;
            let pts = parse_patient_csv(&b[..])?;
            (panel_from_patients(&pts)?, Some(pts))
        }
        _ => return Err(CommandError::Config("composite needs exactly one of a panel or a patient file".into())),
    };
    let irt_kind = match opts.kind {
        CompositeKind::Pooled => {
            let scores = pooled_composite(&panel)?;
            r.csv("scores", "composite.csv", &pooled_csv(&scores));
            r.json("report", "composite.json", &CompositeReport::Pooled { scores });
            return Ok(());
        }
        CompositeKind::AllOrNone => {
            let pts = patients.ok_or_else(|| CommandError::Config("all-or-none scoring needs the patient file".into()))?;
            let scores = all_or_none(&pts)?;
            let mut s = String::from("hospital_id,patients,successes,rate\n");
            for a in &scores {
                let rate = a.rate.map(|x| x.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{},{},{},{rate}", csv_field(&a.hospital_id.0), a.patients, a.successes);
            }
            r.csv("scores", "composite.csv", &s);
            r.json("report", "composite.json", &CompositeReport::AllOrNone { scores });
            return Ok(());
        }
        CompositeKind::Rasch => IrtKind::Rasch,
        CompositeKind::TwoPl => IrtKind::TwoPl,
    };
    if opts.icc_points < 2 || !(opts.icc_lo < opts.icc_hi) {
        return Err(CommandError::Config("icc grid needs icc_lo < icc_hi and at least 2 points".into()));
    }
    let fit = fit_irt(&panel, irt_kind, &r.cfg.chain)?;
    let (max_rhat, min_ess) = extreme_diagnostics(&fit.draws);
    r.fit(FitStatus { name: irt_kind.label().into(), converged: fit.draws.converged, max_rhat, min_ess });
    r.warnings.extend(fit.warnings.iter().cloned());
    let step = (opts.icc_hi - opts.icc_lo) / (opts.icc_points - 1) as f64;
    let grid: Vec<f64> = (0..opts.icc_points).map(|j| opts.icc_lo + step * j as f64).collect();
    r.csv("theta", "composite.csv", &fit.theta_csv());
    r.csv("icc", "icc.csv", &icc_csv(&icc_data(&fit, &grid)));
    r.json("report", "composite.json", &CompositeReport::Irt { pooled: pooled_composite(&panel)?, fit: IrtSummary::from(&fit) });
    Ok(())
}

fn classical_cmd(r: &mut Run) -> Result<(), CommandError> {
    let cohort = read_cohort(r)?;
    let c = classical_report(&cohort, &r.cfg.classical)?;
    r.csv("table", "classical.csv", &classical_csv(&c));
    r.json("report", "classical.json", &c);
    Ok(())
}
