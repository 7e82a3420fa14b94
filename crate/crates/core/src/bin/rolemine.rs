use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use rolemine::ddm::{fit_ddm_chains, DdmConfig};
use rolemine::eval::{
    calibration_curve, cross_validate_k, error_breakdown, evaluate, median, percentile, repetition_detail, FitFn, SplitSpec,
};
use rolemine::formats::{
    load_matrix, read_attributes, save_matrix, write_confidence, MatrixLayout, ModelParameters, RbacConfigFile,
};
use rolemine::hybrid::{attribute_relevance, fit_hybrid, AttributeTable, HybridConfig, PermissionRelevance};
use rolemine::mac::{fit_mac, posterior_cell_confidence, MacFit, MacFitConfig};
use rolemine::synth::{gen_ddm_data, gen_mac_data, DdmDataSpec, MacDataSpec, SyntheticDataset, TrueConfig};
use rolemine::{hamming, BinaryMatrix, Error, FlatRbacConfig, ModelKind};

const EXIT_IO: u8 = 1;
const EXIT_PARSE: u8 = 3;
const EXIT_VALIDATION: u8 = 4;
const EXIT_NOT_CONVERGED: u8 = 5;

#[derive(Parser)]
#[command(name = "rolemine", version, about = "Probabilistic role mining from user-permission matrices")]
struct Cli {
    /// Worker threads for parallel folds and E-steps (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// JSON file with default values; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Generate(GenerateArgs),
    /// Fit a role configuration.
    Mine(MineArgs),
    /// Hold-out generalization error, optionally over a noise sweep.
    Evaluate(EvaluateArgs),
    /// Relevance of a business attribute for every permission.
    Relevance(RelevanceArgs),
    /// Calibration of MAC cell confidences against a clean matrix.
    Confidence(ConfidenceArgs),
    /// Summarize a fitted configuration file.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Generator {
    Mac,
    Ddm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Model {
    Mac,
    Ddm,
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Layout {
    Dense,
    Sparse,
}

impl From<Layout> for MatrixLayout {
    fn from(l: Layout) -> Self {
        match l {
            Layout::Dense => MatrixLayout::Dense,
            Layout::Sparse => MatrixLayout::Sparse,
        }
    }
}

/// Values a config file may supply. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    roles: Option<usize>,
    max_set_size: Option<usize>,
    max_iterations: Option<usize>,
    cooling_rate: Option<f64>,
    initial_temperature_factor: Option<f64>,
    lambda: Option<f64>,
    min_count: Option<usize>,
    alpha: Option<f64>,
    gamma: Option<f64>,
    max_alternations: Option<usize>,
    chains: Option<usize>,
    train_fraction: Option<f64>,
    repetitions: Option<usize>,
    users: Option<usize>,
    perms: Option<usize>,
    max_roles_per_user: Option<usize>,
    density: Option<f64>,
    noise: Option<f64>,
    bins: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct ModelOpts {
    /// Number of roles K [default: 10].
    #[arg(long)]
    roles: Option<usize>,
    /// Largest role set per user in MAC [default: 2].
    #[arg(long)]
    max_set_size: Option<usize>,
    /// EM iteration cap [default: 1000].
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Geometric cooling factor per EM pass [default: 0.95].
    #[arg(long)]
    cooling_rate: Option<f64>,
    /// Initial temperature as a multiple of the mean initial risk [default: 1.0].
    #[arg(long)]
    initial_temperature_factor: Option<f64>,
    /// DDM concentration [default: 1.0].
    #[arg(long)]
    alpha: Option<f64>,
    /// DDM symmetric Beta prior strength [default: 0.5].
    #[arg(long)]
    gamma: Option<f64>,
    /// DDM alternation cap [default: 200].
    #[arg(long)]
    max_alternations: Option<usize>,
    /// Independent DDM chains, best MAP kept [default: 1].
    #[arg(long)]
    chains: Option<usize>,
    /// Hybrid weight of the business cost [default: 0].
    #[arg(long)]
    lambda: Option<f64>,
    /// Attribute file (`user,kind,value`), required for hybrid.
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// Attribute kind to use [default: first in file].
    #[arg(long)]
    attribute_kind: Option<String>,
    /// Attribute values with fewer users are ignored [default: 10].
    #[arg(long)]
    min_count: Option<usize>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "mac")]
    kind: Generator,
    /// [default: 400]
    #[arg(long)]
    users: Option<usize>,
    /// [default: 50]
    #[arg(long)]
    perms: Option<usize>,
    /// Number of roles (MAC generator) [default: 10].
    #[arg(long)]
    roles: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    max_roles_per_user: Option<usize>,
    /// Role-permission density (MAC generator) [default: 0.3].
    #[arg(long)]
    density: Option<f64>,
    /// Fraction of cells replaced by a coin flip [default: 0].
    #[arg(long)]
    noise: Option<f64>,
    /// [default: 1.0]
    #[arg(long)]
    alpha: Option<f64>,
    /// [default: 0.5]
    #[arg(long)]
    gamma: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "dense")]
    format: Layout,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MineArgs {
    /// Input matrix (`%rbac-matrix` file or header-less pair list).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "mac")]
    model: Model,
    #[command(flatten)]
    opts: ModelOpts,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output configuration (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Also write per-cell confidences (MAC and hybrid).
    #[arg(long)]
    confidence: Option<PathBuf>,
    /// Select K by cross-validation over an inclusive range, e.g. `2..12`.
    #[arg(long)]
    sweep_k: Option<String>,
    /// CSV for the per-K error table [default: OUT with `.ksweep.csv`].
    #[arg(long)]
    sweep_out: Option<PathBuf>,
    /// [default: 0.8]
    #[arg(long)]
    train_fraction: Option<f64>,
    /// [default: 5]
    #[arg(long)]
    repetitions: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Input matrix; not needed with `--noise-sweep`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Clean matrix for the ground-truth error breakdown.
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mac")]
    model: Model,
    #[command(flatten)]
    opts: ModelOpts,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 0.8]
    #[arg(long)]
    train_fraction: Option<f64>,
    /// [default: 5]
    #[arg(long)]
    repetitions: Option<usize>,
    /// Comma-separated noise levels; generates data per level and seed.
    #[arg(long, value_delimiter = ',')]
    noise_sweep: Option<Vec<f64>>,
    /// Generator for the noise sweep.
    #[arg(long, value_enum, default_value = "mac")]
    generator: Generator,
    /// Datasets per noise level [default: 10].
    #[arg(long)]
    datasets: Option<usize>,
    /// Users per generated dataset [default: 400].
    #[arg(long)]
    users: Option<usize>,
    /// Permissions per generated dataset [default: 50].
    #[arg(long)]
    perms: Option<usize>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RelevanceArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    attributes: PathBuf,
    /// Only this attribute kind [default: all].
    #[arg(long)]
    kind: Option<String>,
    /// [default: 10]
    #[arg(long)]
    min_count: Option<usize>,
    /// Histogram bins [default: 10].
    #[arg(long)]
    bins: Option<usize>,
    /// Per-permission CSV.
    #[arg(long)]
    out: PathBuf,
    /// Histogram CSV [default: OUT with `.hist.csv`].
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Accepted for uniformity; relevance is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ConfidenceArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    #[command(flatten)]
    opts: ModelOpts,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 10]
    #[arg(long)]
    bins: Option<usize>,
    /// Calibration CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-cell confidence CSV.
    #[arg(long)]
    cells: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Fitted configuration (JSON).
    #[arg(long = "fitted")]
    fitted: PathBuf,
    /// Matrix to score the configuration against.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Accepted for uniformity; reports are deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => EXIT_IO,
            Error::Parse { .. } | Error::Json(_) => EXIT_PARSE,
            _ => EXIT_VALIDATION,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_VALIDATION,
        message: msg.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Outcome of a command that wrote its outputs.
enum Done {
    Ok,
    NotConverged,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let result = load_file_config(cli.config.as_deref()).and_then(|fc| match cli.command {
        Command::Generate(a) => cmd_generate(a, &fc),
        Command::Mine(a) => cmd_mine(a, &fc),
        Command::Evaluate(a) => cmd_evaluate(a, &fc),
        Command::Relevance(a) => cmd_relevance(a, &fc),
        Command::Confidence(a) => cmd_confidence(a, &fc),
        Command::Report(a) => cmd_report(a),
    });
    match result {
        Ok(Done::Ok) => ExitCode::SUCCESS,
        Ok(Done::NotConverged) => {
            eprintln!("warning: fit did not converge; best state written");
            ExitCode::from(EXIT_NOT_CONVERGED)
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure {
        code: EXIT_PARSE,
        message: format!("{}: {e}", path.display()),
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_input(path: &Path) -> CliResult<BinaryMatrix> {
    match load_matrix(path) {
        Err(Error::Io(e)) => Err(io_err(path, e)),
        other => Ok(other?),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Model settings after applying flags over the config file over defaults.
#[derive(Debug, Clone)]
struct Resolved {
    seed: u64,
    roles: usize,
    max_set_size: usize,
    max_iterations: usize,
    cooling_rate: f64,
    initial_temperature_factor: f64,
    alpha: f64,
    gamma: f64,
    max_alternations: usize,
    chains: usize,
    lambda: f64,
    min_count: usize,
    attributes: Option<PathBuf>,
    attribute_kind: Option<String>,
}

impl Resolved {
    fn new(o: &ModelOpts, seed: Option<u64>, fc: &FileConfig) -> Self {
        Self {
            seed: seed.or(fc.seed).unwrap_or(0),
            roles: o.roles.or(fc.roles).unwrap_or(10),
            max_set_size: o.max_set_size.or(fc.max_set_size).unwrap_or(2),
            max_iterations: o.max_iterations.or(fc.max_iterations).unwrap_or(1000),
            cooling_rate: o.cooling_rate.or(fc.cooling_rate).unwrap_or(0.95),
            initial_temperature_factor: o.initial_temperature_factor.or(fc.initial_temperature_factor).unwrap_or(1.0),
            alpha: o.alpha.or(fc.alpha).unwrap_or(1.0),
            gamma: o.gamma.or(fc.gamma).unwrap_or(0.5),
            max_alternations: o.max_alternations.or(fc.max_alternations).unwrap_or(200),
            chains: o.chains.or(fc.chains).unwrap_or(1),
            lambda: o.lambda.or(fc.lambda).unwrap_or(0.0),
            min_count: o.min_count.or(fc.min_count).unwrap_or(10),
            attributes: o.attributes.clone(),
            attribute_kind: o.attribute_kind.clone(),
        }
    }

    fn mac(&self, k: usize, seed: u64) -> MacFitConfig<f64> {
        let mut c = MacFitConfig::new(k).with_seed(seed);
        c.max_set_size = self.max_set_size.min(k);
        c.max_iterations = self.max_iterations;
        c.cooling_rate = self.cooling_rate;
        c.initial_temperature_factor = self.initial_temperature_factor;
        c
    }

    fn ddm(&self, seed: u64) -> DdmConfig {
        DdmConfig {
            alpha: self.alpha,
            beta_prior_strength: self.gamma,
            max_alternations: self.max_alternations,
            seed,
            ..DdmConfig::default()
        }
    }

    fn manifest(&self) -> serde_json::Value {
        json!({
            "seed": self.seed,
            "roles": self.roles,
            "max_set_size": self.max_set_size,
            "max_iterations": self.max_iterations,
            "cooling_rate": self.cooling_rate,
            "initial_temperature_factor": self.initial_temperature_factor,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "max_alternations": self.max_alternations,
            "chains": self.chains,
            "lambda": self.lambda,
            "min_count": self.min_count,
        })
    }
}

fn load_attribute(path: &Path, kind: Option<&str>, users: usize) -> CliResult<AttributeTable> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let tables = read_attributes(text.as_bytes(), &path.display().to_string(), users)?;
    match kind {
        None => Ok(tables.into_iter().next().expect("nonempty")),
        Some(k) => tables
            .into_iter()
            .find(|t| t.kind() == k)
            .ok_or_else(|| invalid(format!("attribute kind `{k}` not found in {}", path.display()))),
    }
}

fn cmd_generate(a: GenerateArgs, fc: &FileConfig) -> CliResult<Done> {
    let seed = a.seed.or(fc.seed).unwrap_or(0);
    let users = a.users.or(fc.users).unwrap_or(400);
    let perms = a.perms.or(fc.perms).unwrap_or(50);
    let noise = a.noise.or(fc.noise).unwrap_or(0.0);
    let (ds, params) = match a.kind {
        Generator::Mac => {
            let spec = MacDataSpec {
                users,
                perms,
                roles: a.roles.or(fc.roles).unwrap_or(10),
                max_roles_per_user: a.max_roles_per_user.or(fc.max_roles_per_user).unwrap_or(2),
                density: a.density.or(fc.density).unwrap_or(0.3),
                noise,
                seed,
            };
            (gen_mac_data(&spec)?, serde_json::to_value(&spec).expect("serializable"))
        }
        Generator::Ddm => {
            let spec = DdmDataSpec {
                users,
                perms,
                alpha: a.alpha.or(fc.alpha).unwrap_or(1.0),
                beta_prior_strength: a.gamma.or(fc.gamma).unwrap_or(0.5),
                noise,
                seed,
            };
            (gen_ddm_data(&spec)?, serde_json::to_value(&spec).expect("serializable"))
        }
    };
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let layout: MatrixLayout = a.format.into();
    save_matrix(&a.out.join("observed.txt"), &ds.x_observed, layout)?;
    save_matrix(&a.out.join("clean.txt"), &ds.x_clean, layout)?;
    write_text(&a.out.join("truth.json"), &truth_file(&ds).to_json()?)?;
    let manifest = json!({
        "generator": a.kind,
        "parameters": params,
        "noise_cells": ds.noise_cells.len(),
        "format": match a.format { Layout::Dense => "dense", Layout::Sparse => "sparse" },
        "files": {
            "observed": "observed.txt",
            "clean": "clean.txt",
            "truth": "truth.json",
        },
    });
    write_text(&a.out.join("manifest.json"), &(serde_json::to_string_pretty(&manifest).expect("json") + "\n"))?;
    Ok(Done::Ok)
}

fn truth_file(ds: &SyntheticDataset) -> RbacConfigFile {
    match &ds.truth {
        TrueConfig::Flat(c) => RbacConfigFile::from_flat(ModelKind::Mac, c, ModelParameters::None),
        TrueConfig::Hier(c) => RbacConfigFile::from_hier(ModelKind::Ddm, c, ModelParameters::None),
    }
}

fn parse_range(s: &str) -> CliResult<Vec<usize>> {
    let bad = || invalid(format!("--sweep-k expects `A..B` with 1 <= A <= B, got `{s}`"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok((a..=b).collect())
}

/// A fitted model reduced to what the commands need.
struct Fitted {
    file: RbacConfigFile,
    flat: FlatRbacConfig,
    converged: bool,
    mac: Option<MacFit<f64>>,
}

fn mac_parameters(fit: &MacFit<f64>, lambda: Option<f64>) -> ModelParameters {
    let b = fit.params.beta();
    ModelParameters::Mac {
        beta: (0..b.rows()).map(|k| b.row(k).to_vec()).collect(),
        eps: fit.params.eps(),
        r: fit.params.r(),
        lambda,
    }
}

fn mac_diagnostics(file: &mut RbacConfigFile, fit: &MacFit<f64>) {
    let d = &fit.diagnostics;
    let diag = &mut file.diagnostics;
    diag.insert("iterations".into(), d.iterations.into());
    diag.insert("converged".into(), d.converged.into());
    diag.insert("log_likelihood".into(), json!(d.log_likelihood));
    diag.insert("free_energy".into(), json!(d.free_energy));
    diag.insert("initial_temperature".into(), json!(d.initial_temperature));
    diag.insert("final_temperature".into(), json!(d.final_temperature));
    diag.insert("newton_fallbacks".into(), d.newton_fallbacks.into());
}

fn fit_model(x: &BinaryMatrix, model: Model, r: &Resolved, k: usize, seed: u64, attrs: Option<&AttributeTable>) -> CliResult<Fitted> {
    match model {
        Model::Mac => {
            let fit = fit_mac(x, &r.mac(k, seed))?;
            let mut file = RbacConfigFile::from_flat(ModelKind::Mac, &fit.config, mac_parameters(&fit, None));
            mac_diagnostics(&mut file, &fit);
            Ok(Fitted {
                flat: fit.config.clone(),
                converged: fit.diagnostics.converged,
                file,
                mac: Some(fit),
            })
        }
        Model::Hybrid => {
            let attrs = attrs.ok_or_else(|| invalid("hybrid mining needs --attributes"))?;
            let mut cfg = HybridConfig::new(r.lambda, r.mac(k, seed));
            cfg.min_count = r.min_count;
            let fit = fit_hybrid(x, attrs, &cfg)?;
            let mut file = RbacConfigFile::from_flat(ModelKind::Hybrid, &fit.mac.config, mac_parameters(&fit.mac, Some(r.lambda)));
            mac_diagnostics(&mut file, &fit.mac);
            file.diagnostics.insert("business_cost".into(), json!(fit.business_cost));
            file.diagnostics.insert("attribute_kind".into(), attrs.kind().into());
            Ok(Fitted {
                flat: fit.mac.config.clone(),
                converged: fit.mac.diagnostics.converged,
                file,
                mac: Some(fit.mac),
            })
        }
        Model::Ddm => {
            let fit = fit_ddm_chains(x, &r.ddm(seed), r.chains.max(1))?;
            let mut file = RbacConfigFile::from_hier(
                ModelKind::Ddm,
                &fit.config,
                ModelParameters::Ddm {
                    alpha: r.alpha,
                    beta_prior_strength: r.gamma,
                },
            );
            let d = &fit.diagnostics;
            let diag = &mut file.diagnostics;
            diag.insert("alternations".into(), d.alternations.into());
            diag.insert("converged".into(), d.converged.into());
            diag.insert("map_log_joint".into(), json!(d.map_log_joint));
            diag.insert("business_roles".into(), fit.state.num_business_roles().into());
            diag.insert("technical_roles".into(), fit.state.num_technical_roles().into());
            Ok(Fitted {
                flat: fit.config.flatten(),
                converged: d.converged,
                file,
                mac: None,
            })
        }
    }
}

fn fold_fitter<'a>(model: Model, r: &'a Resolved, attrs: Option<&'a AttributeTable>, x_rows: usize) -> impl Fn(&BinaryMatrix, usize, u64) -> rolemine::Result<FlatRbacConfig> + Sync + 'a {
    move |train: &BinaryMatrix, k: usize, seed: u64| match model {
        Model::Mac => Ok(fit_mac(train, &r.mac(k, seed))?.config),
        Model::Ddm => Ok(fit_ddm_chains(train, &r.ddm(seed), r.chains.max(1))?.config.flatten()),
        Model::Hybrid => {
            // Fold users are a subset; attributes are matched by row content
            // through the full table only when sizes agree.
            let attrs = attrs.ok_or_else(|| Error::InvalidConfig("hybrid needs attributes".into()))?;
            if train.rows() == x_rows {
                let mut cfg = HybridConfig::new(r.lambda, r.mac(k, seed));
                cfg.min_count = r.min_count;
                Ok(fit_hybrid(train, attrs, &cfg)?.mac.config)
            } else {
                Err(Error::InvalidConfig("hybrid cross-validation needs per-fold attributes".into()))
            }
        }
    }
}

fn cmd_mine(a: MineArgs, fc: &FileConfig) -> CliResult<Done> {
    let x = read_input(&a.input)?;
    let r = Resolved::new(&a.opts, a.seed, fc);
    if r.lambda.is_nan() || r.lambda < 0.0 {
        return Err(invalid(format!("--lambda must be nonnegative, got {}", r.lambda)));
    }
    let attrs = match (&r.attributes, a.model) {
        (Some(p), _) => Some(load_attribute(p, r.attribute_kind.as_deref(), x.rows())?),
        (None, Model::Hybrid) => return Err(invalid("hybrid mining needs --attributes")),
        (None, _) => None,
    };
    let start = Instant::now();
    let mut k = r.roles;
    let mut sweep_note = None;
    if let Some(range) = &a.sweep_k {
        if a.model == Model::Hybrid {
            return Err(invalid("--sweep-k is available for mac and ddm"));
        }
        let candidates = parse_range(range)?;
        let spec = SplitSpec {
            train_fraction: a.train_fraction.or(fc.train_fraction).unwrap_or(0.8),
            seed: r.seed,
            repetitions: a.repetitions.or(fc.repetitions).unwrap_or(5),
        };
        let fitter = fold_fitter(a.model, &r, attrs.as_ref(), x.rows());
        let sweep = cross_validate_k(&x, &candidates, &fitter as &FitFn<'_>, &spec)?;
        let mut csv = String::from("k,repetition,gen_error\n");
        for s in &sweep.scores {
            for (rep, e) in s.errors.iter().enumerate() {
                let v = e.map_or("NA".to_string(), |v| v.to_string());
                csv.push_str(&format!("{},{},{}\n", s.k, rep, v));
            }
        }
        csv.push_str("\nk,median,p25,p75,disqualified\n");
        for s in &sweep.scores {
            csv.push_str(&format!("{},{},{},{},{}\n", s.k, s.median, s.p25, s.p75, s.disqualified));
        }
        let out = a.sweep_out.clone().unwrap_or_else(|| sibling(&a.out, ".ksweep.csv"));
        write_text(&out, &csv)?;
        k = sweep.selected;
        sweep_note = Some((out, sweep.stopped_early));
    }
    let fitted = fit_model(&x, a.model, &r, k, r.seed, attrs.as_ref())?;
    let mut file = fitted.file;
    let recon = fitted.flat.reconstruct();
    let err = hamming(&recon, &x)? as f64 / (x.rows() * x.cols()) as f64;
    file.diagnostics.insert("reconstruction_error".into(), json!(err));
    file.diagnostics.insert("runtime_seconds".into(), json!(start.elapsed().as_secs_f64()));
    file.diagnostics.insert("roles".into(), fitted.flat.num_roles().into());
    file.diagnostics.insert("resolved_config".into(), r.manifest());
    if let Some((path, early)) = sweep_note {
        file.diagnostics.insert("selected_k".into(), k.into());
        file.diagnostics.insert("k_sweep_file".into(), path.display().to_string().into());
        file.diagnostics.insert("k_sweep_stopped_early".into(), early.into());
    }
    if let Some(path) = &a.confidence {
        let fit = fitted.mac.as_ref().ok_or_else(|| invalid("--confidence is available for mac and hybrid"))?;
        let conf = posterior_cell_confidence(&x, &fit.config, &fit.params, &fit.responsibilities, &fit.catalog)?;
        let mut buf = Vec::new();
        write_confidence(&mut buf, &recon, &conf)?;
        write_text(path, &String::from_utf8(buf).expect("utf8"))?;
        file.confidence_file = Some(path.display().to_string());
    }
    write_text(&a.out, &file.to_json()?)?;
    println!(
        "model={} roles={} reconstruction_error={:.6} converged={}",
        file.model,
        fitted.flat.num_roles(),
        err,
        fitted.converged
    );
    Ok(if fitted.converged { Done::Ok } else { Done::NotConverged })
}

fn cmd_evaluate(a: EvaluateArgs, fc: &FileConfig) -> CliResult<Done> {
    let r = Resolved::new(&a.opts, a.seed, fc);
    let spec = SplitSpec {
        train_fraction: a.train_fraction.or(fc.train_fraction).unwrap_or(0.8),
        seed: r.seed,
        repetitions: a.repetitions.or(fc.repetitions).unwrap_or(5),
    };
    if a.model == Model::Hybrid {
        return Err(invalid("evaluate supports mac and ddm; use `mine --model hybrid` for hybrid fits"));
    }
    if let Some(levels) = &a.noise_sweep {
        return noise_sweep(&a, levels, &r, &spec, fc);
    }
    let input = a.input.as_ref().ok_or_else(|| invalid("evaluate needs --input or --noise-sweep"))?;
    let x = read_input(input)?;
    let clean = a.clean.as_ref().map(|p| read_input(p)).transpose()?;
    if let Some(c) = &clean {
        if c.shape() != x.shape() {
            return Err(invalid("clean matrix shape differs from input"));
        }
    }
    let fitter = fold_fitter(a.model, &r, None, x.rows());
    let mut csv = String::from("repetition,k,train_error,gen_error");
    if clean.is_some() {
        csv.push_str(",new_fp,new_fn,repeated_fp,repeated_fn");
    }
    csv.push('\n');
    let mut errors = Vec::new();
    for rep in 0..spec.repetitions {
        let d = repetition_detail(&x, r.roles, &fitter as &FitFn<'_>, &spec, rep)?;
        let res = &d.result;
        csv.push_str(&format!("{},{},{},{}", res.repetition, res.k, res.train_error, res.gen_error));
        if let Some(c) = &clean {
            let obs = x.select_rows(&d.test_users)?;
            let cl = c.select_rows(&d.test_users)?;
            let b = error_breakdown(&d.reconstruction, &obs, &cl)?;
            csv.push_str(&format!(
                ",{},{},{},{}",
                b.new_false_positive, b.new_false_negative, b.repeated_false_positive, b.repeated_false_negative
            ));
        }
        csv.push('\n');
        errors.push(res.gen_error);
    }
    let (m, p25, p75) = (median(&errors), percentile(&errors, 25.0), percentile(&errors, 75.0));
    csv.push_str(&format!("summary,{},median={},p25={},p75={}\n", r.roles, m, p25, p75));
    write_text(&a.out, &csv)?;
    println!("median={m:.6} p25={p25:.6} p75={p75:.6}");
    Ok(Done::Ok)
}

fn noise_sweep(a: &EvaluateArgs, levels: &[f64], r: &Resolved, spec: &SplitSpec, fc: &FileConfig) -> CliResult<Done> {
    let datasets = a.datasets.unwrap_or(10);
    let users = a.users.or(fc.users).unwrap_or(400);
    let perms = a.perms.or(fc.perms).unwrap_or(50);
    let mut csv = String::from("noise,median,p25,p75\n");
    for &noise in levels {
        let mut medians = Vec::with_capacity(datasets);
        for d in 0..datasets {
            let seed = r.seed.wrapping_add(d as u64);
            let ds = match a.generator {
                Generator::Mac => gen_mac_data(&MacDataSpec {
                    users,
                    perms,
                    roles: r.roles,
                    noise,
                    seed,
                    ..MacDataSpec::default()
                })?,
                Generator::Ddm => gen_ddm_data(&DdmDataSpec {
                    users,
                    perms,
                    alpha: r.alpha,
                    beta_prior_strength: r.gamma,
                    noise,
                    seed,
                })?,
            };
            let fitter = fold_fitter(a.model, r, None, ds.x_observed.rows());
            let spec = SplitSpec { seed, ..spec.clone() };
            medians.push(evaluate(&ds.x_observed, r.roles, &fitter as &FitFn<'_>, &spec)?.median);
        }
        csv.push_str(&format!(
            "{},{},{},{}\n",
            noise,
            median(&medians),
            percentile(&medians, 25.0),
            percentile(&medians, 75.0)
        ));
    }
    write_text(&a.out, &csv)?;
    Ok(Done::Ok)
}

fn cmd_relevance(a: RelevanceArgs, fc: &FileConfig) -> CliResult<Done> {
    let x = read_input(&a.input)?;
    let text = fs::read_to_string(&a.attributes).map_err(|e| io_err(&a.attributes, e))?;
    let tables = read_attributes(text.as_bytes(), &a.attributes.display().to_string(), x.rows())?;
    let tables: Vec<AttributeTable> = match &a.kind {
        Some(k) => {
            let t: Vec<_> = tables.into_iter().filter(|t| t.kind() == k).collect();
            if t.is_empty() {
                return Err(invalid(format!("attribute kind `{k}` not found")));
            }
            t
        }
        None => tables,
    };
    let min_count = a.min_count.or(fc.min_count).unwrap_or(10);
    let bins = a.bins.or(fc.bins).unwrap_or(10);
    if bins == 0 {
        return Err(invalid("--bins must be positive"));
    }
    let mut csv = String::from("kind,permission,entropy,conditional_entropy,mutual_information,rho\n");
    let mut hist = String::from("kind,bin_lower,bin_upper,count\n");
    for t in &tables {
        let rel = attribute_relevance(&x, t, min_count)?;
        let mut counts = vec![0usize; bins];
        let mut rhos = Vec::new();
        for (d, r) in rel.iter().enumerate() {
            match r {
                PermissionRelevance::Measured(s) => {
                    csv.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        t.kind(),
                        d + 1,
                        s.entropy,
                        s.conditional_entropy,
                        s.mutual_information,
                        s.rho
                    ));
                    counts[((s.rho * bins as f64) as usize).min(bins - 1)] += 1;
                    rhos.push(s.rho);
                }
                PermissionRelevance::InsufficientData => {
                    csv.push_str(&format!("{},{},NA,NA,NA,NA\n", t.kind(), d + 1));
                }
            }
        }
        for (b, c) in counts.iter().enumerate() {
            hist.push_str(&format!("{},{},{},{}\n", t.kind(), b as f64 / bins as f64, (b + 1) as f64 / bins as f64, c));
        }
        if rhos.is_empty() {
            println!("{}: insufficient data", t.kind());
        } else {
            println!("{}: mean_rho={:.6}", t.kind(), rhos.iter().sum::<f64>() / rhos.len() as f64);
        }
    }
    write_text(&a.out, &csv)?;
    write_text(&a.histogram.clone().unwrap_or_else(|| sibling(&a.out, ".hist.csv")), &hist)?;
    Ok(Done::Ok)
}

fn cmd_confidence(a: ConfidenceArgs, fc: &FileConfig) -> CliResult<Done> {
    let x = read_input(&a.input)?;
    let clean = read_input(&a.clean)?;
    if clean.shape() != x.shape() {
        return Err(invalid("clean matrix shape differs from input"));
    }
    let r = Resolved::new(&a.opts, a.seed, fc);
    let fit = fit_mac(&x, &r.mac(r.roles, r.seed))?;
    let recon = fit.config.reconstruct();
    let conf = posterior_cell_confidence(&x, &fit.config, &fit.params, &fit.responsibilities, &fit.catalog)?;
    let table = calibration_curve(&conf, &recon, &clean, a.bins.or(fc.bins).unwrap_or(10))?;
    let mut csv = String::from("bin,lower,upper,confidence,error_rate,count,empty\n");
    for (b, bin) in table.iter().enumerate() {
        let rate = bin.error_rate.map_or("NA".to_string(), |v| v.to_string());
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            b, bin.lower, bin.upper, bin.center, rate, bin.count, bin.error_rate.is_none()
        ));
    }
    write_text(&a.out, &csv)?;
    if let Some(path) = &a.cells {
        let mut buf = Vec::new();
        write_confidence(&mut buf, &recon, &conf)?;
        write_text(path, &String::from_utf8(buf).expect("utf8"))?;
    }
    Ok(if fit.diagnostics.converged { Done::Ok } else { Done::NotConverged })
}

fn cmd_report(a: ReportArgs) -> CliResult<Done> {
    let text = fs::read_to_string(&a.fitted).map_err(|e| io_err(&a.fitted, e))?;
    let file = RbacConfigFile::from_json(&text)?;
    let flat = file.to_flat()?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let w = |out: &mut std::io::StdoutLock<'_>, s: String| writeln!(out, "{s}").map_err(|e| io_err(Path::new("<stdout>"), e));
    w(&mut out, format!("model: {}", file.model))?;
    w(&mut out, format!("users: {}  permissions: {}  roles: {}", file.users, file.permissions, flat.num_roles()))?;
    if let Some(v) = &file.role_hierarchy {
        w(&mut out, format!("technical roles: {}", v.first().map_or(0, |r| r.len())))?;
    }
    let sizes: Vec<usize> = (0..flat.num_roles()).map(|k| flat.u().row_count_ones(k)).collect();
    w(&mut out, format!("permissions per role: {sizes:?}"))?;
    for (key, value) in &file.diagnostics {
        w(&mut out, format!("{key}: {value}"))?;
    }
    if let Some(p) = &a.input {
        let x = read_input(p)?;
        if x.shape() != (file.users, file.permissions) {
            return Err(invalid("input shape differs from the configuration"));
        }
        let err = hamming(&flat.reconstruct(), &x)? as f64 / (x.rows() * x.cols()) as f64;
        w(&mut out, format!("reconstruction error vs input: {err:.6}"))?;
    }
    Ok(Done::Ok)
}
