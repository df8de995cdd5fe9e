//! Command-line front end. Settings come from an optional TOML run file
//! (`schema_version = 1`) or a built-in preset, and flags override them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matern::MaternParams;
use crate::objectives::{MeanModel, ObjectiveKind};
use crate::optimizer::{fit, FitConfig, FitResult};
use crate::predict::{cokrige, evaluate_predictions, regular_grid, ActivePolicy, KrigingMode, Neighborhood, PredictionRequest};
use crate::selection::{select_lambda, solution_path, ClicConfig, ClicSign, PathConfig, PathResult};
use crate::simulate::{sample_locations_uniform, Domain, FieldSimulator};
use crate::spatial_data::{empirical_cross_variogram, load_dataset, normal_score_transform, CsvSchema, SpatialDataset};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable holding the log filter (`error`, `warn`, `info`, `debug`).
pub const LOG_ENV: &str = "MATERN_LASSO_LOG";

const PRESET_ILLUSTRATIVE: &str = include_str!("../presets/illustrative.toml");
const PRESET_REPLICATION: &str = include_str!("../presets/replication.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub coords: Vec<String>,
    /// Value columns; every non-coordinate column when absent.
    pub values: Option<Vec<String>>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            coords: vec!["x".into(), "y".into()],
            values: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub params: Option<MaternParams>,
    /// File holding a parameter document (alternative to inline `params`).
    pub params_file: Option<PathBuf>,
    pub n: Option<usize>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub replicates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub count: Option<usize>,
    pub lambdas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub mode: KrigingMode,
    /// Moving-neighborhood size; `0` uses every training point.
    pub neighbors: usize,
    pub policy: ActivePolicy,
    pub exact: bool,
    pub grid: Option<Vec<usize>>,
    pub targets: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self {
            mode: KrigingMode::default(),
            neighbors: crate::predict::DEFAULT_NEIGHBORS,
            policy: ActivePolicy::default(),
            exact: false,
            grid: None,
            targets: None,
            truth: None,
        }
    }
}

/// Everything one run may configure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Accepted for compatibility; computation is sequential.
    pub threads: Option<usize>,
    pub lambda: f64,
    pub data: DataSection,
    pub simulate: SimulateSection,
    pub fit: FitConfig,
    pub path: PathSection,
    pub clic: ClicConfig,
    pub predict: PredictSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            threads: None,
            lambda: 0.0,
            data: DataSection::default(),
            simulate: SimulateSection::default(),
            fit: FitConfig::default(),
            path: PathSection::default(),
            clic: ClicConfig::default(),
            predict: PredictSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::input(format!("config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::input(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "illustrative" => Self::from_toml(PRESET_ILLUSTRATIVE),
            "replication" => Self::from_toml(PRESET_REPLICATION),
            other => Err(Error::input(format!("unknown preset {other:?} (known: illustrative, replication)"))),
        }
    }

    fn schema(&self) -> CsvSchema {
        let coords: Vec<&str> = self.data.coords.iter().map(String::as_str).collect();
        let values: Option<Vec<&str>> = self.data.values.as_ref().map(|v| v.iter().map(String::as_str).collect());
        CsvSchema::new(&coords, values.as_deref())
    }

    fn dataset(&self) -> Result<SpatialDataset> {
        let path = self.data.path.as_ref().ok_or_else(|| Error::input("no dataset given (--data or [data] path)"))?;
        load_dataset(path, &self.schema())
    }
}

#[derive(Debug, Parser)]
#[command(name = "matern-lasso", version, about = "Sparse multivariate Matérn covariance estimation and cokriging")]
pub struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration: `illustrative` or `replication`.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a multivariate Matérn field at uniform locations.
    Simulate(SimulateArgs),
    /// Fit at one penalty.
    Fit(FitArgs),
    /// Warm-started regularization path with AIC or CLIC.
    Path(PathArgs),
    /// Pick the criterion-minimizing fit from a path document.
    Select(SelectArgs),
    /// Cokriging at grid or listed targets.
    Predict(PredictArgs),
    /// Empirical (cross-)variogram of two variables.
    Variogram(VariogramArgs),
    /// Normal-score transform of every variable.
    Transform(TransformArgs),
    /// Markdown summary of a path document.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Coordinate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub coords: Option<Vec<String>>,
    /// Value columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    Full,
    Composite,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MeanArg {
    Zero,
    Constant,
}

#[derive(Debug, Args)]
pub struct FitSettings {
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Neighbors per location for the composite likelihood.
    #[arg(long)]
    pub v: Option<usize>,
    #[arg(long, value_enum)]
    pub mean: Option<MeanArg>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Estimate nuggets in the marginal pre-fit.
    #[arg(long)]
    pub nugget: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Parameter document (JSON or TOML).
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub lower: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub upper: Option<Vec<f64>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Output CSV, or directory when simulating several replicates.
    #[arg(long, default_value = "simulated.csv")]
    pub out: PathBuf,
    /// Run document (seed, domain, parameters, files).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub settings: FitSettings,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Warm start (parameter, fit or path document).
    #[arg(long)]
    pub warm: Option<PathBuf>,
    #[arg(long, default_value = "fit.json")]
    pub out: PathBuf,
    /// Also write the estimated parameters alone.
    #[arg(long)]
    pub params_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PathArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub settings: FitSettings,
    /// Grid length.
    #[arg(long)]
    pub count: Option<usize>,
    /// Explicit penalties instead of the log grid.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub subsamples: Option<usize>,
    #[arg(long)]
    pub pairs_per_subsample: Option<usize>,
    #[arg(long)]
    pub h_budget: Option<usize>,
    /// Use `-CL - tr(J H⁻¹)` instead of `-CL + tr(J H⁻¹)`.
    #[arg(long)]
    pub clic_reward: bool,
    #[arg(long, default_value = "path.json")]
    pub out: PathBuf,
    #[arg(long, default_value = "path.csv")]
    pub csv: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Path document written by `path`.
    #[arg(long)]
    pub path: PathBuf,
    #[arg(long, default_value = "selected.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub params_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Simple,
    Ordinary,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    All,
    Sparse,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Parameter, fit or path document.
    #[arg(long)]
    pub params: PathBuf,
    /// Regular grid, e.g. `100x100`, over `--lower/--upper` or the data's bounding box.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub lower: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub upper: Option<Vec<f64>>,
    /// CSV of target coordinates.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// CSV with true values at the targets; enables the RMSE table.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Moving-neighborhood size; `0` uses all training points.
    #[arg(long)]
    pub neighbors: Option<usize>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Interpolate the noisy data instead of filtering the nugget.
    #[arg(long)]
    pub exact: bool,
    #[arg(long, default_value = "predictions.csv")]
    pub out: PathBuf,
    /// RMSE table (requires `--truth`).
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VariogramArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// First variable (name or 0-based index).
    #[arg(long)]
    pub var1: String,
    /// Second variable; the first when omitted.
    #[arg(long)]
    pub var2: Option<String>,
    #[arg(long, default_value_t = 15)]
    pub bins: usize,
    /// Largest lag; half the largest pairwise distance when omitted.
    #[arg(long)]
    pub max_dist: Option<f64>,
    #[arg(long, default_value = "variogram.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "scores.csv")]
    pub out: PathBuf,
    /// Directory for the per-variable lookup tables.
    #[arg(long)]
    pub tables: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub path: PathBuf,
    #[arg(long, default_value = "report.md")]
    pub out: PathBuf,
    /// CSV series (same columns as the path CSV).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main_entry() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(_), Some(_)) => return Err(Error::input("give either --config or --preset, not both")),
        (Some(path), None) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cfg.threads {
        if t > 1 {
            log::info!("threads = {t} requested; computation runs sequentially");
        }
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(cfg, a),
        Command::Fit(a) => cmd_fit(cfg, a),
        Command::Path(a) => cmd_path(cfg, a),
        Command::Select(a) => cmd_select(a),
        Command::Predict(a) => cmd_predict(cfg, a),
        Command::Variogram(a) => cmd_variogram(cfg, a),
        Command::Transform(a) => cmd_transform(cfg, a),
        Command::Report(a) => cmd_report(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))
}

/// Parameters from a parameter document (JSON or TOML), a fit document or a
/// path document (its selected fit).
pub fn load_params(path: &Path) -> Result<MaternParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "toml") {
        return toml::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())));
    }
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    let params_value = if value.get("entries").is_some() {
        let path_doc: PathResult = serde_json::from_value(value).map_err(|e| Error::Serde(e.to_string()))?;
        let fit = path_doc.selected_fit().ok_or_else(|| Error::input("path document has no selected fit"))?;
        return Ok(fit.params.clone());
    } else if let Some(p) = value.get("params") {
        p.clone()
    } else {
        value
    };
    serde_json::from_value::<MaternParams>(params_value).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(d) = &a.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(c) = &a.coords {
        cfg.data.coords = c.clone();
    }
    if let Some(v) = &a.values {
        cfg.data.values = Some(v.clone());
    }
}

fn apply_fit(cfg: &mut RunConfig, s: &FitSettings) -> Result<()> {
    match s.objective {
        Some(ObjectiveArg::Full) => cfg.fit.kind = ObjectiveKind::FullLikelihood,
        Some(ObjectiveArg::Composite) => {
            let v = match (s.v, cfg.fit.kind) {
                (Some(v), _) => v,
                (None, ObjectiveKind::CompositeLikelihood { v }) => v,
                (None, ObjectiveKind::FullLikelihood) => {
                    return Err(Error::input("the composite objective needs the neighbor count --v"))
                }
            };
            cfg.fit.kind = ObjectiveKind::CompositeLikelihood { v };
        }
        None => {
            if let (Some(v), ObjectiveKind::CompositeLikelihood { .. }) = (s.v, cfg.fit.kind) {
                cfg.fit.kind = ObjectiveKind::CompositeLikelihood { v };
            }
        }
    }
    if let Some(m) = s.mean {
        cfg.fit.mean = match m {
            MeanArg::Zero => MeanModel::Zero,
            MeanArg::Constant => MeanModel::Constant,
        };
    }
    if let Some(nu) = s.nu {
        cfg.fit.nu = nu;
    }
    if let Some(m) = s.max_iter {
        cfg.fit.max_iter = m;
    }
    if let Some(t) = s.tol {
        cfg.fit.tol = t;
    }
    if s.nugget {
        cfg.fit.estimate_nugget = true;
    }
    cfg.fit.validate()
}

/// The run document written next to simulated data.
#[derive(Debug, Serialize, Deserialize)]
pub struct SimulationManifest {
    pub seed: u64,
    pub n: usize,
    pub domain: Domain,
    pub params: MaternParams,
    pub files: Vec<PathBuf>,
}

fn cmd_simulate(mut cfg: RunConfig, a: SimulateArgs) -> Result<()> {
    if let Some(p) = &a.params {
        cfg.simulate.params = Some(load_params(p)?);
    } else if cfg.simulate.params.is_none() {
        if let Some(f) = &cfg.simulate.params_file {
            cfg.simulate.params = Some(load_params(f)?);
        }
    }
    let params = cfg
        .simulate
        .params
        .clone()
        .ok_or_else(|| Error::input("no parameters: use --params, a config with [simulate.params] or a preset"))?;
    params.validate()?;
    let n = a.n.or(cfg.simulate.n).ok_or_else(|| Error::input("sample size n is required"))?;
    let lower = a.lower.or(cfg.simulate.lower).unwrap_or_else(|| vec![0.0, 0.0]);
    let upper = a.upper.or(cfg.simulate.upper).unwrap_or_else(|| vec![1.0, 1.0]);
    let domain = Domain::new(lower, upper)?;
    let replicates = a.replicates.or(cfg.simulate.replicates).unwrap_or(1);
    if replicates == 0 {
        return Err(Error::input("replicates must be at least 1"));
    }
    let mut files = Vec::new();
    for r in 0..replicates {
        let seed = cfg.seed.wrapping_add(r as u64);
        let locs = sample_locations_uniform(n, &domain, seed)?;
        let data = FieldSimulator::new(&params, &locs, cfg.fit.ordering)?.draw(seed, 1)?;
        let file = if replicates == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("replicate_{r:03}.csv"))
        };
        if let Some(dir) = file.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        data.write_csv(&file)?;
        files.push(file);
    }
    log::info!("simulated {replicates} field(s) of n = {n}, p = {} with seed {}", params.p(), cfg.seed);
    let manifest = SimulationManifest {
        seed: cfg.seed,
        n,
        domain,
        params,
        files,
    };
    let path = a.manifest.unwrap_or_else(|| {
        if replicates == 1 {
            a.out.with_extension("json")
        } else {
            a.out.join("manifest.json")
        }
    });
    write_text(&path, &to_json(&manifest)?)
}

fn cmd_fit(mut cfg: RunConfig, a: FitArgs) -> Result<()> {
    apply_data(&mut cfg, &a.data);
    apply_fit(&mut cfg, &a.settings)?;
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    let data = cfg.dataset()?;
    let warm = a.warm.as_deref().map(load_params).transpose()?;
    let result = fit(&data, cfg.lambda, &cfg.fit, warm.as_ref()).map_err(|e| stage("fit", e))?;
    log::info!(
        "lambda {:e}: objective {:.6e} after {} iterations (converged: {})",
        result.lambda,
        result.objective(),
        result.iterations,
        result.converged
    );
    write_text(&a.out, &result.to_json()?)?;
    if let Some(p) = &a.params_out {
        write_text(p, &result.params.to_json()?)?;
    }
    Ok(())
}

fn stage(name: &str, e: Error) -> Error {
    match e {
        Error::FitFailed(m) => Error::FitFailed(format!("{name}: {m}")),
        other => other,
    }
}

fn cmd_path(mut cfg: RunConfig, a: PathArgs) -> Result<()> {
    apply_data(&mut cfg, &a.data);
    apply_fit(&mut cfg, &a.settings)?;
    if let Some(c) = a.count {
        cfg.path.count = Some(c);
    }
    if let Some(l) = &a.lambdas {
        cfg.path.lambdas = Some(l.clone());
    }
    if let Some(s) = a.subsamples {
        cfg.clic.subsamples = s;
    }
    if let Some(s) = a.pairs_per_subsample {
        cfg.clic.pairs_per_subsample = s;
    }
    if let Some(b) = a.h_budget {
        cfg.clic.h_budget = b;
    }
    if a.clic_reward {
        cfg.clic.sign = ClicSign::Reward;
    }
    cfg.clic.seed = cfg.seed;
    let data = cfg.dataset()?;
    let pc = PathConfig {
        fit: cfg.fit.clone(),
        count: cfg.path.count,
        lambdas: cfg.path.lambdas.clone(),
        clic: cfg.clic.clone(),
    };
    let path = solution_path(&data, &pc).map_err(|e| stage("path", e))?;
    if let Some(i) = path.selected {
        log::info!("selected lambda {:e} (entry {i})", path.entries[i].lambda);
    }
    write_text(&a.out, &path.to_json()?)?;
    path.write_csv(&a.csv)
}

/// Selection record written by `select`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub lambda: f64,
    pub criterion: f64,
    pub fit: FitResult,
}

fn cmd_select(a: SelectArgs) -> Result<()> {
    let text = fs::read_to_string(&a.path).map_err(|e| Error::io(&a.path, e))?;
    let path = PathResult::from_json(&text)?;
    let index = select_lambda(&path.criteria())?;
    let entry = &path.entries[index];
    let fit = entry.fit.clone().ok_or_else(|| Error::input("selected entry has no fit"))?;
    println!("selected lambda = {:e} (entry {index} of {})", entry.lambda, path.entries.len());
    let sel = Selection {
        index,
        lambda: entry.lambda,
        criterion: entry.criterion.unwrap_or(f64::NAN),
        fit,
    };
    if let Some(p) = &a.params_out {
        write_text(p, &sel.fit.params.to_json()?)?;
    }
    write_text(&a.out, &to_json(&sel)?)
}

/// `"100x100"` → `[100, 100]`.
pub fn parse_grid(spec: &str) -> Result<Vec<usize>> {
    spec.split(['x', 'X'])
        .map(|s| s.trim().parse::<usize>().map_err(|_| Error::input(format!("bad grid spec {spec:?}"))))
        .collect()
}

fn cmd_predict(mut cfg: RunConfig, a: PredictArgs) -> Result<()> {
    apply_data(&mut cfg, &a.data);
    let train = cfg.dataset()?;
    let params = load_params(&a.params)?;
    if params.p() != train.p() {
        return Err(Error::input(format!(
            "parameters have p = {} but the training data has p = {}",
            params.p(),
            train.p()
        )));
    }
    let pc = &mut cfg.predict;
    if let Some(m) = a.mode {
        pc.mode = match m {
            ModeArg::Simple => KrigingMode::Simple,
            ModeArg::Ordinary => KrigingMode::Ordinary,
        };
    }
    if let Some(k) = a.neighbors {
        pc.neighbors = k;
    }
    if let Some(p) = a.policy {
        pc.policy = match p {
            PolicyArg::All => ActivePolicy::All,
            PolicyArg::Sparse => ActivePolicy::SparsityReduced,
        };
    }
    if a.exact {
        pc.exact = true;
    }
    if let Some(g) = &a.grid {
        pc.grid = Some(parse_grid(g)?);
        pc.targets = None;
    }
    if let Some(t) = &a.targets {
        pc.targets = Some(t.clone());
        pc.grid = None;
    }
    if let Some(t) = &a.truth {
        pc.truth = Some(t.clone());
    }
    let coords: Vec<&str> = cfg.data.coords.iter().map(String::as_str).collect();
    let targets = match (&pc.grid, &pc.targets) {
        (Some(counts), _) => {
            let loc = train.locations();
            let lower = a.lower.clone().unwrap_or_else(|| loc.columns().into_iter().map(|c| c.fold(f64::INFINITY, |m, &v| m.min(v))).collect());
            let upper = a.upper.clone().unwrap_or_else(|| loc.columns().into_iter().map(|c| c.fold(f64::NEG_INFINITY, |m, &v| m.max(v))).collect());
            regular_grid(&Domain::new(lower, upper)?, counts)?
        }
        (None, Some(t)) => load_dataset(t, &CsvSchema::new(&coords, Some(&[])))?.locations().clone(),
        (None, None) => return Err(Error::input("no targets: give --grid or --targets")),
    };
    let request = PredictionRequest {
        targets,
        variables: Vec::new(),
        mode: pc.mode,
        neighborhood: if pc.neighbors == 0 { Neighborhood::All } else { Neighborhood::Nearest(pc.neighbors) },
        policy: pc.policy,
        exact: pc.exact,
    };
    let result = cokrige(&train, &params, &request)?;
    log::info!("predicted {} targets in {:.2} s", result.locations.nrows(), result.seconds);
    result.write_csv(&a.out, train.coord_names())?;
    if let Some(t) = &pc.truth {
        let names: Vec<&str> = train.names().iter().map(String::as_str).collect();
        let truth = load_dataset(t, &CsvSchema::new(&coords, Some(&names)))?;
        let summary = evaluate_predictions(&result, &truth)?;
        let mut table = Vec::new();
        summary.write_csv_to(&mut table).map_err(|e| Error::io("<memory>", e))?;
        let table = String::from_utf8(table).expect("ASCII table");
        print!("{table}");
        if let Some(s) = &a.summary {
            write_text(s, &table)?;
        }
    } else if a.summary.is_some() {
        return Err(Error::input("--summary needs --truth"));
    }
    Ok(())
}

fn variable_index(data: &SpatialDataset, key: &str) -> Result<usize> {
    if let Some(i) = data.names().iter().position(|n| n == key) {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if i < data.p() => Ok(i),
        _ => Err(Error::MissingColumn(key.to_string())),
    }
}

fn cmd_variogram(mut cfg: RunConfig, a: VariogramArgs) -> Result<()> {
    apply_data(&mut cfg, &a.data);
    let data = cfg.dataset()?;
    let i = variable_index(&data, &a.var1)?;
    let j = match &a.var2 {
        Some(k) => variable_index(&data, k)?,
        None => i,
    };
    if a.bins == 0 {
        return Err(Error::input("bins must be positive"));
    }
    let max = match a.max_dist {
        Some(m) => m,
        None => {
            let d = crate::spatial_data::pairwise_distances(data.locations());
            0.5 * d.iter().fold(0.0f64, |m, &v| m.max(v))
        }
    };
    let edges: Vec<f64> = (0..=a.bins).map(|b| max * b as f64 / a.bins as f64).collect();
    let est = empirical_cross_variogram(&data, i, j, &edges)?;
    let mut buf = Vec::new();
    est.write_csv(&mut buf).map_err(|e| Error::io(&a.out, e))?;
    write_text(&a.out, &String::from_utf8(buf).expect("ASCII"))
}

fn cmd_transform(mut cfg: RunConfig, a: TransformArgs) -> Result<()> {
    apply_data(&mut cfg, &a.data);
    let data = cfg.dataset()?;
    let mut scores = data.values().clone();
    for j in 0..data.p() {
        let (s, table) = normal_score_transform(data.column(j))?;
        scores.column_mut(j).assign(&s);
        if let Some(dir) = &a.tables {
            let mut buf = Vec::new();
            table.write_csv(&mut buf).map_err(|e| Error::io(dir, e))?;
            write_text(&dir.join(format!("{}.csv", data.names()[j])), &String::from_utf8(buf).expect("ASCII"))?;
        }
    }
    let out = data.with_values(scores)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    out.write_csv(&a.out)
}

/// Markdown report of a path: one row per `λ` and the selected model.
pub fn render_report(path: &PathResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Regularization path\n");
    let valid = path.entries.iter().filter(|e| e.fit.is_some()).count();
    if valid == 0 {
        let _ = writeln!(s, "No valid fits: every entry of the path failed.");
        return s;
    }
    let crit = match path.criterion {
        crate::selection::CriterionKind::Aic => "AIC",
        crate::selection::CriterionKind::Clic => "CLIC",
    };
    let _ = writeln!(s, "- criterion: {crit}");
    let _ = writeln!(s, "- lambda_max: {:e}", path.lambda_max);
    let _ = writeln!(s, "- entries: {} ({valid} fitted)", path.entries.len());
    let total: f64 = path.entries.iter().filter_map(|e| e.fit.as_ref()).map(|f| f.seconds).sum();
    let _ = writeln!(s, "- fitting time: {total:.2} s\n");
    let _ = writeln!(s, "| lambda | objective | {crit} | % zeros L | % zeros Psi | iterations | converged |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|");
    for (i, e) in path.entries.iter().enumerate() {
        let mark = if Some(i) == path.selected { " **selected**" } else { "" };
        match &e.fit {
            Some(f) => {
                let _ = writeln!(
                    s,
                    "| {:.4e}{mark} | {:.6e} | {} | {:.1} | {:.1} | {} | {} |",
                    e.lambda,
                    f.objective(),
                    e.criterion.map(|c| format!("{c:.6e}")).unwrap_or_else(|| "n/a".into()),
                    e.pct_zero_l,
                    e.pct_zero_psi,
                    f.iterations,
                    f.converged
                );
            }
            None => {
                let _ = writeln!(s, "| {:.4e} | failed: {} | | | | | |", e.lambda, e.error.as_deref().unwrap_or("unknown"));
            }
        }
    }
    if let Some(fit) = path.selected_fit() {
        let p = fit.params.p();
        let psi = fit.params.psi();
        let _ = writeln!(s, "\n## Selected model (lambda = {:e})\n", fit.lambda);
        let _ = writeln!(s, "Delta_B = {:.6}\n", fit.params.delta_b);
        let _ = writeln!(s, "Psi:\n");
        let _ = writeln!(s, "```");
        for i in 0..p {
            let row: Vec<String> = (0..p).map(|j| format!("{:>10.4}", psi[[i, j]])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        let _ = writeln!(s, "```");
    }
    s
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.path).map_err(|e| Error::io(&a.path, e))?;
    let path = PathResult::from_json(&text)?;
    write_text(&a.out, &render_report(&path))?;
    if let Some(c) = &a.csv {
        path.write_csv(c)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::illustrative_config;

    #[test]
    fn presets_parse() {
        let ill = RunConfig::preset("illustrative").unwrap();
        let reference = illustrative_config();
        let params = ill.simulate.params.unwrap();
        assert_eq!(params.p(), 5);
        assert_eq!(ill.simulate.n, Some(500));
        assert_eq!(params.delta_b, reference.params.delta_b);
        assert!(crate::linalg::frobenius_distance(&params.psi(), &reference.params.psi()) < 1e-12);
        let rep = RunConfig::preset("replication").unwrap();
        assert_eq!(rep.simulate.replicates, Some(10));
        assert!(RunConfig::preset("other").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::from_toml("schema_version = 2").is_err());
        assert!(RunConfig::from_toml("schema_version = 1\nbogus = 3").is_err());
        let c = RunConfig::from_toml("schema_version = 1\nseed = 7\n[fit]\nmax_iter = 3\nkind = { type = \"composite-likelihood\", v = 4 }").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.fit.max_iter, 3);
        assert_eq!(c.fit.kind, ObjectiveKind::CompositeLikelihood { v: 4 });
    }

    #[test]
    fn grid_specs() {
        assert_eq!(parse_grid("100x100").unwrap(), vec![100, 100]);
        assert!(parse_grid("10xa").is_err());
    }

    #[test]
    fn composite_needs_v() {
        let mut cfg = RunConfig::default();
        let s = FitSettings {
            objective: Some(ObjectiveArg::Composite),
            v: None,
            mean: None,
            nu: None,
            max_iter: None,
            tol: None,
            nugget: false,
        };
        assert_eq!(apply_fit(&mut cfg, &s).unwrap_err().exit_code(), 2);
        let s = FitSettings { v: Some(3), ..s };
        apply_fit(&mut cfg, &s).unwrap();
        assert_eq!(cfg.fit.kind, ObjectiveKind::CompositeLikelihood { v: 3 });
    }

    #[test]
    fn empty_report() {
        let path = PathResult {
            lambda_max: 1.0,
            criterion: crate::selection::CriterionKind::Aic,
            entries: Vec::new(),
            selected: None,
            marginals: Vec::new(),
            start: illustrative_config().params,
            seconds: 0.0,
        };
        assert!(render_report(&path).contains("No valid fits"));
        assert_eq!(render_report(&path), render_report(&path));
    }
}
