//! Command-line front end: `mine`, `simulate` and `validate`.
//!
//! Settings come from an optional flat `key = value` file; flags override it.
//! Failures print a single `error=<kind> reason=<text>` line on stderr and
//! exit with 2 (configuration), 3 (input data) or 4 (pipeline).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::contingency::build_table;
use crate::ingest::{
    apply_filters, parse_ontology, parse_reports_with, vaccine_universe, ColumnFilter, FilterPolicy,
    FilterSummary, Ontology, Report, TextFormat,
};
use crate::signal::{mine, write_heatmap, MineDiagnostics, PermutationPlan, Statistic};
use crate::sim::{aggregate, emit_sim_plots, run_study, ParamSource, SimScenario};
use crate::zinb::{FitConfig, ParamClamp};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_PIPELINE: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Config(String),
    Data(String),
    Pipeline(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Pipeline(_) => EXIT_PIPELINE,
        }
    }

    /// One line, `error=<kind> reason=<text>` with newlines flattened.
    pub fn line(&self) -> String {
        let (kind, reason) = match self {
            CliError::Config(r) => ("config", r),
            CliError::Data(r) => ("data", r),
            CliError::Pipeline(r) => ("pipeline", r),
        };
        format!("error={kind} reason={}", reason.replace(['\n', '\r'], " "))
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "aesignal", version, about = "Vaccine adverse-event signal mining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit, shrink, permute and write signal tables.
    Mine(MineArgs),
    /// Run the bias/MSE simulation study.
    Simulate(SimulateArgs),
    /// Ingest, filter and tabulate only; print the table shape.
    Validate(DataArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Flat key=value settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub reports: Option<PathBuf>,
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    /// Minimum reports per AE term.
    #[arg(long)]
    pub min_ae_count: Option<usize>,
    /// Minimum surviving terms per group.
    #[arg(long)]
    pub min_group_size: Option<usize>,
    /// Comma-separated vaccines to keep.
    #[arg(long)]
    pub vaccine_whitelist: Option<String>,
    /// `column=value` or `column:min:max`, applied while reading reports.
    #[arg(long = "filter")]
    pub filters: Vec<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct MineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub s_min: Option<f64>,
    /// `ALPHA,PHI,LNR_MIN,LNR_MAX` bounds on the unconstrained parameters.
    #[arg(long)]
    pub param_clamp: Option<String>,
    /// Projected-gradient ∞-norm at which a fit stops.
    #[arg(long)]
    pub grad_tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Also write the weighted contingency table.
    #[arg(long)]
    pub dump_table: bool,
    /// Also write both null distributions.
    #[arg(long)]
    pub dump_null: bool,
    /// Validate and print the resolved configuration without computing.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Comma-separated AE group sizes.
    #[arg(long)]
    pub group_sizes: Option<String>,
    #[arg(long)]
    pub vaccines: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub offset_mult: Option<f64>,
    /// `LO,HI` range for log-uniform offsets.
    #[arg(long)]
    pub offset_range: Option<String>,
    /// Generate with effectively infinite dispersion.
    #[arg(long)]
    pub zip: bool,
    /// Comma-separated zero probabilities per vaccine.
    #[arg(long)]
    pub p: Option<String>,
    /// Comma-separated count-part means per vaccine.
    #[arg(long)]
    pub mu: Option<String>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub dry_run: bool,
}

/// Parsed settings file.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    /// `key = value` per line; `#` starts a comment; keys may use `-` or `_`.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("config line {}: expected key=value", n + 1)))?;
            let key = k.trim().replace('-', "_");
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("config line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    fn take<T: FromStr>(&mut self, key: &str) -> CliResult<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Config(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    fn take_bool(&mut self, key: &str) -> CliResult<bool> {
        match self.entries.remove(key).as_deref() {
            None | Some("false") | Some("0") | Some("no") => Ok(false),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some(v) => Err(CliError::Config(format!("config key {key}: not a boolean {v:?}"))),
        }
    }

    fn finish(self) -> CliResult<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(CliError::Config(format!("unknown config key {k}"))),
        }
    }
}

fn pick<T: FromStr>(flag: Option<T>, file: &mut ConfigFile, key: &str) -> CliResult<Option<T>> {
    let from_file = file.take(key)?;
    Ok(flag.or(from_file))
}

fn parse_list<T: FromStr>(text: &str, what: &str) -> CliResult<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{what}: cannot parse {s:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct DataConfig {
    pub reports: PathBuf,
    pub ontology: PathBuf,
    pub filter_policy: FilterPolicy,
    pub column_filters: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub fit: FitConfig,
    pub permutations: PermutationPlan,
    pub alpha: f64,
    pub s_min: f64,
    pub dump_table: bool,
    pub dump_null: bool,
}

fn existing(path: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    let p = path.ok_or_else(|| CliError::Config(format!("missing --{what}")))?;
    if !p.is_file() {
        return Err(CliError::Config(format!("{what} path {} does not exist", p.display())));
    }
    Ok(p)
}

fn check_threads(threads: Option<usize>) -> CliResult<Option<usize>> {
    if threads == Some(0) {
        return Err(CliError::Config("threads must be >= 1".into()));
    }
    Ok(threads)
}

impl DataConfig {
    fn resolve(args: &DataArgs, file: &mut ConfigFile) -> CliResult<Self> {
        let reports = existing(pick(args.reports.clone(), file, "reports")?, "reports")?;
        let ontology = existing(pick(args.ontology.clone(), file, "ontology")?, "ontology")?;
        let defaults = FilterPolicy::default();
        let min_ae = pick(args.min_ae_count, file, "min_ae_count")?.unwrap_or(defaults.min_ae_frequency);
        let min_group = pick(args.min_group_size, file, "min_group_size")?.unwrap_or(defaults.min_group_size);
        let mut policy = FilterPolicy::thresholds(min_ae, min_group);
        if let Some(list) = pick(args.vaccine_whitelist.clone(), file, "vaccine_whitelist")? {
            let set: std::collections::BTreeSet<String> = list
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if set.is_empty() {
                return Err(CliError::Config("vaccine whitelist is empty".into()));
            }
            policy.vaccine_whitelist = Some(set);
        }
        let mut column_filters = args.filters.clone();
        if column_filters.is_empty() {
            if let Some(list) = file.take::<String>("filter")? {
                column_filters = list.split(';').map(|s| s.trim().to_string()).collect();
            }
        } else {
            file.take::<String>("filter")?;
        }
        for f in &column_filters {
            ColumnFilter::parse(f).map_err(|e| CliError::Config(format!("filter {f:?}: {e}")))?;
        }
        Ok(Self {
            reports,
            ontology,
            filter_policy: policy,
            column_filters,
        })
    }

    fn column_filters(&self) -> Vec<ColumnFilter> {
        self.column_filters
            .iter()
            .map(|f| ColumnFilter::parse(f).expect("validated at resolve time"))
            .collect()
    }
}

impl RunConfig {
    pub fn resolve(args: &MineArgs) -> CliResult<Self> {
        let mut file = ConfigFile::load(args.data.config.as_deref())?;
        let data = DataConfig::resolve(&args.data, &mut file)?;
        let out = pick(args.out.clone(), &mut file, "out")?
            .ok_or_else(|| CliError::Config("missing --out".into()))?;
        let seed = pick(args.seed, &mut file, "seed")?.unwrap_or(0);
        let threads = check_threads(pick(args.threads, &mut file, "threads")?)?;
        let n_permutations = pick(args.permutations, &mut file, "permutations")?
            .unwrap_or(PermutationPlan::default().n_permutations);
        if n_permutations == 0 {
            return Err(CliError::Config("permutations must be >= 1".into()));
        }
        let alpha = pick(args.alpha, &mut file, "alpha")?.unwrap_or(crate::signal::DEFAULT_ALPHA);
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(CliError::Config(format!("alpha {alpha} outside (0, 1]")));
        }
        let s_min = pick(args.s_min, &mut file, "s_min")?.unwrap_or(crate::signal::DEFAULT_S_MIN);
        if !(s_min.is_finite() && s_min >= 0.0) {
            return Err(CliError::Config(format!("s_min {s_min} must be finite and >= 0")));
        }
        let mut fit = FitConfig::default();
        if let Some(c) = pick(args.param_clamp.clone(), &mut file, "param_clamp")? {
            fit.clamp = ParamClamp::parse(&c).map_err(|e| CliError::Config(format!("param clamp: {e}")))?;
        }
        if let Some(tol) = pick(args.grad_tol, &mut file, "grad_tol")? {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(CliError::Config(format!("grad_tol {tol} must be positive")));
            }
            fit.grad_tol = tol;
        }
        if let Some(n) = pick(args.max_iters, &mut file, "max_iters")? {
            if n == 0 {
                return Err(CliError::Config("max_iters must be >= 1".into()));
            }
            fit.max_iters = n;
        }
        let dump_table = args.dump_table | file.take_bool("dump_table")?;
        let dump_null = args.dump_null | file.take_bool("dump_null")?;
        file.finish()?;
        Ok(Self {
            data,
            out,
            threads,
            fit,
            permutations: PermutationPlan {
                n_permutations,
                seed,
                statistic: Statistic::GroupMaxS,
            },
            alpha,
            s_min,
            dump_table,
            dump_null,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub scenario: SimScenario,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

impl SimConfig {
    pub fn resolve(args: &SimulateArgs) -> CliResult<Self> {
        let mut file = ConfigFile::load(args.config.as_deref())?;
        let mut sc = SimScenario::default();
        let out = pick(args.out.clone(), &mut file, "out")?
            .ok_or_else(|| CliError::Config("missing --out".into()))?;
        let threads = check_threads(pick(args.threads, &mut file, "threads")?)?;
        if let Some(name) = pick(args.scenario.clone(), &mut file, "scenario")? {
            sc.name = name;
        }
        sc.seed = pick(args.seed, &mut file, "seed")?.unwrap_or(0);
        if let Some(list) = pick(args.group_sizes.clone(), &mut file, "group_sizes")? {
            sc.group_sizes = parse_list(&list, "group sizes")?;
        }
        if let Some(v) = pick(args.vaccines, &mut file, "vaccines")? {
            sc.n_vaccines = v;
        }
        if let Some(v) = pick(args.reps, &mut file, "reps")? {
            sc.n_replications = v;
        }
        if let Some(v) = pick(args.offset_mult, &mut file, "offset_mult")? {
            sc.offset_multiplier = v;
        }
        if let Some(range) = pick(args.offset_range.clone(), &mut file, "offset_range")? {
            let v: Vec<f64> = parse_list(&range, "offset range")?;
            if v.len() != 2 {
                return Err(CliError::Config("offset range needs LO,HI".into()));
            }
            sc.offset_range = (v[0], v[1]);
        }
        sc.zip_mode = args.zip | file.take_bool("zip")?;
        let p = pick(args.p.clone(), &mut file, "p")?;
        let mu = pick(args.mu.clone(), &mut file, "mu")?;
        let r = pick(args.r, &mut file, "r")?;
        if p.is_some() || mu.is_some() || r.is_some() {
            let ParamSource::Explicit { p: p0, mu: mu0, r: r0 } = ParamSource::default() else {
                unreachable!()
            };
            sc.param_source = ParamSource::Explicit {
                p: p.map(|s| parse_list(&s, "p")).transpose()?.unwrap_or(p0),
                mu: mu.map(|s| parse_list(&s, "mu")).transpose()?.unwrap_or(mu0),
                r: r.unwrap_or(r0),
            };
        }
        file.finish()?;
        sc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self {
            scenario: sc,
            out,
            threads,
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Inputs after reading and filtering.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub reports: Vec<Report>,
    pub ontology: Ontology,
    pub summary: FilterSummary,
    pub n_reports_read: usize,
    pub digests: BTreeMap<String, String>,
}

pub fn load_data(cfg: &DataConfig) -> CliResult<LoadedData> {
    let report_bytes = read_input(&cfg.reports)?;
    let ontology_bytes = read_input(&cfg.ontology)?;
    let mut digests = BTreeMap::new();
    digests.insert("reports".to_string(), sha256_hex(&report_bytes));
    digests.insert("ontology".to_string(), sha256_hex(&ontology_bytes));

    let reports = parse_reports_with(report_bytes.as_slice(), TextFormat::default(), &cfg.column_filters())
        .map_err(|e| CliError::Data(format!("reports: {e}")))?;
    if reports.is_empty() {
        return Err(CliError::Data("reports file has no usable records".into()));
    }
    let ontology =
        parse_ontology(ontology_bytes.as_slice()).map_err(|e| CliError::Data(format!("ontology: {e}")))?;
    let n_reports_read = reports.len();
    let filtered = apply_filters(&reports, &ontology, &cfg.filter_policy);
    if filtered.reports.is_empty() {
        return Err(CliError::Data("no reports survive filtering".into()));
    }
    if filtered.ontology.is_empty() {
        return Err(CliError::Data("no AE groups survive filtering".into()));
    }
    Ok(LoadedData {
        reports: filtered.reports,
        ontology: filtered.ontology,
        summary: filtered.summary,
        n_reports_read,
        digests,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: C,
    pub input_digests: BTreeMap<String, String>,
    pub output_digests: BTreeMap<String, String>,
    pub diagnostics: serde_json::Value,
    /// Wall-clock milliseconds per stage; the only field that varies between
    /// identical runs.
    pub timings_ms: BTreeMap<String, f64>,
}

fn pool(threads: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

struct Outputs {
    dir: PathBuf,
    digests: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Pipeline(format!("create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            digests: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> CliResult<()> {
        let mut buf = Vec::new();
        fill(&mut buf).map_err(|e| CliError::Pipeline(format!("{name}: {e}")))?;
        self.digests.insert(name.to_string(), sha256_hex(&buf));
        let path = self.dir.join(name);
        fs::write(&path, &buf).map_err(|e| CliError::Pipeline(format!("write {}: {e}", path.display())))
    }

    fn manifest<C: Serialize>(&self, manifest: &RunManifest<C>) -> CliResult<()> {
        let text = serde_json::to_string_pretty(manifest).map_err(|e| CliError::Pipeline(e.to_string()))?;
        let path = self.dir.join("manifest.json");
        fs::write(&path, text + "\n").map_err(|e| CliError::Pipeline(format!("write {}: {e}", path.display())))
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone, Serialize)]
struct MineSummary {
    reports_read: usize,
    reports_analyzed: usize,
    vaccines: usize,
    aes: usize,
    groups: usize,
    flagged_groups: usize,
    flagged_aes: usize,
    filter: FilterSummary,
    fits: MineDiagnostics,
}

pub fn cmd_mine(cfg: &RunConfig) -> CliResult<()> {
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let data = load_data(&cfg.data)?;
    timings.insert("ingest_and_filter".to_string(), ms(t));
    if data.reports.len() < 2 {
        return Err(CliError::Data("need at least two reports after filtering".into()));
    }

    let t = Instant::now();
    let output = pool(cfg.threads)?
        .install(|| {
            mine(
                &data.reports,
                &data.ontology,
                &cfg.permutations,
                &cfg.fit,
                cfg.alpha,
                cfg.s_min,
            )
        })
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    timings.insert("fit_and_permute".to_string(), ms(t));
    if output.fits.is_empty() {
        return Err(CliError::Data("no AE group has cells with positive expected count".into()));
    }

    let t = Instant::now();
    let mut out = Outputs::new(&cfg.out)?;
    let signals = &output.signals;
    out.write("groups.csv", |b| signals.write_group_csv(b))?;
    out.write("aes.csv", |b| signals.write_ae_csv(b))?;
    let groups: Vec<String> = output.fits.iter().map(|f| f.name.clone()).collect();
    out.write("heatmap.csv", |b| {
        write_heatmap(b, output.analysis.table().vaccines(), &groups, &signals.group_rows)
    })?;
    if cfg.dump_table {
        out.write("table.csv", |b| output.analysis.table().write_csv(b))?;
    }
    if cfg.dump_null {
        out.write("null_group_max_s.txt", |b| output.group_null.write_values(b))?;
        out.write("null_ae_max_lambda.txt", |b| output.ae_null.write_values(b))?;
    }
    timings.insert("write".to_string(), ms(t));

    let table = output.analysis.table();
    let summary = MineSummary {
        reports_read: data.n_reports_read,
        reports_analyzed: output.analysis.n_reports(),
        vaccines: table.n_rows(),
        aes: table.n_cols(),
        groups: output.fits.len(),
        flagged_groups: signals.flagged_groups().count(),
        flagged_aes: signals.flagged_aes().count(),
        filter: data.summary.clone(),
        fits: output.diagnostics.clone(),
    };
    out.manifest(&RunManifest {
        tool: "aesignal",
        version: env!("CARGO_PKG_VERSION"),
        command: "mine",
        seed: cfg.permutations.seed,
        config: cfg,
        input_digests: data.digests,
        output_digests: out.digests.clone(),
        diagnostics: serde_json::to_value(&summary).map_err(|e| CliError::Pipeline(e.to_string()))?,
        timings_ms: timings,
    })
}

#[derive(Debug, Clone, Serialize)]
struct SimCellSummary {
    vaccine: usize,
    group_size: usize,
    s_mean_bias: f64,
    s_bias_se: f64,
    s_mse: f64,
    lambda_mean_bias: f64,
    lambda_mse: f64,
}

pub fn cmd_simulate(cfg: &SimConfig) -> CliResult<()> {
    let t = Instant::now();
    let report = pool(cfg.threads)?
        .install(|| run_study(&cfg.scenario))
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut timings = BTreeMap::new();
    timings.insert("study".to_string(), ms(t));

    let mut out = Outputs::new(&cfg.out)?;
    let mut group = Vec::new();
    let mut ae = Vec::new();
    emit_sim_plots(&report, &mut group, &mut ae).map_err(|e| CliError::Pipeline(e.to_string()))?;
    out.write("sim_group.csv", |b| {
        b.extend_from_slice(&group);
        Ok(())
    })?;
    out.write("sim_ae.csv", |b| {
        b.extend_from_slice(&ae);
        Ok(())
    })?;
    let cells: Vec<SimCellSummary> = report
        .cells
        .iter()
        .map(|c| {
            let s = c.s_summary();
            SimCellSummary {
                vaccine: c.vaccine,
                group_size: c.group_size,
                s_mean_bias: s.mean,
                s_bias_se: s.se,
                s_mse: s.mean_sq,
                lambda_mean_bias: aggregate(&c.lambda_bias).mean,
                lambda_mse: c.lambda_mse(),
            }
        })
        .collect();
    let diagnostics = serde_json::json!({
        "truth": report.truth,
        "fits": report.fits,
        "nonconverged": report.nonconverged,
        "cells": cells,
    });
    out.manifest(&RunManifest {
        tool: "aesignal",
        version: env!("CARGO_PKG_VERSION"),
        command: "simulate",
        seed: cfg.scenario.seed,
        config: cfg,
        input_digests: BTreeMap::new(),
        output_digests: out.digests.clone(),
        diagnostics,
        timings_ms: timings,
    })
}

/// Shape of the filtered data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationSummary {
    pub vaccines: usize,
    pub aes: usize,
    pub groups: usize,
    pub total_weight: f64,
    pub reports: usize,
    pub unmapped_terms: usize,
    pub unmapped_mentions: usize,
}

pub fn cmd_validate(cfg: &DataConfig) -> CliResult<ValidationSummary> {
    let data = load_data(cfg)?;
    let vaccines = vaccine_universe(&data.reports, None);
    let aes: Vec<String> = data.ontology.terms().map(str::to_string).collect();
    let table = build_table(&data.reports, &aes, &vaccines).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(ValidationSummary {
        vaccines: table.n_rows(),
        aes: table.n_cols(),
        groups: data.ontology.n_groups(),
        total_weight: table.cell_total(),
        reports: data.reports.len(),
        unmapped_terms: data.summary.unmapped_terms,
        unmapped_mentions: data.summary.unmapped_mentions,
    })
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Pipeline(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Mine(args) => {
            let cfg = RunConfig::resolve(&args)?;
            if args.dry_run {
                return print_json(&cfg);
            }
            cmd_mine(&cfg)
        }
        Command::Simulate(args) => {
            let cfg = SimConfig::resolve(&args)?;
            if args.dry_run {
                return print_json(&cfg);
            }
            cmd_simulate(&cfg)
        }
        Command::Validate(args) => {
            let mut file = ConfigFile::load(args.config.as_deref())?;
            let cfg = DataConfig::resolve(&args, &mut file)?;
            let s = cmd_validate(&cfg)?;
            println!("vaccines={}", s.vaccines);
            println!("aes={}", s.aes);
            println!("groups={}", s.groups);
            println!("total_weight={}", s.total_weight);
            println!("reports={}", s.reports);
            println!("unmapped_terms={}", s.unmapped_terms);
            println!("unmapped_mentions={}", s.unmapped_mentions);
            Ok(())
        }
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            if code == 0 {
                let _ = e.print();
            } else {
                eprintln!("{}", CliError::Config(e.kind().to_string()).line());
                let _ = e.print();
            }
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let mut f = ConfigFile::parse("# comment\nseed = 7\nmin-ae-count=3 # trailing\n\n").unwrap();
        assert_eq!(f.take::<u64>("seed").unwrap(), Some(7));
        assert_eq!(f.take::<usize>("min_ae_count").unwrap(), Some(3));
        assert!(f.finish().is_ok());
        assert!(ConfigFile::parse("seed").is_err());
        assert!(ConfigFile::parse("a=1\na=2").is_err());
        let f = ConfigFile::parse("bogus=1").unwrap();
        assert!(f.finish().is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let mut f = ConfigFile::parse("seed=1").unwrap();
        assert_eq!(pick(Some(9u64), &mut f, "seed").unwrap(), Some(9));
        assert!(f.finish().is_ok());
    }

    #[test]
    fn error_lines_are_single_line() {
        let e = CliError::Data("bad\nthing".into());
        assert_eq!(e.line(), "error=data reason=bad thing");
        assert_eq!(e.exit_code(), 3);
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Pipeline(String::new()).exit_code(), 4);
    }
}
