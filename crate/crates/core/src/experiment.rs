//! Config-driven experiment runs.
//!
//! A run is described by one JSON document:
//!
//! ```json
//! {
//!   "schemaVersion": 1,
//!   "subcommand": "aggregation-lb",
//!   "baseSeed": 42,
//!   "outputPath": "out/agg.csv",
//!   "format": "csv",
//!   "parameters": { "functions": [8, 16], "sample_sizes": [100, 400], "reps": 10000 }
//! }
//! ```
//!
//! Every run writes its result file plus `<outputPath>.manifest.json`, which
//! echoes the config, the library version and the seed. Output bytes depend
//! only on the config and the library version.

use std::path::{Path, PathBuf};

use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::aggregation_bounds;
use crate::core_model::{self, EvaluatedClass, FiniteSupportDistribution, Sample};
use crate::error::{Error, Result};
use crate::local_complexity::{self, ComplexityConfig};
use crate::model_selection;
use crate::rng;
use crate::schema::{ProblemDocument, SCHEMA_VERSION};
use crate::sparse_erm::{self, AuditParams, ProblemParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    SelectionOracle,
    AggregationLb,
    SparseAudit,
    ComplexityCurve,
}

impl Subcommand {
    pub const ALL: [Subcommand; 4] = [
        Subcommand::SelectionOracle,
        Subcommand::AggregationLb,
        Subcommand::SparseAudit,
        Subcommand::ComplexityCurve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::SelectionOracle => "selection-oracle",
            Subcommand::AggregationLb => "aggregation-lb",
            Subcommand::SparseAudit => "sparse-audit",
            Subcommand::ComplexityCurve => "complexity-curve",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// A config problem: the offending field (dotted path) and what is wrong.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn violation(field: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionParams {
    pub instances: u64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self { instances: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationParams {
    pub functions: Vec<usize>,
    pub sample_sizes: Vec<usize>,
    pub reps: u64,
}

impl Default for AggregationParams {
    fn default() -> Self {
        Self {
            functions: vec![8, 16, 32],
            sample_sizes: vec![100, 400, 1600],
            reps: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SparseParams {
    pub problem: ProblemParams,
    pub audit: AuditParams,
}

/// Where the complexity-curve class comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassSource {
    /// Uniform population over `points` support points with i.i.d. uniform
    /// `[0, 1]` function values.
    Random { functions: usize, points: usize },
    /// A problem document with a `class` block.
    Document { document: Value },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveParams {
    pub class: ClassSource,
    /// Draws to take when the class source carries no sample.
    pub sample_size: usize,
    pub config: ComplexityConfig,
}

impl Default for CurveParams {
    fn default() -> Self {
        Self {
            class: ClassSource::Random {
                functions: 6,
                points: 20,
            },
            sample_size: 12,
            config: ComplexityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Parameters {
    SelectionOracle(SelectionParams),
    AggregationLb(AggregationParams),
    SparseAudit(SparseParams),
    ComplexityCurve(CurveParams),
}

impl Parameters {
    pub fn subcommand(&self) -> Subcommand {
        match self {
            Parameters::SelectionOracle(_) => Subcommand::SelectionOracle,
            Parameters::AggregationLb(_) => Subcommand::AggregationLb,
            Parameters::SparseAudit(_) => Subcommand::SparseAudit,
            Parameters::ComplexityCurve(_) => Subcommand::ComplexityCurve,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub base_seed: u64,
    pub output_path: PathBuf,
    pub format: Format,
    pub parameters: Parameters,
    /// The document as given, echoed into the manifest.
    pub source: Value,
}

const TOP_LEVEL: [&str; 6] = ["schemaVersion", "subcommand", "baseSeed", "outputPath", "format", "parameters"];

/// Every violation in a config document. Never fails; an empty list means
/// [`run`] will accept it.
pub fn validate(value: &Value) -> Vec<Violation> {
    ExperimentConfig::from_value(value).err().unwrap_or_default()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, Vec<Violation>> {
        match serde_json::from_str::<Value>(text) {
            Ok(v) => Self::from_value(&v),
            Err(e) => Err(vec![violation("", format!("not valid JSON: {e}"))]),
        }
    }

    pub fn from_value(value: &Value) -> std::result::Result<Self, Vec<Violation>> {
        let Some(obj) = value.as_object() else {
            return Err(vec![violation("", "config must be a JSON object")]);
        };
        let mut out = Vec::new();
        for key in obj.keys().filter(|k| !TOP_LEVEL.contains(&k.as_str())) {
            out.push(violation(key.clone(), "unknown field"));
        }

        match obj.get("schemaVersion").map(Value::as_u64) {
            None => out.push(violation("schemaVersion", "required")),
            Some(Some(v)) if v == SCHEMA_VERSION as u64 => {}
            Some(_) => out.push(violation("schemaVersion", format!("must be {SCHEMA_VERSION}"))),
        }
        let base_seed = match obj.get("baseSeed").map(Value::as_u64) {
            None => {
                out.push(violation("baseSeed", "required"));
                None
            }
            Some(None) => {
                out.push(violation("baseSeed", "must be an unsigned 64-bit integer"));
                None
            }
            Some(seed) => seed,
        };
        let output_path = match obj.get("outputPath").map(Value::as_str) {
            None => {
                out.push(violation("outputPath", "required"));
                None
            }
            Some(Some(p)) if !p.is_empty() => Some(PathBuf::from(p)),
            Some(_) => {
                out.push(violation("outputPath", "must be a nonempty string"));
                None
            }
        };
        let format = match obj.get("format") {
            None => Some(Format::Csv),
            Some(f) => match serde_json::from_value(f.clone()) {
                Ok(f) => Some(f),
                Err(_) => {
                    out.push(violation("format", "must be \"csv\" or \"json\""));
                    None
                }
            },
        };
        let subcommand: Option<Subcommand> = match obj.get("subcommand") {
            None => {
                out.push(violation("subcommand", "required"));
                None
            }
            Some(s) => match serde_json::from_value(s.clone()) {
                Ok(s) => Some(s),
                Err(_) => {
                    let names: Vec<&str> = Subcommand::ALL.iter().map(|s| s.name()).collect();
                    out.push(violation("subcommand", format!("must be one of {}", names.join(", "))));
                    None
                }
            },
        };
        let raw = obj.get("parameters").cloned().unwrap_or_else(|| json!({}));
        let parameters = subcommand.and_then(|s| parse_parameters(s, raw, &mut out));

        match (base_seed, output_path, format, parameters) {
            (Some(base_seed), Some(output_path), Some(format), Some(parameters)) if out.is_empty() => Ok(Self {
                base_seed,
                output_path,
                format,
                parameters,
                source: value.clone(),
            }),
            _ => Err(out),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<std::result::Result<Self, Vec<Violation>>> {
        Ok(Self::from_json(&std::fs::read_to_string(path)?))
    }

    pub fn manifest_path(&self) -> PathBuf {
        sibling(&self.output_path, "manifest.json")
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn guard(out: &mut Vec<Violation>, r: Result<()>) {
    if let Err(e) = r {
        let field = match &e {
            Error::InvalidParameter { name, .. } => format!("parameters.{name}"),
            _ => "parameters".to_string(),
        };
        out.push(violation(field, e.to_string()));
    }
}

fn parse_parameters(sub: Subcommand, raw: Value, out: &mut Vec<Violation>) -> Option<Parameters> {
    fn typed<T: serde::de::DeserializeOwned>(raw: Value, out: &mut Vec<Violation>) -> Option<T> {
        serde_json::from_value(raw)
            .map_err(|e| out.push(violation("parameters", e.to_string())))
            .ok()
    }
    let before = out.len();
    let params = match sub {
        Subcommand::SelectionOracle => {
            let p: SelectionParams = typed(raw, out)?;
            if p.instances == 0 {
                out.push(violation("parameters.instances", "need at least one instance"));
            }
            Parameters::SelectionOracle(p)
        }
        Subcommand::AggregationLb => {
            let p: AggregationParams = typed(raw, out)?;
            if p.functions.is_empty() {
                out.push(violation("parameters.functions", "grid is empty"));
            }
            if p.sample_sizes.is_empty() {
                out.push(violation("parameters.sample_sizes", "grid is empty"));
            }
            if p.reps == 0 || p.reps > u32::MAX as u64 {
                out.push(violation("parameters.reps", "must lie in [1, 2^32)"));
            }
            if p.functions.len() * p.sample_sizes.len() > u32::MAX as usize {
                out.push(violation("parameters", "grid too large"));
            }
            for &big_n in &p.functions {
                for &n in &p.sample_sizes {
                    guard(out, aggregation_bounds::build_instance(big_n, n).map(drop));
                }
            }
            out.dedup();
            Parameters::AggregationLb(p)
        }
        Subcommand::SparseAudit => {
            let p: SparseParams = typed(raw, out)?;
            guard(out, p.problem.validate());
            guard(out, p.audit.validate(p.problem.atoms));
            Parameters::SparseAudit(p)
        }
        Subcommand::ComplexityCurve => {
            let p: CurveParams = typed(raw, out)?;
            guard(out, p.config.validate());
            guard(out, curve_inputs(&p, 0).map(drop));
            Parameters::ComplexityCurve(p)
        }
    };
    (out.len() == before).then_some(params)
}

/// Process exit statuses of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    ConfigError = 2,
    PartialFailure = 3,
    IoError = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    /// Status for a run aborted by `e`.
    pub fn of_error(e: &Error) -> Self {
        match e {
            Error::Io(_) => ExitStatus::IoError,
            Error::Csv(c) if c.is_io_error() => ExitStatus::IoError,
            Error::NotConverged { .. } => ExitStatus::PartialFailure,
            _ => ExitStatus::ConfigError,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
    /// Rows flagged as failed (solver non-convergence).
    pub failures: usize,
}

impl RunOutcome {
    pub fn status(&self) -> ExitStatus {
        if self.failures > 0 {
            ExitStatus::PartialFailure
        } else {
            ExitStatus::Success
        }
    }
}

/// Seed for one purpose within a run, kept clear of the low stream ids the
/// experiment modules use for replications.
fn derived_seed(base: u64, purpose: u64) -> u64 {
    rng::stream(base, u64::MAX - purpose).next_u64()
}

struct Artifact {
    path: PathBuf,
    bytes: Vec<u8>,
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Runs the experiment and writes its outputs and manifest.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    let (artifacts, failures) = match &config.parameters {
        Parameters::SelectionOracle(p) => run_selection(config, p)?,
        Parameters::AggregationLb(p) => run_aggregation(config, p)?,
        Parameters::SparseAudit(p) => run_sparse(config, p)?,
        Parameters::ComplexityCurve(p) => run_curve(config, p)?,
    };

    let names: Vec<String> = artifacts
        .iter()
        .map(|a| a.path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned()))
        .collect();
    let manifest = json!({
        "tool": "riskmin",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": config.parameters.subcommand().name(),
        "baseSeed": config.base_seed,
        "outputs": names,
        "failures": failures,
        "config": config.source,
    });
    let manifest_path = config.manifest_path();

    for a in &artifacts {
        if let Some(dir) = a.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&a.path, &a.bytes)?;
    }
    std::fs::write(&manifest_path, json_bytes(&manifest)?)?;
    Ok(RunOutcome {
        outputs: artifacts.into_iter().map(|a| a.path).collect(),
        manifest: manifest_path,
        failures,
    })
}

type Produced = (Vec<Artifact>, usize);

fn run_selection(config: &ExperimentConfig, p: &SelectionParams) -> Result<Produced> {
    let records = model_selection::audit_sweep(config.base_seed, p.instances)?;
    let summary = model_selection::summarize(&records);
    let artifacts = match config.format {
        Format::Csv => {
            let mut main = Vec::new();
            model_selection::write_audit_csv(&records, &mut main)?;
            let mut sum = Vec::new();
            {
                let mut w = csv::Writer::from_writer(&mut sum);
                w.write_record(["instances", "conditionsHold", "oracleHolds", "implicationFailures", "singleClassFailures"])?;
                w.write_record([
                    summary.instances.to_string(),
                    summary.conditions_hold.to_string(),
                    summary.oracle_holds.to_string(),
                    summary.implication_failures.to_string(),
                    summary.single_class_failures.to_string(),
                ])?;
                w.flush()?;
            }
            vec![
                Artifact {
                    path: config.output_path.clone(),
                    bytes: main,
                },
                Artifact {
                    path: sibling(&config.output_path, "summary.csv"),
                    bytes: sum,
                },
            ]
        }
        Format::Json => vec![Artifact {
            path: config.output_path.clone(),
            bytes: json_bytes(&json!({ "summary": summary, "records": records }))?,
        }],
    };
    Ok((artifacts, 0))
}

fn run_aggregation(config: &ExperimentConfig, p: &AggregationParams) -> Result<Produced> {
    let rows = aggregation_bounds::sweep(&p.functions, &p.sample_sizes, p.reps, config.base_seed)?;
    let bytes = match config.format {
        Format::Csv => {
            let mut b = Vec::new();
            aggregation_bounds::write_sweep_csv(&rows, &mut b)?;
            b
        }
        Format::Json => json_bytes(&rows)?,
    };
    Ok((
        vec![Artifact {
            path: config.output_path.clone(),
            bytes,
        }],
        0,
    ))
}

fn run_sparse(config: &ExperimentConfig, p: &SparseParams) -> Result<Produced> {
    let problem = sparse_erm::generate_problem(&p.problem, derived_seed(config.base_seed, 1))?;
    let audit = sparse_erm::sparsity_audit(&problem, &p.audit, derived_seed(config.base_seed, 2))?;
    let bytes = match config.format {
        Format::Csv => {
            let mut b = Vec::new();
            sparse_erm::write_sparsity_csv(&audit.rows, &mut b)?;
            b
        }
        Format::Json => json_bytes(&audit)?,
    };
    Ok((
        vec![Artifact {
            path: config.output_path.clone(),
            bytes,
        }],
        audit.failures(),
    ))
}

/// The class and sample a complexity-curve run operates on.
fn curve_inputs(p: &CurveParams, base_seed: u64) -> Result<(EvaluatedClass, Sample)> {
    match &p.class {
        ClassSource::Random { functions, points } => {
            if *functions == 0 || *points == 0 {
                return Err(crate::error::invalid("class", "need at least one function and one point"));
            }
            if p.sample_size == 0 {
                return Err(crate::error::invalid("sample_size", "need at least one draw"));
            }
            let mut r = rng::stream(derived_seed(base_seed, 3), 0);
            let population: Vec<Vec<f64>> = (0..*points)
                .map(|_| (0..*functions).map(|_| r.gen::<f64>()).collect())
                .collect();
            let dist = FiniteSupportDistribution::uniform(*points)?;
            let sample = core_model::draw_sample(&dist, p.sample_size, derived_seed(base_seed, 4))?;
            Ok((EvaluatedClass::from_population(population, &sample)?, sample))
        }
        ClassSource::Document { document } => {
            let doc = ProblemDocument::from_value(document.clone())?;
            let dist = doc.distribution()?;
            let sample = match &doc.sample {
                Some(s) => s.clone(),
                None if p.sample_size > 0 => core_model::draw_sample(&dist, p.sample_size, derived_seed(base_seed, 4))?,
                None => return Err(crate::error::invalid("sample_size", "document has no sample; need at least one draw")),
            };
            let Some(block) = &doc.class else {
                return Err(crate::error::invalid("class", "document has no class block"));
            };
            Ok((EvaluatedClass::from_population(block.population.clone(), &sample)?, sample))
        }
    }
}

fn run_curve(config: &ExperimentConfig, p: &CurveParams) -> Result<Produced> {
    let (class, sample) = curve_inputs(p, config.base_seed)?;
    let bound = local_complexity::excess_risk_bound_detailed(&class, &sample, &p.config, derived_seed(config.base_seed, 5))?;
    let bytes = match config.format {
        Format::Csv => {
            let mut b = Vec::new();
            bound.curve.write_csv(&mut b)?;
            b
        }
        Format::Json => json_bytes(&bound)?,
    };
    Ok((
        vec![Artifact {
            path: config.output_path.clone(),
            bytes,
        }],
        0,
    ))
}
