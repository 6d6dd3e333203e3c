//! Experiment configuration, validation and the runner behind the binary.
//!
//! One TOML file describes one experiment. Parsing collects every schema
//! error before any computation starts; the runner writes CSV tables and a
//! `report.json` whose header records the artifact version, a SHA-256 of the
//! configuration text and every tolerance in force.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use toml::{Table, Value as TomlValue};

use crate::dynamics::{evolve, PhasePoint};
use crate::error::{Error, Result};
use crate::generating::{check_periodicity, check_twist, FourierTerm, PotentialSpec, SequenceSpec};
use crate::green::{
    bundle_to_csv, check_theorem2_bounds, green_limit, invariance_check, w_increment_bound, LimitOptions, POSITIVITY_TOL, PSD_TOL,
};
use crate::jacobi::{
    coefficients_along_orbit, detect_conjugate_strict, detect_crossings_extended, first_conjugate_index, LagrangeFrame, CONJUGATE_TOL,
};
use crate::parallel::{with_threads, Execution};
use crate::rigidity::{nodes_to_csv, rigidity_verdict, RigidityOptions, TorusGrid, Verdict, CONSTANT_GRADIENT_TOL, DEFECT_TOL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INCONCLUSIVE: i32 = 2;

/// Default number of steps for initial conditions without `steps`.
pub const DEFAULT_STEPS: i64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Orbit,
    TwistCheck,
    ConjugateScan,
    GreenBundle,
    Rigidity,
}

impl Command {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "orbit" => Command::Orbit,
            "twist-check" => Command::TwistCheck,
            "conjugate-scan" => Command::ConjugateScan,
            "green-bundle" => Command::GreenBundle,
            "rigidity" => Command::Rigidity,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModeConfig {
    Periodic,
    CompactSupport { n_min: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialConfig {
    pub offset: f64,
    pub terms: Vec<FourierTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceConfig {
    #[serde(flatten)]
    pub mode: ModeConfig,
    pub potentials: Vec<PotentialConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HorizonConfig {
    pub initial: usize,
    pub max: usize,
    pub forward: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToleranceConfig {
    /// Cauchy tolerance of the backward limit.
    pub cauchy: f64,
    /// Largest excluded-node fraction for certified grid integrals.
    pub coverage: f64,
    /// Random samples per entry in `twist-check`.
    pub twist_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialCondition {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub n0: i64,
    pub steps: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub command: Command,
    pub dimension: usize,
    pub seed: u64,
    pub execution: Execution,
    pub sequence: SequenceConfig,
    pub grid_resolution: usize,
    pub horizons: HorizonConfig,
    pub tolerances: ToleranceConfig,
    pub initial_conditions: Vec<InitialCondition>,
}

impl ExperimentConfig {
    pub fn sequence_spec(&self) -> Result<SequenceSpec> {
        let potentials = self
            .sequence
            .potentials
            .iter()
            .map(|p| PotentialSpec::new(self.dimension, p.terms.clone(), p.offset))
            .collect::<Result<Vec<_>>>()?;
        match self.sequence.mode {
            ModeConfig::Periodic => SequenceSpec::fk_periodic(potentials),
            ModeConfig::CompactSupport { n_min } => SequenceSpec::fk_compact_support(n_min, potentials),
        }
    }

    pub fn limit_options(&self) -> LimitOptions {
        LimitOptions {
            tol: self.tolerances.cauchy,
            initial_horizon: self.horizons.initial,
            max_horizon: self.horizons.max,
        }
    }

    pub fn rigidity_options(&self) -> RigidityOptions {
        RigidityOptions {
            limit: self.limit_options(),
            forward: self.horizons.forward,
            coverage_bound: self.tolerances.coverage,
            execution: self.execution,
        }
    }
}

struct Schema {
    errors: Vec<String>,
}

fn type_name(v: &TomlValue) -> &'static str {
    v.type_str()
}

impl Schema {
    fn err(&mut self, path: &str, msg: impl std::fmt::Display) {
        self.errors.push(format!("{path}: {msg}"));
    }

    fn keys(&mut self, table: &Table, path: &str, allowed: &[&str]) {
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                self.err(&full, "unknown key");
            }
        }
    }

    fn int(&mut self, table: &Table, path: &str, key: &str) -> Option<i64> {
        match table.get(key)? {
            TomlValue::Integer(i) => Some(*i),
            other => {
                self.err(&join(path, key), format!("expected integer, found {}", type_name(other)));
                None
            }
        }
    }

    fn positive(&mut self, table: &Table, path: &str, key: &str) -> Option<usize> {
        let v = self.int(table, path, key)?;
        if v <= 0 {
            self.err(&join(path, key), format!("must be a positive integer, found {v}"));
            return None;
        }
        Some(v as usize)
    }

    fn float(&mut self, table: &Table, path: &str, key: &str) -> Option<f64> {
        self.float_value(table.get(key)?, &join(path, key))
    }

    fn float_value(&mut self, v: &TomlValue, path: &str) -> Option<f64> {
        match v {
            TomlValue::Float(f) if f.is_finite() => Some(*f),
            TomlValue::Float(_) => {
                self.err(path, "must be finite");
                None
            }
            TomlValue::Integer(i) => Some(*i as f64),
            other => {
                self.err(path, format!("expected number, found {}", type_name(other)));
                None
            }
        }
    }

    fn string<'a>(&mut self, table: &'a Table, path: &str, key: &str) -> Option<&'a str> {
        match table.get(key)? {
            TomlValue::String(s) => Some(s),
            other => {
                self.err(&join(path, key), format!("expected string, found {}", type_name(other)));
                None
            }
        }
    }

    fn table<'a>(&mut self, table: &'a Table, path: &str, key: &str) -> Option<&'a Table> {
        match table.get(key)? {
            TomlValue::Table(t) => Some(t),
            other => {
                self.err(&join(path, key), format!("expected table, found {}", type_name(other)));
                None
            }
        }
    }

    fn tables<'a>(&mut self, table: &'a Table, path: &str, key: &str) -> Option<Vec<&'a Table>> {
        let full = join(path, key);
        match table.get(key)? {
            TomlValue::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for (i, item) in items.iter().enumerate() {
                    match item {
                        TomlValue::Table(t) => out.push(t),
                        other => self.err(&format!("{full}[{i}]"), format!("expected table, found {}", type_name(other))),
                    }
                }
                Some(out)
            }
            other => {
                self.err(&full, format!("expected array of tables, found {}", type_name(other)));
                None
            }
        }
    }

    fn floats(&mut self, table: &Table, path: &str, key: &str) -> Option<Vec<f64>> {
        let full = join(path, key);
        match table.get(key)? {
            TomlValue::Array(items) => {
                let values: Vec<Option<f64>> = items
                    .iter()
                    .enumerate()
                    .map(|(i, v)| self.float_value(v, &format!("{full}[{i}]")))
                    .collect();
                values.into_iter().collect()
            }
            other => {
                self.err(&full, format!("expected array of numbers, found {}", type_name(other)));
                None
            }
        }
    }

    fn ints(&mut self, table: &Table, path: &str, key: &str) -> Option<Vec<i64>> {
        let full = join(path, key);
        match table.get(key)? {
            TomlValue::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for (i, v) in items.iter().enumerate() {
                    match v {
                        TomlValue::Integer(m) => out.push(*m),
                        other => {
                            self.err(&format!("{full}[{i}]"), format!("expected integer, found {}", type_name(other)));
                            return None;
                        }
                    }
                }
                Some(out)
            }
            other => {
                self.err(&full, format!("expected array of integers, found {}", type_name(other)));
                None
            }
        }
    }

    fn vector(&mut self, table: &Table, path: &str, key: &str, dim: usize) -> Option<Vec<f64>> {
        let v = self.floats(table, path, key)?;
        if v.len() != dim {
            self.err(&join(path, key), format!("expected {dim} components, found {}", v.len()));
            return None;
        }
        Some(v)
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

const TOP_KEYS: &[&str] = &[
    "command",
    "dimension",
    "seed",
    "execution",
    "sequence",
    "grid",
    "horizons",
    "tolerances",
    "initial_conditions",
];

/// Parses and validates a configuration, reporting all schema errors at once.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| Error::Schema(vec![format!("syntax: {}", e.message())]))?;
    let mut s = Schema { errors: Vec::new() };
    s.keys(&root, "", TOP_KEYS);

    let command = match s.string(&root, "", "command") {
        None => Command::Orbit,
        Some(name) => Command::parse(name).unwrap_or_else(|| {
            s.err(
                "command",
                format!("unknown command {name:?}; expected orbit, twist-check, conjugate-scan, green-bundle or rigidity"),
            );
            Command::Orbit
        }),
    };
    let dimension = if root.contains_key("dimension") {
        s.positive(&root, "", "dimension").unwrap_or(1)
    } else {
        1
    };
    let seed = match s.int(&root, "", "seed") {
        Some(v) if v < 0 => {
            s.err("seed", "must be non-negative");
            0
        }
        Some(v) => v as u64,
        None => 0,
    };
    let execution = match s.string(&root, "", "execution") {
        None | Some("parallel") => Execution::Parallel,
        Some("sequential") => Execution::Sequential,
        Some(other) => {
            s.err("execution", format!("expected \"parallel\" or \"sequential\", found {other:?}"));
            Execution::Parallel
        }
    };

    let sequence = parse_sequence(&mut s, &root, dimension);

    let grid_resolution = match s.table(&root, "", "grid") {
        Some(g) => {
            s.keys(g, "grid", &["resolution"]);
            if g.contains_key("resolution") {
                s.positive(g, "grid", "resolution").unwrap_or(1)
            } else {
                default_resolution(dimension)
            }
        }
        None => default_resolution(dimension),
    };

    let mut horizons = HorizonConfig {
        initial: 8,
        max: 1 << 12,
        forward: None,
    };
    if let Some(h) = s.table(&root, "", "horizons") {
        s.keys(h, "horizons", &["initial", "max", "forward"]);
        if h.contains_key("initial") {
            horizons.initial = s.positive(h, "horizons", "initial").unwrap_or(horizons.initial);
        }
        if h.contains_key("max") {
            horizons.max = s.positive(h, "horizons", "max").unwrap_or(horizons.max);
        }
        if h.contains_key("forward") {
            horizons.forward = s.positive(h, "horizons", "forward");
        }
    }
    if horizons.max > crate::dynamics::MAX_EVOLVE_HORIZON {
        s.err("horizons.max", format!("must not exceed {}", crate::dynamics::MAX_EVOLVE_HORIZON));
    }

    let mut tolerances = ToleranceConfig {
        cauchy: 1e-10,
        coverage: crate::rigidity::DEFAULT_COVERAGE_BOUND,
        twist_samples: 1000,
    };
    if let Some(t) = s.table(&root, "", "tolerances") {
        s.keys(t, "tolerances", &["cauchy", "coverage", "twist_samples"]);
        if let Some(v) = s.float(t, "tolerances", "cauchy") {
            if v > 0.0 {
                tolerances.cauchy = v;
            } else {
                s.err("tolerances.cauchy", "must be positive");
            }
        }
        if let Some(v) = s.float(t, "tolerances", "coverage") {
            if (0.0..=1.0).contains(&v) {
                tolerances.coverage = v;
            } else {
                s.err("tolerances.coverage", "must lie in [0, 1]");
            }
        }
        if t.contains_key("twist_samples") {
            tolerances.twist_samples = s.positive(t, "tolerances", "twist_samples").unwrap_or(1000);
        }
    }

    let initial_conditions = match s.tables(&root, "", "initial_conditions") {
        None => vec![InitialCondition {
            p: vec![0.0; dimension],
            q: vec![0.0; dimension],
            n0: 0,
            steps: DEFAULT_STEPS,
        }],
        Some(items) => items
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let path = format!("initial_conditions[{i}]");
                s.keys(t, &path, &["p", "q", "n0", "steps"]);
                let p = if t.contains_key("p") {
                    s.vector(t, &path, "p", dimension)
                } else {
                    s.err(&join(&path, "p"), "missing");
                    None
                };
                let q = if t.contains_key("q") {
                    s.vector(t, &path, "q", dimension)
                } else {
                    s.err(&join(&path, "q"), "missing");
                    None
                };
                let n0 = s.int(t, &path, "n0").unwrap_or(0);
                let steps = s.int(t, &path, "steps").unwrap_or(DEFAULT_STEPS);
                if steps.unsigned_abs() as usize > crate::dynamics::MAX_EVOLVE_HORIZON {
                    s.err(&join(&path, "steps"), "exceeds the evolution limit");
                }
                Some(InitialCondition { p: p?, q: q?, n0, steps })
            })
            .collect(),
    };

    if !s.errors.is_empty() {
        return Err(Error::Schema(s.errors));
    }
    let config = ExperimentConfig {
        command,
        dimension,
        seed,
        execution,
        sequence,
        grid_resolution,
        horizons,
        tolerances,
        initial_conditions,
    };
    config.sequence_spec().map_err(|e| Error::Schema(vec![format!("sequence: {e}")]))?;
    Ok(config)
}

fn default_resolution(dimension: usize) -> usize {
    if dimension == 1 {
        32
    } else {
        8
    }
}

fn parse_sequence(s: &mut Schema, root: &Table, dimension: usize) -> SequenceConfig {
    let default = SequenceConfig {
        mode: ModeConfig::Periodic,
        potentials: vec![PotentialConfig {
            offset: 0.0,
            terms: Vec::new(),
        }],
    };
    let Some(t) = s.table(root, "", "sequence") else {
        return default;
    };
    s.keys(t, "sequence", &["mode", "n_min", "potentials"]);
    let mode = match s.string(t, "sequence", "mode") {
        None | Some("periodic") => {
            if t.contains_key("n_min") {
                s.err("sequence.n_min", "only allowed with mode = \"compact_support\"");
            }
            ModeConfig::Periodic
        }
        Some("compact_support") => ModeConfig::CompactSupport {
            n_min: s.int(t, "sequence", "n_min").unwrap_or(0),
        },
        Some(other) => {
            s.err("sequence.mode", format!("expected \"periodic\" or \"compact_support\", found {other:?}"));
            ModeConfig::Periodic
        }
    };
    let potentials = match s.tables(t, "sequence", "potentials") {
        None => default.potentials,
        Some(items) => {
            if items.is_empty() {
                s.err("sequence.potentials", "must contain at least one potential");
            }
            items
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let path = format!("sequence.potentials[{i}]");
                    s.keys(p, &path, &["offset", "terms"]);
                    let offset = s.float(p, &path, "offset").unwrap_or(0.0);
                    let terms = s
                        .tables(p, &path, "terms")
                        .unwrap_or_default()
                        .iter()
                        .enumerate()
                        .filter_map(|(j, term)| {
                            let tp = format!("{path}.terms[{j}]");
                            s.keys(term, &tp, &["freq", "cos", "sin"]);
                            let freq = if term.contains_key("freq") {
                                s.ints(term, &tp, "freq")
                            } else {
                                s.err(&join(&tp, "freq"), "missing");
                                None
                            };
                            if let Some(f) = &freq {
                                if f.len() != dimension {
                                    s.err(&join(&tp, "freq"), format!("expected {dimension} components, found {}", f.len()));
                                }
                            }
                            Some(FourierTerm {
                                freq: freq?,
                                cos: s.float(term, &tp, "cos").unwrap_or(0.0),
                                sin: s.float(term, &tp, "sin").unwrap_or(0.0),
                            })
                        })
                        .collect();
                    PotentialConfig { offset, terms }
                })
                .collect()
        }
    };
    SequenceConfig { mode, potentials }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_horizon: Option<usize>,
    pub tol: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(h) = self.max_horizon {
            if h == 0 {
                return Err(Error::Schema(vec!["--max-horizon: must be positive".into()]));
            }
            config.horizons.max = h;
        }
        if let Some(tol) = self.tol {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(Error::Schema(vec!["--tol: must be positive".into()]));
            }
            config.tolerances.cauchy = tol;
        }
        Ok(())
    }
}

/// Files written by a run and its exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
    pub report: Value,
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn header(config: &ExperimentConfig, hash: &str) -> Value {
    json!({
        "artifact": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": hash,
        "config": config,
        "tolerances": {
            "cauchy": config.tolerances.cauchy,
            "coverage": config.tolerances.coverage,
            "positivity": POSITIVITY_TOL,
            "psd": PSD_TOL,
            "conjugate_sigma": CONJUGATE_TOL,
            "trace_defect": DEFECT_TOL,
            "constant_gradient": CONSTANT_GRADIENT_TOL,
            "twist": crate::generating::TWIST_TOL,
            "newton": crate::dynamics::NEWTON_TOL,
        },
    })
}

struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn write(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, body).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.files.push(path);
        Ok(())
    }
}

fn phase_point(ic: &InitialCondition) -> PhasePoint {
    PhasePoint::from_slices(&ic.p, &ic.q)
}

/// Runs one experiment, writing its outputs into `out_dir`.
pub fn run(config: &ExperimentConfig, config_text: &str, out_dir: &Path, threads: Option<usize>) -> Result<RunSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;
    let mut out = Output {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    let seq = config.sequence_spec()?;
    let (result, exit_code) = with_threads(threads, || execute(config, &seq, &mut out))??;
    let report = json!({
        "header": header(config, &config_hash(config_text)),
        "command": config.command,
        "result": result,
    });
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))? + "\n";
    out.write("report.json", &text)?;
    Ok(RunSummary {
        exit_code,
        files: out.files,
        report,
    })
}

fn execute(config: &ExperimentConfig, seq: &SequenceSpec, out: &mut Output) -> Result<(Value, i32)> {
    match config.command {
        Command::Orbit => run_orbit(config, seq, out),
        Command::TwistCheck => run_twist(config, seq, out),
        Command::ConjugateScan => run_conjugate(config, seq, out),
        Command::GreenBundle => run_green(config, seq, out),
        Command::Rigidity => run_rigidity(config, seq, out),
    }
}

fn run_orbit(config: &ExperimentConfig, seq: &SequenceSpec, out: &mut Output) -> Result<(Value, i32)> {
    let mut entries = Vec::new();
    for (i, ic) in config.initial_conditions.iter().enumerate() {
        let orbit = evolve(seq, &phase_point(ic), ic.n0, ic.n0 + ic.steps)
            .map_err(|e| e.context(format!("dynamics::evolve, initial condition {i}")))?;
        let residual = orbit.evolution_residuals(seq).into_iter().fold(0.0, f64::max);
        out.write(&format!("orbit_{i}.csv"), &orbit.to_csv(seq))?;
        entries.push(json!({
            "initial_condition": i,
            "first_index": orbit.first_index(),
            "last_index": orbit.last_index(),
            "max_step_residual": residual,
        }));
    }
    Ok((json!({ "orbits": entries }), EXIT_OK))
}

fn run_twist(config: &ExperimentConfig, seq: &SequenceSpec, out: &mut Output) -> Result<(Value, i32)> {
    let mut csv = String::from("entry,twist_ok,worst_margin,periodic\n");
    let mut entries = Vec::new();
    for (i, s) in seq.entries().iter().enumerate() {
        let seed = config.seed.wrapping_add(i as u64);
        let twist = check_twist(s.as_ref(), config.tolerances.twist_samples, seed);
        let periodic = check_periodicity(s.as_ref(), config.tolerances.twist_samples, seed);
        csv.push_str(&format!("{i},{},{:e},{periodic}\n", twist.ok, twist.worst_margin));
        entries.push(json!({
            "entry": i,
            "twist_ok": twist.ok,
            "worst_margin": twist.worst_margin,
            "periodic": periodic,
        }));
    }
    out.write("twist.csv", &csv)?;
    Ok((json!({ "entries": entries }), EXIT_OK))
}

fn run_conjugate(config: &ExperimentConfig, seq: &SequenceSpec, out: &mut Output) -> Result<(Value, i32)> {
    let mut entries = Vec::new();
    let mut csv = String::from("orbit_id,k,n,sigma_min,crossing_flag\n");
    for (i, ic) in config.initial_conditions.iter().enumerate() {
        let ctx = |op: &str| format!("jacobi::{op}, initial condition {i}");
        if ic.steps < 2 {
            return Err(Error::Invalid("conjugate-scan needs steps >= 2".into()).context(ctx("conjugate_scan")));
        }
        let orbit = evolve(seq, &phase_point(ic), ic.n0, ic.n0 + ic.steps).map_err(|e| e.context(ctx("evolve")))?;
        let coeffs = coefficients_along_orbit(seq, &orbit).map_err(|e| e.context(ctx("coefficients_along_orbit")))?;
        let k = ic.n0;
        let last = ic.n0 + ic.steps - 1;
        let strict = detect_conjugate_strict(&coeffs, k, last).map_err(|e| e.context(ctx("detect_conjugate_strict")))?;
        let extended = detect_crossings_extended(&coeffs, k, &LagrangeFrame::vertical(seq.dim()), last)
            .map_err(|e| e.context(ctx("detect_crossings_extended")))?;
        let first = first_conjugate_index(&coeffs, k, last).map_err(|e| e.context(ctx("first_conjugate_index")))?;
        for &(n, sigma) in &strict.profile {
            let crossings: usize = extended
                .crossings
                .iter()
                .filter(|c| c.interval.0 == n)
                .map(|c| c.multiplicity)
                .sum();
            csv.push_str(&format!("{i},{k},{n},{sigma:e},{crossings}\n"));
        }
        entries.push(json!({
            "initial_condition": i,
            "base": k,
            "last": last,
            "first_conjugate_index": first,
            "strict_conjugate": strict.conjugate,
            "crossings": extended.crossings,
            "degenerate_intervals": extended.degenerate,
        }));
    }
    out.write("conjugate.csv", &csv)?;
    Ok((json!({ "scans": entries }), EXIT_OK))
}

fn run_green(config: &ExperimentConfig, seq: &SequenceSpec, out: &mut Output) -> Result<(Value, i32)> {
    let mut entries = Vec::new();
    let mut exit = EXIT_OK;
    for (i, ic) in config.initial_conditions.iter().enumerate() {
        let ctx = |op: &str| format!("green::{op}, initial condition {i}");
        if ic.steps < 1 {
            return Err(Error::Invalid("green-bundle needs steps >= 1".into()).context(ctx("green_limit")));
        }
        let orbit = evolve(seq, &phase_point(ic), ic.n0, ic.n0 + ic.steps).map_err(|e| e.context(ctx("evolve")))?;
        match green_limit(seq, &orbit, config.limit_options()) {
            Ok(bundle) => {
                let bounds = check_theorem2_bounds(seq, &orbit, &bundle).map_err(|e| e.context(ctx("check_theorem2_bounds")))?;
                let increments = w_increment_bound(seq, &orbit, &bundle);
                let invariance = invariance_check(seq, &orbit, &bundle).map_err(|e| e.context(ctx("invariance_check")))?;
                out.write(&format!("bundle_{i}.csv"), &bundle_to_csv(&bundle))?;
                entries.push(json!({
                    "initial_condition": i,
                    "status": "converged",
                    "bounds_ok": bounds.iter().all(|b| b.ok),
                    "min_lower_margin": bounds.iter().map(|b| b.lower_margin).fold(f64::INFINITY, f64::min),
                    "min_upper_margin": bounds.iter().map(|b| b.upper_margin).fold(f64::INFINITY, f64::min),
                    "min_increment_eigenvalue": increments.iter().map(|r| r.min_eigenvalue).fold(f64::INFINITY, f64::min),
                    "equality_cases": increments.iter().filter(|r| r.equality).count(),
                    "increments": increments,
                    "invariance_max_residual": invariance.max_residual,
                }));
            }
            Err(Error::PositivityLost { base, index, min_eigenvalue }) => entries.push(json!({
                "initial_condition": i,
                "status": "positivity_lost",
                "base": if base == i64::MIN { Value::Null } else { json!(base) },
                "index": index,
                "min_eigenvalue": min_eigenvalue,
            })),
            Err(Error::LimitNotConverged { horizon, gap }) => {
                exit = EXIT_INCONCLUSIVE;
                entries.push(json!({
                    "initial_condition": i,
                    "status": "limit_not_converged",
                    "horizon": horizon,
                    "gap": if gap.is_finite() { json!(gap) } else { Value::Null },
                }));
            }
            Err(e) => return Err(e.context(ctx("green_limit"))),
        }
    }
    Ok((json!({ "bundles": entries }), exit))
}

fn run_rigidity(config: &ExperimentConfig, seq: &SequenceSpec, out: &mut Output) -> Result<(Value, i32)> {
    let grid = TorusGrid::new(config.dimension, config.grid_resolution).map_err(|e| e.context("rigidity::TorusGrid"))?;
    let report = rigidity_verdict(seq, &grid, &config.rigidity_options()).map_err(|e| e.context("rigidity::rigidity_verdict"))?;
    out.write("nodes.csv", &nodes_to_csv(&report))?;
    let exit = if report.verdict == Verdict::Inconclusive {
        EXIT_INCONCLUSIVE
    } else {
        EXIT_OK
    };
    let value = serde_json::to_value(&report).map_err(|e| Error::Io(e.to_string()))?;
    Ok((value, exit))
}

#[derive(Debug, Parser)]
#[command(name = "green-bundle", version, about = "Jacobi fields, conjugate points and Green bundles for twist-map sequences")]
pub struct Args {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for node-parallel work.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the maximal backward horizon.
    #[arg(long, value_name = "N")]
    pub max_horizon: Option<usize>,
    /// Overrides the Cauchy tolerance of the backward limit.
    #[arg(long, value_name = "X")]
    pub tol: Option<f64>,
}

/// Parses, runs and reports; returns the process exit code.
pub fn main_with_args(args: Args) -> i32 {
    match try_main(&args) {
        Ok(summary) => {
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            if let Some(verdict) = summary.report["result"]["verdict_text"].as_str() {
                println!("verdict: {verdict}");
            }
            summary.exit_code
        }
        Err(e) => {
            match e.root() {
                Error::Schema(list) => {
                    eprintln!("error: invalid configuration");
                    for item in list {
                        eprintln!("  {item}");
                    }
                }
                _ => eprintln!("error: {e}"),
            }
            EXIT_ERROR
        }
    }
}

fn try_main(args: &Args) -> Result<RunSummary> {
    let text = fs::read_to_string(&args.config).map_err(|e| Error::Io(format!("{}: {e}", args.config.display())))?;
    let mut config = parse_config(&text)?;
    Overrides {
        seed: args.seed,
        max_horizon: args.max_horizon,
        tol: args.tol,
    }
    .apply(&mut config)?;
    run(&config, &text, &args.out, args.threads)
}
