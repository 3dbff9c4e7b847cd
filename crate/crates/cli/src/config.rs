//! Experiment configuration: JSON file values, command-line overrides and
//! per-experiment defaults, resolved in that order of precedence.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use fisherflow::fr_gaussian::ExpectationMode;
use fisherflow::integrator::{OdeConfig, OdeMethod};
use fisherflow::quadrature::MAX_DEGREE;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigError {
    /// Dotted key path, empty for whole-file problems.
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error")?;
        if !self.key.is_empty() {
            write!(f, " at `{}`", self.key)?;
        }
        if let Some(l) = self.line {
            write!(f, " (line {l})")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl ConfigError {
    fn new(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            line: None,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    LinearEquivalence,
    GmmPrior,
    NonlinearRange,
    Logreg,
    Funnel,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::LinearEquivalence,
        Experiment::GmmPrior,
        Experiment::NonlinearRange,
        Experiment::Logreg,
        Experiment::Funnel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::LinearEquivalence => "linear-equivalence",
            Experiment::GmmPrior => "gmm-prior",
            Experiment::NonlinearRange => "nonlinear-range",
            Experiment::Logreg => "logreg",
            Experiment::Funnel => "funnel",
        }
    }

    fn fixed_dim(self) -> Option<usize> {
        match self {
            Experiment::LinearEquivalence | Experiment::GmmPrior | Experiment::NonlinearRange => Some(2),
            Experiment::Logreg | Experiment::Funnel => None,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
                let mut msg = format!("unknown experiment `{s}`");
                if let Some(best) = nearest(s, &names) {
                    msg.push_str(&format!("; did you mean `{best}`?"));
                }
                ConfigError::new("experiment", msg)
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSettings {
    pub method: OdeMethod,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    pub checkpoint_every: f64,
}

impl OdeSettings {
    pub fn to_ode_config(&self) -> OdeConfig {
        OdeConfig {
            method: self.method,
            step: self.step,
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            max_steps: self.max_steps,
            checkpoint_every: Some(self.checkpoint_every),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    /// Points per axis of the KL evaluation grid.
    pub resolution: usize,
    /// The grid covers `[−half_width, half_width]` on every axis.
    pub half_width: f64,
    /// Mahalanobis radius used by the mode-coverage check.
    pub coverage_radius: f64,
}

/// Fully resolved configuration. Field order is the echo order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub components: usize,
    pub gh_degree: usize,
    pub mc_count: usize,
    pub mode: ExpectationMode,
    pub ode: OdeSettings,
    pub horizon: f64,
    pub gamma: f64,
    pub dim: usize,
    pub data_count: usize,
    pub data_seed: u64,
    pub planar_maps: usize,
    pub shared_particles: usize,
    pub output_samples: usize,
    pub checkpoint_files: usize,
    pub grid: GridOptions,
    pub output_dir: String,
}

const TOP_KEYS: &[&str] = &[
    "experiment",
    "seed",
    "components",
    "gh_degree",
    "mc_count",
    "mode",
    "ode",
    "horizon",
    "gamma",
    "dim",
    "data_count",
    "data_seed",
    "planar_maps",
    "shared_particles",
    "output_samples",
    "checkpoint_files",
    "grid",
    "output_dir",
];
const ODE_KEYS: &[&str] = &["method", "step", "rel_tol", "abs_tol", "max_steps", "checkpoint_every"];
const GRID_KEYS: &[&str] = &["resolution", "half_width", "coverage_radius"];

/// Command-line values; `None` leaves the file or default value in place.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    pub output_dir: Option<String>,
    pub gh_degree: Option<usize>,
    pub components: Option<usize>,
    pub horizon: Option<f64>,
    pub dim: Option<usize>,
}

/// Resolved config plus a provenance note for every key.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub provenance: BTreeMap<String, String>,
}

impl Resolved {
    /// The config followed by one note per key: its source and, for
    /// defaults taken from the reference experiment setups, what they encode.
    pub fn echo(&self) -> Value {
        let mut out = Map::new();
        out.insert("config".into(), serde_json::to_value(&self.config).expect("config serializes"));
        out.insert(
            "provenance".into(),
            Value::Object(self.provenance.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect()),
        );
        Value::Object(out)
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }
}

/// SHA-256 of the canonical JSON of every field except `output_dir`.
pub fn config_hash(c: &ExperimentConfig) -> String {
    let mut v = serde_json::to_value(c).expect("config serializes");
    if let Value::Object(m) = &mut v {
        m.remove("output_dir");
    }
    let digest = Sha256::digest(v.to_string().as_bytes());
    format!("{digest:x}")
}

fn nearest<'a>(key: &str, candidates: &[&'a str]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (strsim::damerau_levenshtein(key, c), *c))
        .filter(|(d, c)| *d <= 3.max(c.len() / 3))
        .min_by_key(|(d, _)| *d)
        .map(|(_, c)| c)
}

fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn check_keys(obj: &Map<String, Value>, allowed: &[&str], prefix: &str, text: &str) -> Result<(), ConfigError> {
    for k in obj.keys() {
        if !allowed.contains(&k.as_str()) {
            let mut msg = format!("unknown key `{k}`");
            if let Some(best) = nearest(k, allowed) {
                msg.push_str(&format!("; did you mean `{prefix}{best}`?"));
            }
            return Err(ConfigError {
                key: format!("{prefix}{k}"),
                line: line_of(text, k),
                message: msg,
            });
        }
    }
    Ok(())
}

/// Parses the file text into a JSON object; blank text is an empty object.
pub fn parse_file(text: &str) -> Result<Map<String, Value>, ConfigError> {
    if text.trim().is_empty() {
        return Ok(Map::new());
    }
    let v: Value = serde_json::from_str(text).map_err(|e| ConfigError {
        key: String::new(),
        line: Some(e.line()),
        message: format!("invalid JSON: {e}"),
    })?;
    let Value::Object(obj) = v else {
        return Err(ConfigError {
            key: String::new(),
            line: Some(1),
            message: "top level must be a JSON object".into(),
        });
    };
    check_keys(&obj, TOP_KEYS, "", text)?;
    for (name, keys) in [("ode", ODE_KEYS), ("grid", GRID_KEYS)] {
        match obj.get(name) {
            None => {}
            Some(Value::Object(inner)) => check_keys(inner, keys, &format!("{name}."), text)?,
            Some(_) => {
                return Err(ConfigError {
                    key: name.into(),
                    line: line_of(text, name),
                    message: "expected an object".into(),
                })
            }
        }
    }
    Ok(obj)
}

/// File values, looked up by dotted key.
struct FileValues<'a> {
    obj: &'a Map<String, Value>,
    text: &'a str,
}

impl FileValues<'_> {
    fn raw(&self, key: &str) -> Option<&Value> {
        match key.split_once('.') {
            Some((outer, inner)) => self.obj.get(outer)?.get(inner),
            None => self.obj.get(key),
        }
    }

    fn get<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        serde_json::from_value(v.clone()).map(Some).map_err(|e| ConfigError {
            key: key.into(),
            line: line_of(self.text, key.rsplit('.').next().unwrap_or(key)),
            message: format!("invalid value {v}: {e}"),
        })
    }
}

/// Builds the resolved config field by field, recording provenance.
struct Builder<'a> {
    file: FileValues<'a>,
    provenance: BTreeMap<String, String>,
}

impl Builder<'_> {
    fn pick<T: serde::de::DeserializeOwned>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
        note: Option<&str>,
    ) -> Result<T, ConfigError> {
        if let Some(v) = flag {
            self.provenance.insert(key.into(), "flag".into());
            return Ok(v);
        }
        if let Some(v) = self.file.get(key)? {
            self.provenance.insert(key.into(), "file".into());
            return Ok(v);
        }
        let msg = match note {
            Some(n) => format!("default; reference experiment: {n}"),
            None => "default".into(),
        };
        self.provenance.insert(key.into(), msg);
        Ok(default)
    }
}

/// Resolves `flags > file > defaults` and validates every field.
pub fn resolve(text: &str, flags: &Overrides) -> Result<Resolved, ConfigError> {
    let obj = parse_file(text)?;
    let mut b = Builder {
        file: FileValues { obj: &obj, text },
        provenance: BTreeMap::new(),
    };
    let experiment: Experiment = match (flags.experiment, b.file.raw("experiment")) {
        (Some(e), _) => {
            b.provenance.insert("experiment".into(), "flag".into());
            e
        }
        (None, Some(Value::String(s))) => {
            b.provenance.insert("experiment".into(), "file".into());
            s.parse().map_err(|e: ConfigError| ConfigError {
                line: line_of(text, "experiment"),
                ..e
            })?
        }
        (None, Some(v)) => {
            return Err(ConfigError {
                key: "experiment".into(),
                line: line_of(text, "experiment"),
                message: format!("expected a string, got {v}"),
            })
        }
        (None, None) => {
            b.provenance.insert("experiment".into(), "default".into());
            Experiment::LinearEquivalence
        }
    };
    if let (Some(f), Some(Value::String(s))) = (flags.experiment, b.file.raw("experiment")) {
        if f.name() != s {
            return Err(ConfigError {
                key: "experiment".into(),
                line: line_of(text, "experiment"),
                message: format!("config file is for `{s}` but `{f}` was requested"),
            });
        }
    }
    use Experiment::*;

    let seed = b.pick("seed", flags.seed, 0u64, None)?;
    let dim_default = match experiment {
        Logreg => 50,
        Funnel => 30,
        _ => 2,
    };
    let dim_note = match experiment {
        Logreg => Some("logistic regression with n = 50 (and n = 100)"),
        Funnel => Some("funnel target in N = 30 dimensions"),
        _ => Some("two-dimensional state"),
    };
    let dim = b.pick("dim", flags.dim, dim_default, dim_note)?;
    let planar_maps = b.pick(
        "planar_maps",
        None,
        0usize,
        Some("0 runs the plain particle flow; the normalizing-flow variant uses 5 planar maps"),
    )?;
    let nf = planar_maps > 0 || experiment == Funnel;

    let (k_default, k_note) = match experiment {
        LinearEquivalence => (1, "single Gaussian"),
        GmmPrior if planar_maps > 0 => (5, "5-component base for the normalizing-flow variant"),
        GmmPrior => (20, "20-component mixture"),
        NonlinearRange if planar_maps > 0 => (5, "5-component base for the normalizing-flow variant"),
        NonlinearRange => (20, "20-component mixture compared against a single Gaussian"),
        Logreg => (5, "5-component mixture compared against a single Gaussian"),
        Funnel => (5, "5-component base"),
    };
    let components = b.pick("components", flags.components, k_default, Some(k_note))?;
    let gh_degree = b.pick(
        "gh_degree",
        flags.gh_degree,
        4usize,
        Some("Gauss-Hermite degree 4, 16 nodes per two-dimensional component"),
    )?;
    let mc_count = b.pick("mc_count", None, 10 * dim, None)?;
    let mode_default = match experiment {
        LinearEquivalence | Logreg => ExpectationMode::Analytic,
        _ => ExpectationMode::Stein,
    };
    let mode = b.pick("mode", None, mode_default, None)?;

    let (h_default, h_note) = match experiment {
        LinearEquivalence => (10.0, Some("pseudo-time horizon T = 10")),
        GmmPrior | NonlinearRange => (if nf { 4.0 } else { 10.0 }, None),
        Logreg => (10.0, None),
        Funnel => (1.0, None),
    };
    let horizon: f64 = b.pick("horizon", flags.horizon, h_default, h_note)?;
    let gamma = b.pick("gamma", None, 1.0f64, None)?;
    let data_count = b.pick("data_count", None, 500usize, Some("N = 500 synthetic observations"))?;
    let data_seed = b.pick("data_seed", None, 0u64, None)?;
    let shared_particles = b.pick(
        "shared_particles",
        None,
        10usize,
        Some("10 particles shared by both flows"),
    )?;
    let output_samples = b.pick(
        "output_samples",
        None,
        if experiment == Funnel { 4096 } else { 1000 },
        None,
    )?;
    let checkpoint_files = b.pick("checkpoint_files", None, 10usize, None)?;

    let (method, step, rel, abs, ckpt_count, ode_note) = match experiment {
        LinearEquivalence => (OdeMethod::Rk4, 1e-3, 1e-10, 1e-12, 20.0, Some("RK4 with step 1e-3")),
        GmmPrior | NonlinearRange if nf => (OdeMethod::Rk45, 1e-4, 1e-8, 1e-10, 20.0, None),
        GmmPrior | NonlinearRange => (OdeMethod::Rk4, 1e-2, 1e-6, 1e-9, 20.0, None),
        Logreg => (OdeMethod::Rk45, 1e-4, 1e-6, 1e-9, 100.0, Some("100 iterations")),
        Funnel => (OdeMethod::Rk45, 1e-4, 1e-6, 1e-9, 20.0, None),
    };
    let ode = OdeSettings {
        method: b.pick("ode.method", None, method, ode_note)?,
        step: b.pick("ode.step", None, step, ode_note)?,
        rel_tol: b.pick("ode.rel_tol", None, rel, None)?,
        abs_tol: b.pick("ode.abs_tol", None, abs, None)?,
        max_steps: b.pick("ode.max_steps", None, 10_000_000usize, None)?,
        checkpoint_every: b.pick(
            "ode.checkpoint_every",
            None,
            horizon / ckpt_count,
            if experiment == Logreg { ode_note } else { None },
        )?,
    };
    let grid = GridOptions {
        resolution: b.pick("grid.resolution", None, 500usize, Some("500 x 500 evaluation grid"))?,
        half_width: b.pick("grid.half_width", None, 15.0f64, None)?,
        coverage_radius: b.pick(
            "grid.coverage_radius",
            None,
            2.0f64,
            Some("reference modes counted as covered within Mahalanobis radius 2"),
        )?,
    };
    let output_dir = b.pick(
        "output_dir",
        flags.output_dir.clone(),
        format!("fisherflow-out/{}", experiment.name()),
        None,
    )?;

    let config = ExperimentConfig {
        experiment,
        seed,
        components,
        gh_degree,
        mc_count,
        mode,
        ode,
        horizon,
        gamma,
        dim,
        data_count,
        data_seed,
        planar_maps,
        shared_particles,
        output_samples,
        checkpoint_files,
        grid,
        output_dir,
    };
    validate(&config).map_err(|mut e| {
        e.line = line_of(text, e.key.rsplit('.').next().unwrap_or(&e.key));
        e
    })?;
    Ok(Resolved {
        config,
        provenance: b.provenance,
    })
}

fn range_check<T: PartialOrd + fmt::Display>(key: &str, v: T, lo: T, hi: T) -> Result<(), ConfigError> {
    if v >= lo && v <= hi {
        Ok(())
    } else {
        Err(ConfigError::new(key, format!("{v} is outside {lo}..={hi}")))
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(key, format!("{v} must be finite and positive")))
    }
}

/// Range checks on a resolved config.
pub fn validate(c: &ExperimentConfig) -> Result<(), ConfigError> {
    range_check("components", c.components, 1, 1000)?;
    range_check("gh_degree", c.gh_degree, 1, MAX_DEGREE)?;
    range_check("mc_count", c.mc_count, 2, 10_000_000)?;
    positive("horizon", c.horizon)?;
    if !(c.gamma.is_finite() && c.gamma >= 0.0) {
        return Err(ConfigError::new("gamma", format!("{} must be finite and nonnegative", c.gamma)));
    }
    match c.experiment.fixed_dim() {
        Some(d) if c.dim != d => {
            return Err(ConfigError::new(
                "dim",
                format!("`{}` is a {d}-dimensional experiment, got {}", c.experiment, c.dim),
            ))
        }
        Some(_) => {}
        None if c.experiment == Experiment::Funnel => range_check("dim", c.dim, 2, 200)?,
        None => range_check("dim", c.dim, 1, 1000)?,
    }
    range_check("data_count", c.data_count, 1, 1_000_000)?;
    range_check("planar_maps", c.planar_maps, 0, 100)?;
    if c.planar_maps > 0 && !matches!(c.experiment, Experiment::GmmPrior | Experiment::NonlinearRange) {
        return Err(ConfigError::new(
            "planar_maps",
            format!("planar maps apply to gmm-prior and nonlinear-range, not `{}`", c.experiment),
        ));
    }
    if (c.planar_maps > 0 || c.experiment == Experiment::Funnel) && c.mode != ExpectationMode::Stein {
        return Err(ConfigError::new("mode", "the normalizing-flow variants need `stein` expectations"));
    }
    range_check("shared_particles", c.shared_particles, 1, 100_000)?;
    range_check("output_samples", c.output_samples, 1, 10_000_000)?;
    range_check("checkpoint_files", c.checkpoint_files, 0, 100_000)?;
    positive("ode.step", c.ode.step)?;
    positive("ode.rel_tol", c.ode.rel_tol)?;
    positive("ode.abs_tol", c.ode.abs_tol)?;
    range_check("ode.max_steps", c.ode.max_steps, 1, usize::MAX)?;
    positive("ode.checkpoint_every", c.ode.checkpoint_every)?;
    if c.ode.checkpoint_every > c.horizon {
        return Err(ConfigError::new(
            "ode.checkpoint_every",
            format!("{} exceeds the horizon {}", c.ode.checkpoint_every, c.horizon),
        ));
    }
    if c.horizon / c.ode.checkpoint_every > 100_000.0 {
        return Err(ConfigError::new("ode.checkpoint_every", "more than 100000 checkpoints"));
    }
    range_check("grid.resolution", c.grid.resolution, 2, 4000)?;
    positive("grid.half_width", c.grid.half_width)?;
    positive("grid.coverage_radius", c.grid.coverage_radius)?;
    if c.output_dir.is_empty() {
        return Err(ConfigError::new("output_dir", "must not be empty"));
    }
    Ok(())
}
