//! Scenario files, command implementations and CSV emission for `diqkd-lab`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use diqkd_core::architectures::{self, ArchError, Scenario};
use diqkd_core::bellcert::{self, BellFunctional, StateFamily};
use diqkd_core::keyproto::{self, SessionOutcome, SessionStatus};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}, column {column}: {message}")]
    Syntax {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown key \"{0}\"")]
    UnknownKey(String),
    #[error("key \"{key}\": {message}")]
    InvalidValue { key: String, message: String },
    #[error("scenario file must contain a single JSON object")]
    NotAnObject,
    #[error(transparent)]
    Architecture(#[from] ArchError),
    #[error(transparent)]
    Bell(#[from] bellcert::BellError),
    #[error(transparent)]
    Protocol(#[from] keyproto::ProtoError),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AxisScale {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub parameter: String,
    pub min: f64,
    pub max: f64,
    pub steps: usize,
    #[serde(default)]
    pub scale: AxisScale,
}

impl SweepAxis {
    pub fn points(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.min];
        }
        let last = (self.steps - 1) as f64;
        (0..self.steps)
            .map(|i| {
                let f = i as f64 / last;
                match self.scale {
                    AxisScale::Linear => self.min + (self.max - self.min) * f,
                    AxisScale::Log => (self.min.ln() + (self.max.ln() - self.min.ln()) * f).exp(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    MaximallyEntangled,
    PartiallyEntangled,
    Product,
}

impl Family {
    fn state_family(self) -> StateFamily {
        match self {
            Family::MaximallyEntangled => StateFamily::MaximallyEntangled,
            Family::PartiallyEntangled => StateFamily::PartiallyEntangled,
            Family::Product => StateFamily::Product,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdOptions {
    pub family: Family,
    pub optimize: bool,
}

pub const DEFAULT_ATTACK_ETAS: [f64; 6] = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5];
pub const DEFAULT_SESSION_ROUNDS: usize = 100_000;

/// A scenario plus per-command defaults, as stored in a JSON file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub sweep: Option<SweepAxis>,
    pub threshold: ThresholdOptions,
    pub attack_etas: Vec<f64>,
    pub session_rounds: usize,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        Self {
            scenario: Scenario::default(),
            seed: 0,
            output: None,
            sweep: None,
            threshold: ThresholdOptions::default(),
            attack_etas: DEFAULT_ATTACK_ETAS.to_vec(),
            session_rounds: DEFAULT_SESSION_ROUNDS,
        }
    }
}

fn scenario_keys() -> Vec<String> {
    match serde_json::to_value(Scenario::default()).expect("scenario serializes") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!("scenario is a struct"),
    }
}

fn invalid(key: &str, message: impl ToString) -> CliError {
    CliError::InvalidValue {
        key: key.to_string(),
        message: message.to_string(),
    }
}

fn field<T: serde::de::DeserializeOwned>(key: &str, v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| invalid(key, e))
}

/// Numeric scenario fields that a sweep axis may vary.
pub fn sweepable_parameters() -> Vec<String> {
    match serde_json::to_value(Scenario::default()).expect("scenario serializes") {
        Value::Object(m) => m
            .into_iter()
            .filter(|(k, v)| v.is_number() || k == "source_position")
            .map(|(k, _)| k)
            .collect(),
        _ => unreachable!("scenario is a struct"),
    }
}

/// Returns a copy of `s` with the named numeric field set to `value`.
pub fn with_parameter(s: &Scenario, name: &str, value: f64) -> Result<Scenario> {
    if !sweepable_parameters().iter().any(|p| p == name) {
        return Err(invalid(name, "not a numeric scenario parameter"));
    }
    let mut v = serde_json::to_value(s).expect("scenario serializes");
    v[name] = Value::from(value);
    field(name, v)
}

impl ScenarioFile {
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| CliError::Syntax {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let Value::Object(obj) = root else {
            return Err(CliError::NotAnObject);
        };
        Self::from_object(obj)
    }

    pub fn from_object(obj: Map<String, Value>) -> Result<Self> {
        let known = scenario_keys();
        let mut scenario_obj = Map::new();
        let mut out = ScenarioFile::default();
        for (key, value) in obj {
            if known.contains(&key) {
                scenario_obj.insert(key, value);
                continue;
            }
            match key.as_str() {
                "seed" => out.seed = field(&key, value)?,
                "output" => out.output = field(&key, value)?,
                "sweep" => out.sweep = field(&key, value)?,
                "threshold" => out.threshold = field(&key, value)?,
                "attack_etas" => out.attack_etas = field(&key, value)?,
                "session_rounds" => out.session_rounds = field(&key, value)?,
                _ => return Err(CliError::UnknownKey(key)),
            }
        }
        for (key, value) in &scenario_obj {
            // Per-key decoding so type errors name the key.
            let mut probe = serde_json::to_value(Scenario::default()).expect("scenario serializes");
            probe[key.as_str()] = value.clone();
            field::<Scenario>(key, probe)?;
        }
        out.scenario = field("scenario", Value::Object(scenario_obj))?;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if let Some(axis) = &self.sweep {
            let params = sweepable_parameters();
            if !params.contains(&axis.parameter) {
                return Err(invalid("sweep.parameter", format!("\"{}\" is not one of {}", axis.parameter, params.join(", "))));
            }
            if axis.steps == 0 {
                return Err(invalid("sweep.steps", "must be at least 1"));
            }
            if !(axis.min.is_finite() && axis.max.is_finite()) {
                return Err(invalid("sweep", "bounds must be finite"));
            }
            if axis.scale == AxisScale::Log && !(axis.min > 0.0 && axis.max > 0.0) {
                return Err(invalid("sweep", "log axis needs positive bounds"));
            }
            for v in axis.points() {
                with_parameter(&self.scenario, &axis.parameter, v)?.validate()?;
            }
        }
        if let Some(&eta) = self.attack_etas.iter().find(|&&e| !(e > 0.0 && e <= 1.0)) {
            return Err(invalid("attack_etas", format!("{eta} outside (0, 1]")));
        }
        if self.session_rounds == 0 {
            return Err(invalid("session_rounds", "must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let Value::Object(mut obj) = serde_json::to_value(&self.scenario).expect("scenario serializes") else {
            unreachable!("scenario is a struct")
        };
        obj.insert("seed".into(), Value::from(self.seed));
        if let Some(p) = &self.output {
            obj.insert("output".into(), serde_json::to_value(p).expect("path serializes"));
        }
        if let Some(axis) = &self.sweep {
            obj.insert("sweep".into(), serde_json::to_value(axis).expect("axis serializes"));
        }
        obj.insert("threshold".into(), serde_json::to_value(self.threshold).expect("options serialize"));
        obj.insert("attack_etas".into(), serde_json::to_value(&self.attack_etas).expect("floats serialize"));
        obj.insert("session_rounds".into(), Value::from(self.session_rounds));
        Value::Object(obj)
    }
}

pub fn parse_scenario(path: &Path) -> Result<ScenarioFile> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ScenarioFile::parse_str(&text, path)
}

/// Fixed-point with six decimals, scientific below 1e-3 in magnitude.
pub fn format_value(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.6e}")
    } else {
        format!("{v:.6}")
    }
}

fn row(values: &[f64]) -> String {
    values.iter().map(|&v| format_value(v)).collect::<Vec<_>>().join(",")
}

pub const SWEEP_HEADER: &str = "L_km,eta_t,herald_probability,chsh,qber,key_rate,bits_per_second";

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| CliError::Pool(e.to_string()))
}

/// One row per axis point, in axis order. Without an axis the scenario is
/// run once as given.
pub fn cmd_sweep(file: &ScenarioFile, jobs: Option<usize>) -> Result<String> {
    let scenarios = match &file.sweep {
        Some(axis) => axis
            .points()
            .into_iter()
            .map(|v| with_parameter(&file.scenario, &axis.parameter, v))
            .collect::<Result<Vec<_>>>()?,
        None => vec![file.scenario.clone()],
    };
    let rows = pool(jobs)?.install(|| {
        scenarios
            .par_iter()
            .map(|s| {
                let r = architectures::run(s)?;
                Ok(row(&[
                    s.l_total,
                    r.notes.eta_t,
                    r.herald_probability,
                    r.chsh,
                    r.qber,
                    r.key_rate,
                    architectures::secret_bits_per_second(s, &r),
                ]))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    Ok(out)
}

/// Critical efficiency for the configured family with the standard settings,
/// plus the optimized value over states and settings when requested.
pub fn cmd_threshold(file: &ScenarioFile) -> Result<String> {
    let chsh = BellFunctional::chsh();
    let family = file.threshold.family;
    let base = bellcert::critical_efficiency(&family.state_family(), &chsh, false)?;
    let mut out = String::new();
    writeln!(out, "family={}", family_name(family)).expect("string write");
    writeln!(out, "eta_critical={}", threshold_text(&base)).expect("string write");
    if file.threshold.optimize {
        let opt_family = match family {
            Family::MaximallyEntangled => StateFamily::PartiallyEntangled,
            other => other.state_family(),
        };
        let opt = bellcert::critical_efficiency(&opt_family, &chsh, true)?;
        writeln!(out, "eta_optimized={}", threshold_text(&opt)).expect("string write");
        if let Some(w) = &opt.witness {
            if let Some(theta) = w.state_angle {
                writeln!(out, "state_angle={theta:.6}").expect("string write");
            }
            let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.6}")).collect::<Vec<_>>().join(" ");
            writeln!(out, "alice_angles={}", fmt(&w.settings.alice)).expect("string write");
            writeln!(out, "bob_angles={}", fmt(&w.settings.bob)).expect("string write");
        }
    }
    Ok(out)
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::MaximallyEntangled => "maximally_entangled",
        Family::PartiallyEntangled => "partially_entangled",
        Family::Product => "product",
    }
}

fn threshold_text(r: &bellcert::EfficiencyThresholdResult) -> String {
    if r.witness.is_none() {
        "no violation".to_string()
    } else {
        format!("{:.6}", r.eta_critical)
    }
}

pub fn cmd_attack(etas: &[f64]) -> Result<String> {
    let mut out = String::from("eta,chsh\n");
    for &eta in etas {
        let a = bellcert::loophole_attack_strategy(eta)?;
        writeln!(out, "{}", row(&[eta, a.value])).expect("string write");
    }
    Ok(out)
}

pub fn key_digest(bits: &[bool]) -> String {
    let packed = keyproto::encode_bits(bits);
    Sha256::digest(&packed).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn session_report(out: &SessionOutcome) -> String {
    let mut s = String::new();
    match &out.status {
        SessionStatus::Key => writeln!(s, "status=key"),
        SessionStatus::Abort { stage, reason } => writeln!(s, "status=abort stage={} reason={reason}", stage.name()),
    }
    .expect("string write");
    let lines = [
        ("n_raw", out.n_raw.to_string()),
        ("chsh_estimate", format_value(out.estimated_s)),
        ("chsh_radius", format_value(out.s_radius)),
        ("qber_estimate", format_value(out.estimated_q)),
        ("qber_radius", format_value(out.q_radius)),
        ("key_rate", format_value(out.key_rate)),
        ("leakage_bits", out.leakage_bits.to_string()),
        ("key_bits", out.key_bits.len().to_string()),
        ("alice_key_sha256", key_digest(&out.key_bits)),
        ("bob_key_sha256", key_digest(&out.bob_key_bits)),
        ("messages", out.transcript.entries.len().to_string()),
    ];
    for (k, v) in lines {
        writeln!(s, "{k}={v}").expect("string write");
    }
    s
}

pub fn cmd_session(file: &ScenarioFile, seed: u64, jobs: Option<usize>) -> Result<SessionOutcome> {
    pool(jobs)?.install(|| Ok(keyproto::run_session(&file.scenario, file.session_rounds, seed)?))
}
