//! Run configuration: a flat JSON object, patched by `--set key=value`
//! overrides, then checked key by key.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use gmix::experiments::StudyConfig;
use gmix::{Model, TestFunction, TimeGrid};
use serde::Serialize;
use serde_json::{Map, Value};

pub const KEYS: &[&str] = &[
    "model",
    "phi",
    "epsilon",
    "beta",
    "n_grid",
    "replicas",
    "dt",
    "delta",
    "T",
    "master_seed",
    "output_dir",
    "n",
    "observation_file",
    "tag",
    "oracle_particles",
    "oracle_seed",
    "oracle_cache",
    "slope_band",
];

#[derive(Debug)]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.reason)
    }
}

impl std::error::Error for ConfigError {}

fn err(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeBand {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: String,
    pub phi: String,
    pub epsilon: f64,
    pub beta: f64,
    pub n_grid: Vec<usize>,
    pub replicas: usize,
    pub dt: f64,
    pub delta: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Particle count of the `filter` subcommand.
    pub n: usize,
    pub observation_file: Option<PathBuf>,
    pub tag: Option<String>,
    pub oracle_particles: usize,
    pub oracle_seed: u64,
    pub oracle_cache: Option<PathBuf>,
    pub slope_band: Option<SlopeBand>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let study = StudyConfig::new(0.5, vec![50, 100, 200, 400, 800], 200, 0);
        RunConfig {
            model: study.model,
            phi: study.phi,
            epsilon: study.epsilon,
            beta: study.beta,
            n_grid: study.n_grid,
            replicas: study.replicas,
            dt: study.dt,
            delta: study.delta,
            horizon: study.horizon,
            master_seed: study.master_seed,
            output_dir: PathBuf::from("out"),
            n: 200,
            observation_file: None,
            tag: None,
            oracle_particles: study.oracle_particles,
            oracle_seed: study.oracle_seed,
            oracle_cache: None,
            slope_band: None,
        }
    }
}

pub fn load_file(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read config file {}: {e}", path.display()))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => anyhow::bail!("config file {} is not a JSON object", path.display()),
        Err(e) => anyhow::bail!("config file {} does not parse: {e}", path.display()),
    }
}

/// Applies `key=value`; dotted keys address nested objects, and values are
/// read as JSON when they parse, as plain strings otherwise.
pub fn apply_override(map: &mut Map<String, Value>, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| err(spec, "override must look like key=value"))?;
    let key = key.trim();
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut parts = key.split('.').peekable();
    let mut node = map;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(err(key, "empty path segment"));
        }
        if parts.peek().is_none() {
            node.insert(part.to_string(), value);
            return Ok(());
        }
        let child = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        node = child
            .as_object_mut()
            .ok_or_else(|| err(key, format!("`{part}` is not an object")))?;
    }
    Err(err(key, "empty key"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    v.as_f64().ok_or_else(|| err(key, format!("expected a number, got {v}")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64, ConfigError> {
    v.as_u64()
        .ok_or_else(|| err(key, format!("expected a non-negative integer, got {v}")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize, ConfigError> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_string(key: &str, v: &Value) -> Result<String, ConfigError> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| err(key, format!("expected a string, got {v}")))
}

impl RunConfig {
    pub fn from_map(map: &Map<String, Value>) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (key, v) in map {
            let k = key.as_str();
            match k {
                "model" => cfg.model = as_string(k, v)?,
                "phi" => cfg.phi = as_string(k, v)?,
                "epsilon" => cfg.epsilon = as_f64(k, v)?,
                "beta" => cfg.beta = as_f64(k, v)?,
                "n_grid" => {
                    cfg.n_grid = match v {
                        Value::Array(items) => items.iter().map(|x| as_usize(k, x)).collect::<Result<_, _>>()?,
                        scalar => vec![as_usize(k, scalar)?],
                    }
                }
                "replicas" => cfg.replicas = as_usize(k, v)?,
                "dt" => cfg.dt = as_f64(k, v)?,
                "delta" => cfg.delta = as_f64(k, v)?,
                "T" => cfg.horizon = as_f64(k, v)?,
                "master_seed" => cfg.master_seed = as_u64(k, v)?,
                "output_dir" => cfg.output_dir = as_string(k, v)?.into(),
                "n" => cfg.n = as_usize(k, v)?,
                "observation_file" => cfg.observation_file = Some(as_string(k, v)?.into()),
                "tag" => cfg.tag = Some(as_string(k, v)?),
                "oracle_particles" => cfg.oracle_particles = as_usize(k, v)?,
                "oracle_seed" => cfg.oracle_seed = as_u64(k, v)?,
                "oracle_cache" => cfg.oracle_cache = Some(as_string(k, v)?.into()),
                "slope_band" => cfg.slope_band = Some(slope_band(v)?),
                other => {
                    return Err(err(other, format!("unknown key (known keys: {})", KEYS.join(", "))));
                }
            }
        }
        cfg.check()?;
        Ok(cfg)
    }

    /// Per-key range checks shared by every subcommand.
    fn check(&self) -> Result<(), ConfigError> {
        Model::builtin(&self.model).map_err(|e| err("model", e.to_string()))?;
        TestFunction::from_name(&self.phi).map_err(|e| err("phi", e.to_string()))?;
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(err("epsilon", format!("{} is outside (0, 1]", self.epsilon)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(err("beta", format!("{} must be positive", self.beta)));
        }
        for (key, v) in [("dt", self.dt), ("delta", self.delta), ("T", self.horizon)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(err(key, format!("{v} must be positive")));
            }
        }
        if self.delta < 10.0 * self.dt * (1.0 - 1e-9) {
            return Err(err("dt", format!("{} must be at most delta / 10", self.dt)));
        }
        TimeGrid::new(self.dt, self.horizon, self.delta).map_err(|e| err("delta", e.to_string()))?;
        if self.n < 2 {
            return Err(err("n", format!("{} particles, need at least 2", self.n)));
        }
        if self.n_grid.iter().any(|&n| n < 2) {
            return Err(err("n_grid", "every particle count must be at least 2"));
        }
        if let Some(b) = &self.slope_band {
            if !(b.lo < b.hi) {
                return Err(err("slope_band", format!("lo = {} is not below hi = {}", b.lo, b.hi)));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.dt, self.horizon, self.delta).expect("checked in from_map")
    }

    pub fn study(&self) -> StudyConfig {
        StudyConfig {
            model: self.model.clone(),
            phi: self.phi.clone(),
            beta: self.beta,
            dt: self.dt,
            delta: self.delta,
            horizon: self.horizon,
            oracle_particles: self.oracle_particles,
            oracle_seed: self.oracle_seed,
            oracle_cache: Some(
                self.oracle_cache
                    .clone()
                    .unwrap_or_else(|| self.output_dir.join("oracle_cache")),
            ),
            slope_band: self.slope_band.as_ref().map(|b| (b.lo, b.hi)),
            ..StudyConfig::new(self.epsilon, self.n_grid.clone(), self.replicas, self.master_seed)
        }
    }

    pub fn validate_convergence(&self) -> Result<(), ConfigError> {
        if self.n_grid.len() < 4 {
            return Err(err("n_grid", format!("{} entries, a convergence study needs at least 4", self.n_grid.len())));
        }
        self.common_study_checks(50)
    }

    pub fn validate_clt(&self) -> Result<(), ConfigError> {
        if self.n_grid.len() < 2 {
            return Err(err("n_grid", format!("{} entries, a CLT study needs at least 2", self.n_grid.len())));
        }
        self.common_study_checks(20)
    }

    fn common_study_checks(&self, min_replicas: usize) -> Result<(), ConfigError> {
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(err("n_grid", "must be strictly increasing"));
        }
        if self.replicas < min_replicas {
            return Err(err("replicas", format!("{}, need at least {min_replicas}", self.replicas)));
        }
        Ok(())
    }
}

fn slope_band(v: &Value) -> Result<SlopeBand, ConfigError> {
    let key = "slope_band";
    match v {
        Value::Array(xs) if xs.len() == 2 => Ok(SlopeBand {
            lo: as_f64(key, &xs[0])?,
            hi: as_f64(key, &xs[1])?,
        }),
        Value::Object(m) => {
            for k in m.keys() {
                if k != "lo" && k != "hi" {
                    return Err(err(&format!("slope_band.{k}"), "unknown key (expected lo, hi)"));
                }
            }
            let get = |k: &str| {
                m.get(k)
                    .ok_or_else(|| err(&format!("slope_band.{k}"), "missing"))
                    .and_then(|x| as_f64(&format!("slope_band.{k}"), x))
            };
            Ok(SlopeBand {
                lo: get("lo")?,
                hi: get("hi")?,
            })
        }
        other => Err(err(key, format!("expected [lo, hi] or {{\"lo\": .., \"hi\": ..}}, got {other}"))),
    }
}
