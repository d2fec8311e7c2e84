//! Scenario configuration: a flat key=value text format, eager validation
//! against the model and filter catalogs, and a canonical serialization
//! whose SHA-256 digest serves as the run's provenance hash.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::filter::FpfForm;
use crate::gain::GainMethod;
use crate::models::{make_builtin_model, ModelError, ScalarDiffusionModel};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected key=value (got {text:?})")]
    BadLine { line: usize, text: String },
    #[error("line {line}: duplicate key {key}")]
    DuplicateKey { line: usize, key: String },
    #[error("missing required key {0}")]
    MissingKey(&'static str),
    #[error("key {key}: {message}")]
    BadValue { key: String, message: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("key {key} applies only to {applies}")]
    Inapplicable {
        key: &'static str,
        applies: &'static str,
    },
    #[error("dt must not exceed horizon ({dt} > {horizon})")]
    DtExceedsHorizon { dt: f64, horizon: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which estimator a scenario runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Fpf,
    Bootstrap,
    Kalman,
    KsOracle,
}

impl FilterKind {
    /// Short tag used in file names and CSV columns.
    pub fn tag(self) -> &'static str {
        match self {
            FilterKind::Fpf => "fpf",
            FilterKind::Bootstrap => "bootstrap",
            FilterKind::Kalman => "kalman",
            FilterKind::KsOracle => "ks_oracle",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FilterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fpf" => Ok(FilterKind::Fpf),
            "bootstrap" => Ok(FilterKind::Bootstrap),
            "kalman" => Ok(FilterKind::Kalman),
            "ks_oracle" => Ok(FilterKind::KsOracle),
            other => Err(format!(
                "unknown filter `{other}` (expected fpf, bootstrap, kalman, or ks_oracle)"
            )),
        }
    }
}

/// A fully validated experiment description.
///
/// Built from text via [`ScenarioConfig::from_str_source`] or
/// [`ScenarioConfig::from_file`]; construction validates the model, the
/// filter/gain pairing, and the time grid, so a constructed config can run
/// without further checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub model_name: String,
    pub model_params: BTreeMap<String, f64>,
    pub filter: FilterKind,
    /// Required for the fpf filter, rejected otherwise.
    pub gain: Option<GainMethod>,
    /// Required for fpf and bootstrap, rejected otherwise.
    pub n_particles: Option<usize>,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub trials: usize,
    pub output_dir: Option<String>,
    pub form: FpfForm,
    pub resample_threshold: f64,
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::BadLine {
                line: idx + 1,
                text: line.to_string(),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::BadLine {
                line: idx + 1,
                text: line.to_string(),
            });
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(ConfigError::DuplicateKey { line: idx + 1, key });
        }
    }
    Ok(map)
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    let parsed: f64 = value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        message: format!("`{value}` is not a number"),
    })?;
    if !parsed.is_finite() {
        return Err(ConfigError::BadValue {
            key: key.to_string(),
            message: format!("`{value}` is not finite"),
        });
    }
    Ok(parsed)
}

fn parse_int<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        message: format!("`{value}` is not a valid integer for this key"),
    })
}

impl ScenarioConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_str_source(&text)
    }

    /// Parses and fully validates a config from key=value text. `#` starts
    /// a comment line; model parameters use dotted keys (`model.alpha=0.5`).
    pub fn from_str_source(text: &str) -> Result<Self, ConfigError> {
        let mut kv = parse_kv(text)?;
        let mut take = |key: &'static str| kv.remove(key);

        let model_name = take("model").ok_or(ConfigError::MissingKey("model"))?;
        let filter: FilterKind = {
            let raw = take("filter").ok_or(ConfigError::MissingKey("filter"))?;
            raw.parse().map_err(|message| ConfigError::BadValue {
                key: "filter".to_string(),
                message,
            })?
        };
        let dt = parse_f64("dt", &take("dt").ok_or(ConfigError::MissingKey("dt"))?)?;
        let horizon = parse_f64(
            "horizon",
            &take("horizon").ok_or(ConfigError::MissingKey("horizon"))?,
        )?;
        let seed: u64 = parse_int(
            "seed",
            &take("seed").ok_or(ConfigError::MissingKey("seed"))?,
        )?;

        let trials: usize = match take("trials") {
            Some(v) => parse_int("trials", &v)?,
            None => 1,
        };
        let n_particles: Option<usize> = match take("n_particles") {
            Some(v) => Some(parse_int("n_particles", &v)?),
            None => None,
        };
        let gain_raw = take("gain");
        let bandwidth = match take("bandwidth") {
            Some(v) => Some(parse_f64("bandwidth", &v)?),
            None => None,
        };
        let form_raw = take("form");
        let threshold_raw = take("resample_threshold");
        let output_dir = take("output_dir");

        let mut model_params = BTreeMap::new();
        let mut leftovers = Vec::new();
        for (key, value) in kv {
            if let Some(param) = key.strip_prefix("model.") {
                if param.is_empty() {
                    return Err(ConfigError::UnknownKey(key));
                }
                model_params.insert(param.to_string(), parse_f64(&key, &value)?);
            } else {
                leftovers.push(key);
            }
        }
        if let Some(key) = leftovers.into_iter().next() {
            return Err(ConfigError::UnknownKey(key));
        }

        // Validate the time grid exactly as the simulator will.
        if dt <= 0.0 {
            return Err(ConfigError::BadValue {
                key: "dt".to_string(),
                message: "must be positive".to_string(),
            });
        }
        if dt > horizon {
            return Err(ConfigError::DtExceedsHorizon { dt, horizon });
        }
        crate::sim::step_count(dt, horizon).map_err(|e| ConfigError::BadValue {
            key: "horizon".to_string(),
            message: e.to_string(),
        })?;
        if trials == 0 {
            return Err(ConfigError::BadValue {
                key: "trials".to_string(),
                message: "must be at least 1".to_string(),
            });
        }

        let model = make_builtin_model(&model_name, &model_params)?;

        let gain = match (filter, gain_raw) {
            (FilterKind::Fpf, Some(raw)) => {
                let method: GainMethod = raw.parse().map_err(|e: crate::gain::GainError| {
                    ConfigError::BadValue {
                        key: "gain".to_string(),
                        message: e.to_string(),
                    }
                })?;
                Some(method)
            }
            (FilterKind::Fpf, None) => return Err(ConfigError::MissingKey("gain")),
            (_, Some(_)) => {
                return Err(ConfigError::Inapplicable {
                    key: "gain",
                    applies: "filter=fpf",
                })
            }
            (_, None) => None,
        };

        let gain = match (gain, bandwidth) {
            (Some(GainMethod::Dns { .. }), Some(b)) => {
                if b <= 0.0 {
                    return Err(ConfigError::BadValue {
                        key: "bandwidth".to_string(),
                        message: "must be positive".to_string(),
                    });
                }
                Some(GainMethod::Dns { bandwidth: Some(b) })
            }
            (g, None) => g,
            (_, Some(_)) => {
                return Err(ConfigError::Inapplicable {
                    key: "bandwidth",
                    applies: "gain=dns",
                })
            }
        };

        let form = match (filter, form_raw) {
            (FilterKind::Fpf, Some(raw)) => {
                raw.parse().map_err(|message| ConfigError::BadValue {
                    key: "form".to_string(),
                    message,
                })?
            }
            (_, Some(_)) => {
                return Err(ConfigError::Inapplicable {
                    key: "form",
                    applies: "filter=fpf",
                })
            }
            (_, None) => FpfForm::default(),
        };

        let resample_threshold = match (filter, threshold_raw) {
            (FilterKind::Bootstrap, Some(raw)) => {
                let t = parse_f64("resample_threshold", &raw)?;
                if !(t > 0.0 && t <= 1.0) {
                    return Err(ConfigError::BadValue {
                        key: "resample_threshold".to_string(),
                        message: format!("{t} is outside (0, 1]"),
                    });
                }
                t
            }
            (_, Some(_)) => {
                return Err(ConfigError::Inapplicable {
                    key: "resample_threshold",
                    applies: "filter=bootstrap",
                })
            }
            (_, None) => 0.5,
        };

        match (filter, n_particles) {
            (FilterKind::Fpf | FilterKind::Bootstrap, None) => {
                return Err(ConfigError::MissingKey("n_particles"))
            }
            (FilterKind::Fpf | FilterKind::Bootstrap, Some(n)) if n < 2 => {
                return Err(ConfigError::BadValue {
                    key: "n_particles".to_string(),
                    message: "particle filters need at least 2 particles".to_string(),
                })
            }
            (FilterKind::Kalman | FilterKind::KsOracle, Some(_)) => {
                return Err(ConfigError::Inapplicable {
                    key: "n_particles",
                    applies: "filter=fpf or filter=bootstrap",
                })
            }
            _ => {}
        }

        validate_pairing(filter, gain, &model)?;

        Ok(ScenarioConfig {
            model_name,
            model_params,
            filter,
            gain,
            n_particles,
            dt,
            horizon,
            seed,
            trials,
            output_dir,
            form,
            resample_threshold,
        })
    }

    /// Rebuilds the validated model.
    pub fn model(&self) -> Result<ScalarDiffusionModel, ConfigError> {
        Ok(make_builtin_model(&self.model_name, &self.model_params)?)
    }

    /// Fixed-order text rendering of every field, with shortest round-trip
    /// decimals; two configs render identically iff they are equal.
    pub fn canonical_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("model={}\n", self.model_name));
        for (key, value) in &self.model_params {
            out.push_str(&format!("model.{key}={value}\n"));
        }
        out.push_str(&format!("filter={}\n", self.filter));
        if let Some(gain) = self.gain {
            out.push_str(&format!("gain={}\n", gain.tag()));
            if let GainMethod::Dns {
                bandwidth: Some(b),
            } = gain
            {
                out.push_str(&format!("bandwidth={b}\n"));
            }
        }
        if let Some(n) = self.n_particles {
            out.push_str(&format!("n_particles={n}\n"));
        }
        out.push_str(&format!("dt={}\n", self.dt));
        out.push_str(&format!("horizon={}\n", self.horizon));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("trials={}\n", self.trials));
        if self.filter == FilterKind::Fpf {
            out.push_str(&format!("form={}\n", self.form));
        }
        if self.filter == FilterKind::Bootstrap {
            out.push_str(&format!("resample_threshold={}\n", self.resample_threshold));
        }
        if let Some(dir) = &self.output_dir {
            out.push_str(&format!("output_dir={dir}\n"));
        }
        out
    }

    /// SHA-256 of the canonical rendering, lowercase hex.
    pub fn provenance_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

fn validate_pairing(
    filter: FilterKind,
    gain: Option<GainMethod>,
    model: &ScalarDiffusionModel,
) -> Result<(), ConfigError> {
    use crate::models::Geometry;
    let bad = |key: &str, message: String| ConfigError::BadValue {
        key: key.to_string(),
        message,
    };
    match filter {
        FilterKind::Kalman => {
            if model.linear_params().is_none() {
                return Err(bad(
                    "filter",
                    "kalman requires the linear model".to_string(),
                ));
            }
        }
        FilterKind::KsOracle => {
            if model.geometry() == Geometry::Circle {
                return Err(bad(
                    "filter",
                    "ks_oracle supports line-geometry models only".to_string(),
                ));
            }
        }
        FilterKind::Fpf => match gain.expect("fpf gain presence checked earlier") {
            GainMethod::ExactLinear => {
                if model.linear_params().is_none() {
                    return Err(bad(
                        "gain",
                        "exact_linear requires the linear model".to_string(),
                    ));
                }
            }
            GainMethod::Dns { .. } => {
                if model.geometry() == Geometry::Circle {
                    return Err(bad(
                        "gain",
                        "dns requires a line-geometry model".to_string(),
                    ));
                }
            }
            GainMethod::FourierCircle => {
                if model.geometry() != Geometry::Circle {
                    return Err(bad(
                        "gain",
                        "fourier_circle requires a circle-geometry model".to_string(),
                    ));
                }
            }
        },
        FilterKind::Bootstrap => {}
    }
    Ok(())
}
