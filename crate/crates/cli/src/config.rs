//! Run configuration: per-experiment defaults overlaid with a JSON file and
//! command-line overrides.

use std::path::{Path, PathBuf};

use quadcal::adaptive::{GrowthKind, GrowthSchedule};
use quadcal::bayes::PriorBox;
use quadcal::genz::{GenzFamily, DEFAULT_MEASUREMENTS, DEFAULT_SHAPE_NORM, DEFAULT_SIGMA};
use quadcal::model::{TOY_LOWER, TOY_UPPER};
use quadcal::BasisFamily;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config field `experiment` is {found:?} but the command is {expected:?}")]
    ExperimentMismatch { expected: Experiment, found: Experiment },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Experiment {
    AnalyticBeta,
    Genz2d,
    Genz5d,
    GenzDim,
    Calibrate,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::AnalyticBeta => "analytic_beta",
            Self::Genz2d => "genz2d",
            Self::Genz5d => "genz5d",
            Self::GenzDim => "genz_dim",
            Self::Calibrate => "calibrate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Implicit rule built from prior samples, used through the likelihood ratio.
    PriorRule,
    TensorCc,
    Smolyak,
}

/// Which forward model the calibration run evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    /// A model compiled into the binary; only `toy` is available for calibration.
    Builtin(String),
    /// An external executable speaking the line-delimited JSON protocol.
    Subprocess {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
        #[serde(default = "default_retries")]
        retries: usize,
        /// Output dimension the executable must report in its handshake.
        #[serde(default)]
        output_dim: Option<usize>,
    },
}

fn default_timeout() -> f64 {
    300.0
}

fn default_retries() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSettings {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenzSettings {
    pub families: Vec<GenzFamily>,
    /// Dimension for genz2d / genz5d.
    pub dimension: usize,
    /// Dimensions swept by genz_dim; the first is the scaling reference.
    pub dimensions: Vec<usize>,
    pub shape_norm: f64,
    pub sigma: f64,
    pub measurements: usize,
    /// Point the measurements are generated at; all coordinates ½ if absent.
    pub truth: Option<Vec<f64>>,
    /// Prior samples of the Monte Carlo reference mean.
    pub oracle_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateSettings {
    /// Measurement locations on `[0, 2]` for the builtin model.
    pub locations: usize,
    pub sigma: f64,
    pub length_scale: f64,
    pub amplitude_range: (f64, f64),
    pub log_length_range: (f64, f64),
    pub grid: (usize, usize),
    pub include_logdet: bool,
    /// Measured data. When absent, data are synthesized from the model at
    /// `truth` with noise `sigma`.
    pub data: Option<Vec<f64>>,
    /// Location coordinates matching `data`; defaults to the builtin grid.
    pub data_locations: Option<Vec<f64>>,
    pub truth: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub schedule: GrowthSchedule,
    /// Samples per adaptive iteration (`K + 1`).
    pub sample_count: usize,
    /// analytic_beta sweeps these sample counts.
    pub sample_counts: Vec<usize>,
    pub max_iterations: usize,
    pub tolerance: Option<f64>,
    pub seed: u64,
    pub repeats: usize,
    pub family: BasisFamily,
    pub baselines: Vec<Baseline>,
    /// Largest budget at which the prior-rule baseline is still built.
    pub prior_rule_max_nodes: usize,
    /// Overrides the experiment's prior box.
    pub prior: Option<PriorBox<f64>>,
    pub model: ModelSpec,
    pub beta: BetaSettings,
    pub genz: GenzSettings,
    pub calibrate: CalibrateSettings,
    pub out: PathBuf,
    /// Worker threads; all available cores when absent.
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn default_for(experiment: Experiment) -> Self {
        let mut c = Self {
            experiment,
            schedule: GrowthSchedule::linear(),
            sample_count: 100_000,
            sample_counts: vec![],
            max_iterations: 20,
            tolerance: None,
            seed: 0,
            repeats: 25,
            family: BasisFamily::Chebyshev,
            baselines: vec![Baseline::PriorRule, Baseline::TensorCc, Baseline::Smolyak],
            prior_rule_max_nodes: 64,
            prior: None,
            model: ModelSpec::Builtin("toy".into()),
            beta: BetaSettings { alpha: 40.0, beta: 60.0 },
            genz: GenzSettings {
                families: GenzFamily::PARAMETERIZED.to_vec(),
                dimension: 5,
                dimensions: vec![2, 3, 4, 5, 6, 7, 8],
                shape_norm: DEFAULT_SHAPE_NORM,
                sigma: DEFAULT_SIGMA,
                measurements: DEFAULT_MEASUREMENTS,
                truth: None,
                oracle_samples: 1_000_000,
            },
            calibrate: CalibrateSettings {
                locations: 20,
                sigma: 0.01,
                length_scale: 0.01,
                amplitude_range: (0.0, 0.01),
                log_length_range: (0.0, 1.0),
                grid: (12, 12),
                include_logdet: false,
                data: None,
                data_locations: None,
                truth: None,
            },
            out: PathBuf::from("runs").join(experiment.name()),
            threads: None,
        };
        match experiment {
            Experiment::AnalyticBeta => {
                c.max_iterations = 30;
                c.repeats = 50;
                c.sample_counts = vec![100, 1_000, 10_000, 100_000];
            }
            Experiment::Genz2d => {
                c.genz.dimension = 2;
                c.genz.families = vec![
                    GenzFamily::CenteredProductPeak,
                    GenzFamily::CenteredC0,
                    GenzFamily::CenteredDiscontinuous,
                ];
            }
            Experiment::Genz5d => {
                c.schedule = GrowthSchedule::exponential();
                c.max_iterations = 7;
            }
            Experiment::GenzDim => {
                c.repeats = 100;
                c.sample_count = 10_000;
                c.genz.oracle_samples = 200_000;
            }
            Experiment::Calibrate => {
                c.schedule = GrowthSchedule {
                    kind: GrowthKind::Linear,
                    base: 0,
                    step: 20,
                    cap: Some(120),
                };
                c.max_iterations = 8;
                c.sample_count = 20_000;
                c.repeats = 1;
                c.baselines = vec![];
            }
        }
        c
    }

    /// Defaults for `experiment`, overlaid with the JSON object in `text`.
    /// Nested objects merge key by key; every other value replaces the default.
    pub fn from_json(experiment: Experiment, text: &str) -> Result<Self, ConfigError> {
        let overlay: Value = serde_json::from_str(text)?;
        if let Some(found) = overlay.get("experiment") {
            let found: Experiment = serde_json::from_value(found.clone())?;
            if found != experiment {
                return Err(ConfigError::ExperimentMismatch { expected: experiment, found });
            }
        }
        let mut base = serde_json::to_value(Self::default_for(experiment))?;
        merge(&mut base, overlay);
        let config: Self = serde_json::from_value(base)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(experiment: Experiment, path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => {
                let c = Self::default_for(experiment);
                c.validate()?;
                Ok(c)
            }
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_json(experiment, &text)
            }
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sample counts this run iterates over.
    pub fn sweep(&self) -> Vec<usize> {
        if self.experiment == Experiment::AnalyticBeta && !self.sample_counts.is_empty() {
            self.sample_counts.clone()
        } else {
            vec![self.sample_count]
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        self.schedule
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.sample_count == 0 || self.sample_counts.contains(&0) {
            return bad("sample counts must be positive");
        }
        if self.repeats == 0 {
            return bad("repeats must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if self.threads == Some(0) {
            return bad("threads must be positive");
        }
        let g = &self.genz;
        if g.measurements == 0 || !(g.sigma > 0.0) || !(g.shape_norm > 0.0) || g.oracle_samples == 0 {
            return bad("genz settings need measurements, sigma, shape_norm and oracle_samples > 0");
        }
        if g.dimension == 0 || g.dimensions.is_empty() || g.dimensions.contains(&0) {
            return bad("genz dimensions must be positive");
        }
        if g.families.is_empty() {
            return bad("genz.families is empty");
        }
        if matches!(self.experiment, Experiment::Genz2d | Experiment::Genz5d | Experiment::GenzDim) {
            let dims: Vec<usize> = if self.experiment == Experiment::GenzDim {
                g.dimensions.clone()
            } else {
                vec![g.dimension]
            };
            if let Some(t) = &g.truth {
                if dims.iter().any(|&d| d != t.len()) {
                    return bad("genz.truth length must match the dimension");
                }
            }
            let two_d = [
                GenzFamily::CenteredProductPeak,
                GenzFamily::CenteredC0,
                GenzFamily::CenteredDiscontinuous,
            ];
            if dims.contains(&1) && g.families.iter().any(|f| two_d.contains(f)) {
                return bad("the centered families need dimension >= 2");
            }
        }
        let c = &self.calibrate;
        if self.experiment == Experiment::Calibrate {
            if c.locations == 0 || !(c.sigma > 0.0) || !(c.length_scale > 0.0) {
                return bad("calibrate settings need locations, sigma and length_scale > 0");
            }
            if let (Some(d), Some(l)) = (&c.data, &c.data_locations) {
                if d.len() != l.len() {
                    return bad("calibrate.data and calibrate.data_locations differ in length");
                }
            }
            match &self.model {
                ModelSpec::Builtin(name) if name != "toy" => {
                    return Err(ConfigError::Invalid(format!("unknown builtin model `{name}`")));
                }
                ModelSpec::Subprocess { command, timeout_s, .. } => {
                    if command.is_empty() {
                        return bad("subprocess command is empty");
                    }
                    if !(*timeout_s > 0.0) {
                        return bad("subprocess timeout must be positive");
                    }
                    if c.data.is_none() && c.truth.is_none() {
                        return bad("a subprocess model needs calibrate.data or calibrate.truth");
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Prior box for the calibration run.
    pub fn calibration_prior(&self) -> PriorBox<f64> {
        self.prior
            .clone()
            .unwrap_or_else(|| PriorBox::new(TOY_LOWER.to_vec(), TOY_UPPER.to_vec()).expect("toy box is valid"))
    }
}

/// Overlays `overlay` onto `base` field by field. An object whose keys are
/// not all present in the base object (another enum variant, such as a
/// subprocess model replacing a builtin one) replaces it whole.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) if o.keys().all(|k| b.contains_key(k)) => {
            for (k, v) in o {
                let slot = b.get_mut(&k).expect("key checked above");
                if slot.is_object() && v.is_object() {
                    merge(slot, v);
                } else {
                    *slot = v;
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for e in [
            Experiment::AnalyticBeta,
            Experiment::Genz2d,
            Experiment::Genz5d,
            Experiment::GenzDim,
            Experiment::Calibrate,
        ] {
            let c = RunConfig::default_for(e);
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json(e, &c.to_json_pretty()).unwrap(), c);
        }
        assert_eq!(RunConfig::default_for(Experiment::Genz2d).repeats, 25);
        assert_eq!(RunConfig::default_for(Experiment::GenzDim).repeats, 100);
        assert_eq!(RunConfig::default_for(Experiment::AnalyticBeta).repeats, 50);
    }

    #[test]
    fn overlay_merges_nested_fields() {
        let c = RunConfig::from_json(
            Experiment::Genz5d,
            r#"{"repeats": 3, "genz": {"families": ["c0"]}, "schedule": {"cap": 33}}"#,
        )
        .unwrap();
        assert_eq!(c.repeats, 3);
        assert_eq!(c.genz.families, vec![GenzFamily::C0]);
        assert_eq!(c.genz.dimension, 5);
        assert_eq!(c.schedule.kind, GrowthKind::Exponential);
        assert_eq!(c.schedule.cap, Some(33));
    }

    #[test]
    fn overlay_replaces_enum_variants() {
        let c = RunConfig::from_json(
            Experiment::Calibrate,
            r#"{"model": {"subprocess": {"command": ["model", "--fast"], "output_dim": 20}},
                "calibrate": {"truth": [1, 1, 1, 1, 1, 1, 1]}}"#,
        )
        .unwrap();
        match c.model {
            ModelSpec::Subprocess { command, timeout_s, retries, output_dim } => {
                assert_eq!(command, vec!["model".to_string(), "--fast".into()]);
                assert_eq!((timeout_s, retries, output_dim), (300.0, 1, Some(20)));
            }
            other => panic!("expected a subprocess model, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(
            RunConfig::from_json(Experiment::Genz5d, r#"{"experiment": "genz2d"}"#),
            Err(ConfigError::ExperimentMismatch { .. })
        ));
        assert!(RunConfig::from_json(Experiment::Genz5d, r#"{"repeats": 0}"#).is_err());
        assert!(RunConfig::from_json(Experiment::Genz5d, r#"{"genz": {"truth": [0.5]}}"#).is_err());
        assert!(RunConfig::from_json(Experiment::Calibrate, r#"{"model": {"builtin": "nope"}}"#).is_err());
        assert!(RunConfig::from_json(
            Experiment::Calibrate,
            r#"{"model": {"subprocess": {"command": ["x"]}}}"#
        )
        .is_err());
        assert!(RunConfig::from_json(Experiment::Genz5d, "not json").is_err());
    }
}
