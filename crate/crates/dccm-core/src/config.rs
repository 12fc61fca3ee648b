//! Run configuration: model selection by name with numeric overrides, plus
//! the full simulate-run document. Unknown keys are rejected everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::geodesic::GeodesicConfig;
use crate::model::{cstr, scalar_linear, CstrParams, PlantModel};
use crate::sim::ScenarioConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarLinearConfig {
    pub a: f64,
    pub b: f64,
    pub x_range: [f64; 2],
    pub u_range: [f64; 2],
}

/// Model selection by name plus optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub cstr: Option<CstrParams>,
    #[serde(default)]
    pub scalar_linear: Option<ScalarLinearConfig>,
}

impl ModelConfig {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            cstr: None,
            scalar_linear: None,
        }
    }

    pub fn build(&self) -> Result<PlantModel> {
        match self.name.as_str() {
            "cstr" => cstr(self.cstr.clone().unwrap_or_default()),
            "scalar_linear" => {
                let c = self.scalar_linear.clone().ok_or_else(|| {
                    Error::Config("scalar_linear model needs a scalar_linear section".into())
                })?;
                scalar_linear(c.a, c.b, c.x_range, c.u_range)
            }
            other => Err(Error::Config(format!(
                "unknown model '{other}' (available: cstr, scalar_linear)"
            ))),
        }
    }
}

/// The simulate-run document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub geodesic: GeodesicConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        // The scenario seed follows the global seed unless set explicitly.
        if cfg.scenario.seed == 0 {
            cfg.scenario.seed = cfg.seed;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cstr_config_builds_default_model() {
        let model = ModelConfig::named("cstr").build().unwrap();
        assert_eq!(model.n, 2);
        assert_eq!(model.m, 1);
        assert_eq!(model.ell, 1);
    }

    #[test]
    fn unknown_model_is_rejected() {
        assert!(ModelConfig::named("pendulum").build().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{
            "seed": 1,
            "model": {"name": "cstr"},
            "scenario": {
                "r_true": [1.0], "r_star_init": [1.0], "x0": [0.5, 0.5],
                "schedule": [[0.0, [0.939, 0.297]]],
                "bogus_key": true
            }
        }"#;
        let err = RunConfig::from_json(text).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn round_trip_and_seed_inheritance() {
        let text = r#"{
            "seed": 42,
            "model": {"name": "cstr"},
            "scenario": {
                "r_true": [1.0], "r_star_init": [3.0], "x0": [0.5, 0.5],
                "schedule": [[0.0, [0.939, 0.297]], [0.5, [0.945, 0.547]]],
                "learning": {"enabled": true, "activation_step": 10}
            }
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.scenario.seed, 42);
        assert_eq!(cfg.scenario.steps, 100);
        let reparsed = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(reparsed, cfg);
    }
}
