//! Experiment configuration: one strict JSON document.
//!
//! Every section and every field is optional; omitted values take the
//! defaults below. Unknown keys are rejected.
//!
//! | key | default |
//! |---|---|
//! | `world.n_frames` | 2000 |
//! | `world.n_test` | 200 |
//! | `world.objects_per_frame` | 6.0 |
//! | `world.site_fraction` | 0.2 |
//! | `world.classes` | car, pedestrian, cyclist (known); barrier, traffic_cone (unknown) |
//! | `world.embedding_noise` | 0.3 |
//! | `world.unknown_embedding_weight` | 0.1 |
//! | `world.embedding_extra_dims` | 0 |
//! | `world.seed` | 7 |
//! | `protocol.m` / `n_r` / `rounds` / `seed` | 100 / 100 / 4 / 7 |
//! | `policy.name` | `open-crb` |
//! | `policy.olc_first_round` | false |
//! | `surrogate.half_saturation` | 4.0 |
//! | `surrogate.confidence_noise` | 0.03 |
//! | `surrogate.localization_noise` | 6.0 |
//! | `surrogate.spurious_rate` | 0.3 |
//! | `surrogate.false_positive_rate` | 0.05 |
//! | `crb.k1` / `k2` | 130 / 110 |
//! | `crb.n_r` | ignored; `protocol.n_r` is used |
//! | `crb.geometry_bins` | [10, 10, 10, 10] |
//! | `crb.prior_source` | `uniform` |
//! | `crb.smoothing` | 1e-6 |
//! | `crb.kmeans_max_iter` / `kmeans_tol` | 100 / 1e-6 |
//! | `crb.olc_every_round` | false |
//! | `metric.default_tau` | 0.5 |
//! | `metric.per_class` | {} |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crb::CrbConfig;
use crate::error::{Error, Result};
use crate::metrics::Thresholds;
use crate::sim::{simulation_crb, ExperimentSetup, PolicySpec, Protocol, SurrogateConfig, WorldConfig};

/// Environment variable that replaces both the world and the protocol seed.
pub const SEED_ENV: &str = "OWAL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub protocol: Protocol,
    pub policy: PolicySpec,
    pub surrogate: SurrogateConfig,
    pub crb: CrbConfig,
    pub metric: Thresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            protocol: Protocol::default(),
            policy: PolicySpec::default(),
            surrogate: SurrogateConfig::default(),
            crb: simulation_crb(),
            metric: Thresholds::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.surrogate.validate()?;
        let crb = CrbConfig { n_r: self.protocol.n_r, ..self.crb.clone() };
        if self.protocol.n_r > 0 {
            crb.validate()?;
        }
        let taus = std::iter::once(("metric.default_tau".to_string(), self.metric.default_tau)).chain(
            self.metric
                .per_class
                .iter()
                .map(|(id, t)| (format!("metric.per_class.{id}"), *t)),
        );
        for (key, tau) in taus {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::Config(format!("{key} must lie in (0, 1), got {tau}")));
            }
        }
        Ok(())
    }

    /// Applies a seed override (the value of [`SEED_ENV`], if set).
    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self> {
        if let Some(v) = value {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
            self.world.seed = seed;
            self.protocol.seed = seed;
        }
        Ok(self)
    }

    pub fn setup(&self) -> ExperimentSetup {
        ExperimentSetup {
            protocol: self.protocol,
            policy: self.policy,
            surrogate: self.surrogate.clone(),
            crb: self.crb.clone(),
            thresholds: self.metric.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crb::PriorSource;
    use crate::Policy;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.setup(), ExperimentSetup::default());
        assert_eq!(c.crb.prior_source, PriorSource::Uniform);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_json(r#"{"protocol": {"m": 5, "nr": 3}}"#).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("nr"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"worlds": {}}"#).unwrap_err();
        assert!(err.to_string().contains("worlds"), "{err}");
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = ExperimentConfig::from_json(r#"{"policy": {"name": "random", "olc_first_round": true}, "protocol": {"rounds": 2}}"#)
            .unwrap();
        assert_eq!(c.policy, PolicySpec::with_olc_first_round(Policy::Random));
        assert_eq!(c.protocol.rounds, 2);
        assert_eq!(c.protocol.m, 100);
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            r#"{"policy": {"name": "bald"}}"#,
            r#"{"metric": {"default_tau": 1.5}}"#,
            r#"{"surrogate": {"spurious_rate": 2.0}}"#,
            r#"{"world": {"classes": []}}"#,
            r#"{"crb": {"k1": 10, "k2": 50}}"#,
        ] {
            let err = ExperimentConfig::from_json(doc).unwrap_err();
            assert!(err.is_config(), "{doc}: {err}");
        }
    }

    #[test]
    fn seed_override() {
        let c = ExperimentConfig::default().with_seed_override(Some("42")).unwrap();
        assert_eq!((c.world.seed, c.protocol.seed), (42, 42));
        assert!(ExperimentConfig::default().with_seed_override(Some("x")).is_err());
        assert_eq!(ExperimentConfig::default().with_seed_override(None).unwrap(), ExperimentConfig::default());
    }
}
