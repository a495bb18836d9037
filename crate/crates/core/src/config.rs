//! Run configuration: one JSON document covering model, training,
//! data, and eval settings. Unknown keys are rejected; every field has
//! a documented default; the effective config is echoed into output
//! artifacts for provenance.

use crate::backbone::{BackboneTrainConfig, LossKind, SynthesisConfig};
use crate::defect::{DefectGenConfig, DefectTrainConfig, DiscriminatorMode, FeatureMode, MsMode};
use crate::downstream::ClassifierConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Stage-2 model options; `attach_start: null` derives
/// output_resolution / 4.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefectSection {
    pub feature_mode: FeatureMode,
    pub discriminator_mode: DiscriminatorMode,
    pub ms_mode: MsMode,
    pub lambda_ms: f64,
    pub attach_start: Option<usize>,
}

impl Default for DefectSection {
    fn default() -> Self {
        DefectSection {
            feature_mode: FeatureMode::Residual,
            discriminator_mode: DiscriminatorMode::Dual,
            ms_mode: MsMode::Mask,
            lambda_ms: 0.1,
            attach_start: None,
        }
    }
}

/// Stage-2 optimization settings (the architecture lives in `defect`).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefectTrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossKind,
    pub r1_gamma: f64,
    pub r1_interval: usize,
}

impl Default for DefectTrainSection {
    fn default() -> Self {
        let d = DefectTrainConfig::with_gen(DefectGenConfig::for_synthesis(
            &SynthesisConfig::desk(),
        ));
        DefectTrainSection {
            steps: d.steps,
            batch: d.batch,
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            adam_eps: d.adam_eps,
            loss: d.loss,
            r1_gamma: d.r1_gamma,
            r1_interval: d.r1_interval,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Feature extractor id; only the built-in seeded random-conv
    /// extractor is bundled.
    pub extractor: String,
    pub n_subsets: usize,
    /// None derives min(|X|, |Y|, 1000).
    pub subset_size: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            extractor: crate::eval::DEFAULT_EXTRACTOR_ID.to_string(),
            n_subsets: 10,
            subset_size: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every subsystem derives its own labeled stream.
    pub seed: u64,
    pub model: SynthesisConfig,
    pub defect: DefectSection,
    pub backbone_training: BackboneTrainConfig,
    pub defect_training: DefectTrainSection,
    pub eval: EvalSection,
    pub classify: ClassifierConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::config(format!("invalid config {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.defect_gen().validate(&self.model)?;
        self.classify.validate()?;
        if self.eval.n_subsets == 0 {
            return Err(Error::config("eval.n_subsets must be >= 1"));
        }
        Ok(())
    }

    /// Stage-2 architecture config with the attach resolution derived
    /// from the model when not given explicitly.
    pub fn defect_gen(&self) -> DefectGenConfig {
        DefectGenConfig {
            feature_mode: self.defect.feature_mode,
            discriminator_mode: self.defect.discriminator_mode,
            ms_mode: self.defect.ms_mode,
            lambda_ms: self.defect.lambda_ms,
            attach_start: self
                .defect
                .attach_start
                .unwrap_or(self.model.output_resolution / 4),
        }
    }

    /// Stage-2 trainer config at the effective seed.
    pub fn defect_train(&self, seed: u64) -> DefectTrainConfig {
        let t = &self.defect_training;
        DefectTrainConfig {
            steps: t.steps,
            batch: t.batch,
            seed,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            loss: t.loss,
            r1_gamma: t.r1_gamma,
            r1_interval: t.r1_interval,
            gen: self.defect_gen(),
        }
    }

    /// Stage-1 trainer config at the effective seed.
    pub fn backbone_train(&self, seed: u64) -> BackboneTrainConfig {
        BackboneTrainConfig {
            seed,
            ..self.backbone_training.clone()
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Effective seed: explicit flag > `DFM_SEED` env var > config value.
pub fn effective_seed(flag: Option<u64>, config_seed: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("DFM_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::config(format!("DFM_SEED must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(config_seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.model.output_resolution, 32);
        assert_eq!(cfg.defect_gen().attach_start, 8);
        assert_eq!(cfg.backbone_training.steps, 2000);
        assert_eq!(cfg.defect_training.steps, 500);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).unwrap_err();
        assert!(err.to_string().contains("modle"));
        let err =
            serde_json::from_str::<RunConfig>(r#"{"eval": {"bogus_key": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "defect": {"lambda_ms": 0.5}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.defect.lambda_ms, 0.5);
        assert_eq!(cfg.defect.feature_mode, FeatureMode::Residual);
        assert_eq!(cfg.backbone_training.batch, 16);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let json = cfg.to_json();
        let back: RunConfig = serde_json::from_value(json.clone()).unwrap();
        assert_eq!(back.to_json(), json);
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(effective_seed(Some(5), 1).unwrap(), 5);
        assert_eq!(effective_seed(None, 1).unwrap(), 1);
    }
}
