//! Experiment orchestration: configuration, cross-validation, the two
//! ablations and report emission.

mod experiment;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{generate_dataset, load_dataset, Frame, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub use experiment::{
    ablate_lambda, ablate_supervision, evaluate_frames, run_cv, train_single, ArmSpec, RunRecord, StrategyArm,
    DEFAULT_LAMBDAS, DEFAULT_STRATEGIES,
};
pub use report::{emit_report, load_report, Report, ReportFormat, ReportRow};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory; when absent the synthetic spec is generated in memory.
    pub root: Option<PathBuf>,
    pub synth: SynthSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointChoice {
    Final,
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub fold_seed: u64,
    /// Patients moved from each training split into a validation split.
    pub val_patients: usize,
    /// Checkpoint used for test-fold evaluation.
    pub eval_checkpoint: CheckpointChoice,
    pub output_dir: PathBuf,
    pub report_formats: Vec<ReportFormat>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            folds: 5,
            fold_seed: 2022,
            val_patients: 0,
            eval_checkpoint: CheckpointChoice::Final,
            output_dir: PathBuf::from("out"),
            report_formats: vec![ReportFormat::Json, ReportFormat::Csv],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::validation(format!("folds must be >= 2, got {}", self.folds)));
        }
        if let Some(root) = &self.data.root {
            if !root.is_dir() {
                return Err(Error::validation(format!("data root {} does not exist", root.display())));
            }
        }
        if self.eval_checkpoint == CheckpointChoice::Best && self.val_patients == 0 {
            return Err(Error::validation("eval_checkpoint = best needs val_patients >= 1"));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, format!("bad config: {e}")))
    }

    /// Applies `key.path=value` overrides. Values parse as JSON, falling back to a string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("override '{item}' is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::validation(format!("invalid override: {e}")))
    }

    /// Hash of the experiment definition; the output location is not part of it.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hash_json(&c)
    }

    /// Hash of everything an ablation must hold fixed: the config minus the
    /// ablated training knobs and the output location.
    pub fn control_hash(&self) -> String {
        let mut c = self.clone();
        let d = TrainConfig::default();
        c.train.supervision = d.supervision;
        c.train.alpha_mode = d.alpha_mode;
        c.train.alpha_fixed = d.alpha_fixed;
        c.train.lambda_pls = d.lambda_pls;
        c.train.eval_decoder = d.eval_decoder;
        c.hash()
    }

    pub fn load_frames(&self) -> Result<Vec<Frame>> {
        match &self.data.root {
            Some(root) => load_dataset(root),
            None => generate_dataset(&self.data.synth),
        }
    }
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::validation(format!("'{key}': '{part}' is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::validation(format!("unknown config key '{key}'")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_follow_dotted_paths() {
        let c = ExperimentConfig::default()
            .with_overrides(&[
                "train.max_iterations=12".into(),
                "train.supervision=cps".into(),
                "data.synth.shape=[2,32,32]".into(),
                "folds=3".into(),
            ])
            .unwrap();
        assert_eq!(c.train.max_iterations, 12);
        assert_eq!(c.train.supervision, crate::losses::Supervision::Cps);
        assert_eq!(c.data.synth.shape, [2, 32, 32]);
        assert_eq!(c.folds, 3);
    }

    #[test]
    fn overrides_reject_unknown_keys_and_bad_values() {
        let c = ExperimentConfig::default();
        assert!(c.with_overrides(&["train.max_iter=3".into()]).is_err());
        assert!(c.with_overrides(&["train.supervision=nope".into()]).is_err());
        assert!(c.with_overrides(&["folds".into()]).is_err());
        assert!(c.with_overrides(&["folds.x=1".into()]).is_err());
    }

    #[test]
    fn config_round_trips_and_hashes_stably() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"folds": 2}"#).unwrap();
        assert_eq!(partial.folds, 2);
        assert_eq!(partial.train, TrainConfig::default());
    }

    #[test]
    fn control_hash_ignores_only_ablated_knobs() {
        let base = ExperimentConfig::default();
        let arm = base
            .with_overrides(&["train.lambda_pls=0.1".into(), "train.supervision=pce".into()])
            .unwrap();
        assert_ne!(base.hash(), arm.hash());
        assert_eq!(base.control_hash(), arm.control_hash());
        let other = base.with_overrides(&["fold_seed=3".into()]).unwrap();
        assert_ne!(base.control_hash(), other.control_hash());
    }

    #[test]
    fn validation_catches_bad_settings() {
        let mut c = ExperimentConfig::default();
        c.folds = 1;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.eval_checkpoint = CheckpointChoice::Best;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.data.root = Some(PathBuf::from("/definitely/not/here"));
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }
}
