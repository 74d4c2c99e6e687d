//! Run configuration: one JSON document, checked against the published schema.

use std::path::{Path, PathBuf};

use ageprog::dataset::{
    build_dataset, scan_directory, select_eval_inputs, synthetic_eval_inputs, synthetic_records, DatasetManifest, SyntheticSpec,
};
use ageprog::eval::{ClassifierConfig, EmbeddingConfig};
use ageprog::experiment::{variant_ablation, StudyConfig, VARIANTS};
use ageprog::losses::{Ablation, LossWeights};
use ageprog::nets::ArchConfig;
use ageprog::trainer::TrainConfig;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: invalid run configuration:\n  {}", .problems.join("\n  "))]
    Schema { path: String, problems: Vec<String> },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Directory(PathBuf),
    Manifest(PathBuf),
}

impl DatasetSource {
    /// A prepared dataset directory (or its `dataset.json`) or a raw image
    /// directory.
    pub fn from_path(path: &Path) -> Self {
        if path.is_file() {
            DatasetSource::Manifest(path.to_path_buf())
        } else if path.join(DATASET_FILE).is_file() {
            DatasetSource::Manifest(path.join(DATASET_FILE))
        } else {
            DatasetSource::Directory(path.to_path_buf())
        }
    }
}

/// Every training setting plus dataset, variant selection, output location
/// and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub image_size: usize,
    pub n_z: usize,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub checkpoint_every: u64,
    pub saturating_generator: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub architecture: Option<ArchConfig>,
    pub dataset: DatasetSource,
    pub split: [f64; 3],
    pub variants: Vec<String>,
    pub out_dir: Option<PathBuf>,
    pub thresholds: Vec<f64>,
    pub eval_per_sex: usize,
    pub classifier: ClassifierConfig,
    pub embedding: EmbeddingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let study = StudyConfig::default();
        let t = study.train;
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            seed: t.seed,
            image_size: t.image_size,
            n_z: t.n_z,
            weights: t.weights,
            ablation: t.ablation,
            checkpoint_every: t.checkpoint_every,
            saturating_generator: t.saturating_generator,
            architecture: t.architecture,
            dataset: DatasetSource::Synthetic(study.data),
            split: study.split,
            variants: VARIANTS.iter().map(|(n, _)| n.to_string()).collect(),
            out_dir: None,
            thresholds: study.thresholds,
            eval_per_sex: study.eval_per_sex,
            classifier: study.classifier,
            embedding: study.embedding,
        }
    }
}

fn schema_problems(value: &Value) -> Vec<String> {
    let schema: Value = serde_json::from_str(SCHEMA).expect("bundled schema is valid JSON");
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("bundled schema compiles");
    let problems = match compiled.validate(value) {
        Ok(()) => Vec::new(),
        Err(errors) => errors
            .map(|e| {
                let at = e.instance_path.to_string();
                format!("{}: {e}", if at.is_empty() { "/" } else { &at })
            })
            .collect(),
    };
    problems
}

impl RunConfig {
    /// Reads and validates a config file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        Self::from_value(value, &path.display().to_string())
    }

    pub fn from_value(value: Value, origin: &str) -> Result<Self> {
        let problems = schema_problems(&value);
        if !problems.is_empty() {
            return Err(ConfigError::Schema { path: origin.to_string(), problems }.into());
        }
        serde_json::from_value(value).map_err(|e| ConfigError::Invalid(format!("{origin}: {e}")).into())
    }

    /// Schema and semantic checks on the merged configuration.
    pub fn validate(&self) -> Result<()> {
        let value = serde_json::to_value(self)?;
        let problems = schema_problems(&value);
        if !problems.is_empty() {
            return Err(ConfigError::Schema { path: "merged configuration".into(), problems }.into());
        }
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.variant_list()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
            image_size: self.image_size,
            n_z: self.n_z,
            weights: self.weights,
            ablation: self.ablation,
            checkpoint_every: self.checkpoint_every,
            saturating_generator: self.saturating_generator,
            architecture: self.architecture.clone(),
        }
    }

    pub fn variant_list(&self) -> Result<Vec<(String, Ablation)>> {
        if self.variants.is_empty() {
            bail!(ConfigError::Invalid("no variants selected".into()));
        }
        self.variants
            .iter()
            .map(|v| {
                let canonical = VARIANTS.iter().find(|(n, _)| n.eq_ignore_ascii_case(v)).map(|(n, _)| n.to_string());
                match (canonical, variant_ablation(v)) {
                    (Some(n), Some(a)) => Ok((n, a)),
                    _ => Err(ConfigError::Invalid(format!("unknown variant `{v}`")).into()),
                }
            })
            .collect()
    }

    /// Rewrites variant names in their canonical spelling.
    pub fn canonicalize_variants(&mut self) -> Result<()> {
        self.variants = self.variant_list()?.into_iter().map(|(n, _)| n).collect();
        Ok(())
    }

    /// Records of the configured source, split and tagged. Directory and
    /// synthetic sources reserve their evaluation inputs here.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        Ok(match &self.dataset {
            DatasetSource::Synthetic(spec) => {
                let records = synthetic_records(spec)?;
                let split = build_dataset(&records, self.split, spec.seed)?;
                let eval = synthetic_eval_inputs(spec.seed, self.eval_per_sex);
                DatasetManifest::from_split(&split, &eval, spec.size, spec.seed)
            }
            DatasetSource::Directory(dir) => {
                if !dir.is_dir() {
                    bail!(ConfigError::Invalid(format!("{} is not a directory", dir.display())));
                }
                let records = scan_directory(dir)?;
                let split = build_dataset(&records, self.split, self.seed)?;
                let eval = select_eval_inputs(&split, true);
                DatasetManifest::from_split(&split, &eval, self.image_size, self.seed)
            }
            DatasetSource::Manifest(path) => DatasetManifest::read(path).with_context(|| format!("reading {}", path.display()))?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RUN_CONFIG_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_satisfy_schema() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_value(serde_json::to_value(&cfg).unwrap(), "defaults").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_value(serde_json::json!({}), "t").unwrap(), RunConfig::default());
    }

    #[test]
    fn schema_rejects_bad_documents() {
        for bad in [
            serde_json::json!({ "epochs": -1 }),
            serde_json::json!({ "learning_rate": 0 }),
            serde_json::json!({ "unknown_key": 1 }),
            serde_json::json!({ "variants": ["CAAE-X"] }),
            serde_json::json!({ "dataset": { "synthetic": { "count": 10 } } }),
            serde_json::json!({ "split": [0.5, 0.5] }),
        ] {
            let err = RunConfig::from_value(bad.clone(), "t").unwrap_err();
            assert!(matches!(err.downcast_ref::<ConfigError>(), Some(ConfigError::Schema { .. })), "{bad}");
        }
    }

    #[test]
    fn variants_resolve_to_flags() {
        let cfg = RunConfig { variants: vec!["caae".into(), "CAAE-GV".into()], ..RunConfig::default() };
        let v = cfg.variant_list().unwrap();
        assert_eq!(v[0], ("CAAE".to_string(), Ablation { gender_on: false, vgg_on: false }));
        assert_eq!(v[1], ("CAAE-GV".to_string(), Ablation { gender_on: true, vgg_on: true }));
    }

    #[test]
    fn semantic_errors_surface() {
        let cfg = RunConfig { split: [0.5, 0.2, 0.2], ..RunConfig::default() };
        assert!(cfg.manifest().is_err());
        let cfg = RunConfig { image_size: 60, ..RunConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
