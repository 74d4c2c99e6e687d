//! The four-model ablation study on synthetic faces.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{build_dataset, load_record_image, synthetic_eval_inputs, synthetic_records, DatasetError, ImageTensor, Sex, SyntheticSpec};
use crate::eval::{evaluate_models, train_embedding_net, train_gender_classifier, ClassifierConfig, EmbeddingConfig, EvalError, EvalReport, EvalTools, GenderScoreTable, DEFAULT_THRESHOLDS};
use crate::losses::Ablation;
use crate::nets::{ArchConfig, Caae, CaaeParams};
use crate::trainer::{train, TrainConfig, TrainError, TrainingSet};

/// Model names and their extensions, baseline first.
pub const VARIANTS: [(&str, Ablation); 4] = [
    ("CAAE", Ablation { gender_on: false, vgg_on: false }),
    ("CAAE-G", Ablation { gender_on: true, vgg_on: false }),
    ("CAAE-V", Ablation { gender_on: false, vgg_on: true }),
    ("CAAE-GV", Ablation { gender_on: true, vgg_on: true }),
];

pub fn variant_ablation(name: &str) -> Option<Ablation> {
    VARIANTS.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)).map(|&(_, a)| a)
}

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub data: SyntheticSpec,
    pub split: [f64; 3],
    pub eval_per_sex: usize,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub embedding: EmbeddingConfig,
    pub thresholds: Vec<f64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSpec { count: 2000, seed: 2024, age_range: [0, 100], size: 64, identities: Some(200) },
            split: [0.70, 0.15, 0.15],
            eval_per_sex: 100,
            train: TrainConfig {
                architecture: Some(ArchConfig { label_tiles: 5, gender_tiles: 25, ..ArchConfig::default() }),
                ..TrainConfig::default()
            },
            classifier: ClassifierConfig::default(),
            embedding: EmbeddingConfig::default(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

/// Rendered training and test splits plus the held-out young inputs.
pub struct StudyData {
    pub train: TrainingSet,
    pub test: TrainingSet,
    pub inputs: Vec<(ImageTensor, Sex)>,
}

pub fn prepare(cfg: &StudyConfig) -> Result<StudyData, StudyError> {
    let records = synthetic_records(&cfg.data)?;
    let split = build_dataset(&records, cfg.split, cfg.data.seed)?;
    let size = cfg.data.size;
    let train = TrainingSet::load(&split.train, size)?;
    let test = TrainingSet::load(&split.test, size)?;
    let inputs = synthetic_eval_inputs(cfg.data.seed, cfg.eval_per_sex)
        .iter()
        .map(|r| Ok((load_record_image(r, size)?, r.sex)))
        .collect::<Result<_, DatasetError>>()?;
    Ok(StudyData { train, test, inputs })
}

/// Classifier and embedding network shared by every model of a study.
pub fn train_tools(cfg: &StudyConfig, data: &StudyData) -> Result<(EvalTools, GenderScoreTable), StudyError> {
    let (classifier, table) = train_gender_classifier(&data.train, &data.test, &cfg.classifier)?;
    let embedder = train_embedding_net(&data.train, &cfg.embedding)?;
    Ok((EvalTools { classifier, embedder }, table))
}

/// Trains every variant on the same data and seed; run directories are
/// named after the variants.
pub fn train_variants(
    base: &TrainConfig,
    data: &TrainingSet,
    out: Option<&Path>,
    variants: &[(&str, Ablation)],
) -> Result<Vec<(String, Caae, CaaeParams<f32>)>, StudyError> {
    let mut models = Vec::with_capacity(variants.len());
    for &(name, ablation) in variants {
        let cfg = TrainConfig { ablation, ..base.clone() };
        let dir = out.map(|o| o.join(name));
        log::info!("training {name}");
        let (net, params, _) = train(&cfg, data, dir.as_deref())?;
        models.push((name.to_string(), net, params));
    }
    Ok(models)
}

/// Full study: data, evaluators, four trainings, evaluation.
pub fn run_study(cfg: &StudyConfig, data: &StudyData, tools: &EvalTools, out: Option<&Path>) -> Result<EvalReport, StudyError> {
    let models = train_variants(&cfg.train, &data.train, out, &VARIANTS)?;
    Ok(evaluate_models(&models, &data.inputs, tools, &cfg.thresholds)?)
}
