//! Quantitative metrics: gender score from a trained classifier, identity
//! distances and FR scores from a contrastive embedding network, and the
//! comparison report across models.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::dataset::{ImageTensor, Sex, AGE_GROUPS};
use crate::nets::{conv_head, sigmoid, Caae, CaaeParams, NetError};
use crate::nn::{ParamSet, ShapeError, Stack};
use crate::trainer::{simulate_ages_batch, Adam, TrainingSet};

pub const REPORT_FORMAT: &str = "ageprog-eval-v1";
pub const DEFAULT_THRESHOLDS: [f64; 3] = [1.6, 2.0, 2.5];
pub const DISTANCE_POOLING: &str = "one distance per (input, age group) pair, all ten groups pooled";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("training data holds a single sex")]
    SingleClassDataset,
    #[error("training data holds fewer than two identities with two images each")]
    SingleIdentityDataset,
    #[error("nothing to score")]
    EmptyInput,
    #[error("need at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("vectors have {0} and {1} elements")]
    ShapeMismatch(usize, usize),
    #[error("models are not comparable: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<ShapeError> for EvalError {
    fn from(e: ShapeError) -> Self {
        EvalError::Net(e.into())
    }
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Pure metrics

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCell {
    pub correct: usize,
    pub total: usize,
}

impl ScoreCell {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Per-(sex, age group) classification accuracy. Cells without items are
/// absent rather than zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenderScoreTable {
    pub male: [Option<ScoreCell>; AGE_GROUPS],
    pub female: [Option<ScoreCell>; AGE_GROUPS],
}

impl GenderScoreTable {
    pub fn row(&self, sex: Sex) -> &[Option<ScoreCell>; AGE_GROUPS] {
        match sex {
            Sex::Male => &self.male,
            Sex::Female => &self.female,
        }
    }

    fn row_mut(&mut self, sex: Sex) -> &mut [Option<ScoreCell>; AGE_GROUPS] {
        match sex {
            Sex::Male => &mut self.male,
            Sex::Female => &mut self.female,
        }
    }

    pub fn accuracy(&self, sex: Sex, group: usize) -> Option<f64> {
        self.row(sex)[group].map(|c| c.accuracy())
    }

    /// Unweighted mean over the groups that have items.
    pub fn average(&self, sex: Sex) -> Option<f64> {
        mean_present(self.row(sex).iter().map(|c| c.map(|c| c.accuracy())))
    }

    /// Pooled accuracy over every cell of one sex.
    pub fn pooled(&self, sex: Sex) -> Option<f64> {
        let (c, t) = self.row(sex).iter().flatten().fold((0, 0), |(c, t), s| (c + s.correct, t + s.total));
        (t > 0).then(|| c as f64 / t as f64)
    }
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Tallies predictions against expected sexes per age group.
pub fn gender_score_from_predictions(predicted: &[Sex], expected: &[Sex], groups: &[usize]) -> Result<GenderScoreTable> {
    if predicted.len() != expected.len() {
        return Err(EvalError::ShapeMismatch(predicted.len(), expected.len()));
    }
    if groups.len() != expected.len() {
        return Err(EvalError::ShapeMismatch(groups.len(), expected.len()));
    }
    if expected.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut t = GenderScoreTable::default();
    for ((&p, &e), &g) in predicted.iter().zip(expected).zip(groups) {
        assert!(g < AGE_GROUPS, "age group {g} out of range");
        let cell = t.row_mut(e)[g].get_or_insert(ScoreCell { correct: 0, total: 0 });
        cell.total += 1;
        cell.correct += usize::from(p == e);
    }
    Ok(t)
}

pub fn gender_score(classifier: &GenderClassifier, generated: &[(ImageTensor, Sex)], groups: &[usize]) -> Result<GenderScoreTable> {
    let images: Vec<&ImageTensor> = generated.iter().map(|(x, _)| x).collect();
    let predicted = classifier.predict(&images)?;
    let expected: Vec<Sex> = generated.iter().map(|(_, s)| *s).collect();
    gender_score_from_predictions(&predicted, &expected, groups)
}

pub fn embedding_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::ShapeMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt())
}

/// Fraction of distances strictly below `threshold`.
pub fn fr_score(distances: &[f64], threshold: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(distances.iter().filter(|&&d| d < threshold).count() as f64 / distances.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrScoreTable {
    pub thresholds: Vec<f64>,
    pub scores: Vec<f64>,
}

pub fn fr_scores(distances: &[f64], thresholds: &[f64]) -> Result<FrScoreTable> {
    let scores = thresholds.iter().map(|&t| fr_score(distances, t)).collect::<Result<_>>()?;
    Ok(FrScoreTable { thresholds: thresholds.to_vec(), scores })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub sd: f64,
    /// 10th, 20th, ..., 90th percentiles.
    pub percentiles: [f64; 9],
}

/// Percentile `q ∈ [0, 1]` of sorted values, interpolating between ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Summary with sample standard deviation and interpolated percentiles.
pub fn distance_stats(distances: &[f64]) -> Result<DistanceStats> {
    let n = distances.len();
    if n < 2 {
        return Err(EvalError::TooFewValues(n));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(DistanceStats {
        min: sorted[0],
        max: sorted[n - 1],
        mean,
        sd: var.sqrt(),
        percentiles: std::array::from_fn(|i| percentile(&sorted, (i + 1) as f64 / 10.0)),
    })
}

/// Percentage gain of `model` over `baseline`; positive means better.
pub fn percentage_gain(baseline: f64, model: f64, higher_is_better: bool) -> Option<f64> {
    if baseline == 0.0 || !baseline.is_finite() || !model.is_finite() {
        return None;
    }
    let delta = if higher_is_better { model - baseline } else { baseline - model };
    Some(100.0 * delta / baseline)
}

// ---------------------------------------------------------------------------
// Learned evaluators

fn infer_batched(stack: &Stack, params: &ParamSet<f32>, images: &[&ImageTensor]) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for chunk in images.chunks(64) {
        let chw: Vec<f32> = chunk.iter().flat_map(|x| x.to_chw()).collect();
        out.extend(stack.infer(params, &chw, chunk.len(), None)?);
    }
    Ok(out)
}

fn stack_input_batch(set: &TrainingSet, idx: &[usize]) -> Vec<f32> {
    idx.iter().flat_map(|&i| set.images[i].iter().copied()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Youngest age group used for training.
    pub min_group: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { widths: vec![8, 16, 32], epochs: 6, batch_size: 32, learning_rate: 2e-3, seed: 11, min_group: 3 }
    }
}

/// Binary sex classifier; a positive logit means female.
#[derive(Clone, Debug, PartialEq)]
pub struct GenderClassifier {
    pub stack: Stack,
    pub params: ParamSet<f32>,
}

impl GenderClassifier {
    pub fn new(image_size: usize, widths: &[usize], seed: u64) -> Result<Self> {
        let stack = conv_head("classifier", image_size, widths, 1)?;
        let params = stack.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { stack, params })
    }

    pub fn prob_female(&self, images: &[&ImageTensor]) -> Result<Vec<f64>> {
        Ok(infer_batched(&self.stack, &self.params, images)?.into_iter().map(|l| sigmoid(l as f64)).collect())
    }

    pub fn predict(&self, images: &[&ImageTensor]) -> Result<Vec<Sex>> {
        let logits = infer_batched(&self.stack, &self.params, images)?;
        Ok(logits.into_iter().map(|l| if l > 0.0 { Sex::Female } else { Sex::Male }).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "gender-classifier", "graph": self.stack });
        checkpoint::save(dir, &meta, &[&self.params])?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (stack, params) = load_stack(dir, "gender-classifier")?;
        Ok(Self { stack, params })
    }
}

fn load_stack(dir: &Path, kind: &str) -> Result<(Stack, ParamSet<f32>)> {
    let (meta, mut arrays) = checkpoint::load(dir)?;
    if meta.get("kind").and_then(|k| k.as_str()) != Some(kind) {
        return Err(CheckpointError::Corrupt(format!("expected a {kind} checkpoint")).into());
    }
    let stack: Stack = serde_json::from_value(meta["graph"].clone()).map_err(|e| CheckpointError::Corrupt(format!("graph record: {e}")))?;
    let stack = Stack::new(stack.name, stack.input, stack.layers)?;
    let params = checkpoint::take_set(&mut arrays, &stack.param_layout())?;
    if !arrays.is_empty() {
        return Err(CheckpointError::Corrupt("unexpected extra arrays".into()).into());
    }
    Ok((stack, params))
}

/// Trains the classifier on faces of age group `min_group` and older. Returns
/// it with per-group accuracy on `test` (all ages).
pub fn train_gender_classifier(train: &TrainingSet, test: &TrainingSet, cfg: &ClassifierConfig) -> Result<(GenderClassifier, GenderScoreTable)> {
    let adults: Vec<usize> = (0..train.len()).filter(|&i| train.groups[i] >= cfg.min_group).collect();
    let has = |s: Sex| adults.iter().any(|&i| train.sexes[i] == s);
    if !has(Sex::Male) || !has(Sex::Female) {
        return Err(EvalError::SingleClassDataset);
    }
    let mut clf = GenderClassifier::new(train.image_size, &cfg.widths, cfg.seed)?;
    let mut opt = Adam::new(&clf.params, cfg.learning_rate);
    opt.beta1 = 0.9;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1A5);
    let mut order = adults;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let x = stack_input_batch(train, idx);
            let tape = clf.stack.forward(&clf.params, &x, idx.len(), None)?;
            let n = idx.len() as f64;
            let grad: Vec<f32> = tape
                .output()
                .iter()
                .zip(idx)
                .map(|(&l, &i)| {
                    let target = if train.sexes[i] == Sex::Female { 1.0 } else { 0.0 };
                    ((sigmoid(l as f64) - target) / n) as f32
                })
                .collect();
            let mut g = clf.params.zeros_like();
            clf.stack.backward(&clf.params, &tape, grad, Some(&mut g), false)?;
            opt.step(&mut clf.params, &g);
        }
    }
    let images: Vec<ImageTensor> = (0..test.len()).map(|i| test.image(i)).collect();
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let table = gender_score_from_predictions(&clf.predict(&refs)?, &test.sexes, &test.groups)?;
    Ok((clf, table))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub widths: Vec<usize>,
    pub dim: usize,
    /// Different identities are pushed at least this far apart.
    pub margin: f64,
    pub steps: usize,
    /// Pairs per step, half same-identity and half different.
    pub pairs_per_step: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Largest standard deviation of the Gaussian noise added to training
    /// images; each image also gets a 3×3 box blur with probability 1/2.
    #[serde(default)]
    pub augment_noise: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { widths: vec![8, 16, 32], dim: 32, margin: 3.0, steps: 600, pairs_per_step: 32, learning_rate: 1e-3, seed: 12, augment_noise: 0.1 }
    }
}

/// 3×3 box blur of each channel plane, edges clamped.
pub fn box_blur(chw: &[f32], size: usize) -> Vec<f32> {
    let mut out = vec![0.0; chw.len()];
    for (src, dst) in chw.chunks_exact(size * size).zip(out.chunks_exact_mut(size * size)) {
        for y in 0..size {
            for x in 0..size {
                let mut sum = 0.0;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        let yy = (y as isize + dy).clamp(0, size as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, size as isize - 1) as usize;
                        sum += src[yy * size + xx];
                    }
                }
                dst[y * size + x] = sum / 9.0;
            }
        }
    }
    out
}

fn augment<R: Rng>(chw: &[f32], size: usize, max_noise: f64, rng: &mut R) -> Vec<f32> {
    let mut x = if rng.gen_bool(0.5) { box_blur(chw, size) } else { chw.to_vec() };
    if max_noise > 0.0 {
        let sd = rng.gen_range(0.0..max_noise);
        for v in &mut x {
            let g: f64 = rng.sample(rand_distr::StandardNormal);
            *v = (*v as f64 + sd * g).clamp(-1.0, 1.0) as f32;
        }
    }
    x
}

/// Maps faces to a Euclidean space where distance tracks identity.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    pub stack: Stack,
    pub params: ParamSet<f32>,
}

impl EmbeddingNet {
    pub fn new(image_size: usize, widths: &[usize], dim: usize, seed: u64) -> Result<Self> {
        let stack = conv_head("embedding", image_size, widths, dim)?;
        let params = stack.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { stack, params })
    }

    pub fn dim(&self) -> usize {
        self.stack.output_shape().len()
    }

    pub fn embed(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f32>>> {
        let flat = infer_batched(&self.stack, &self.params, images)?;
        Ok(flat.chunks_exact(self.dim()).map(|c| c.to_vec()).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "embedding", "graph": self.stack });
        checkpoint::save(dir, &meta, &[&self.params])?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (stack, params) = load_stack(dir, "embedding")?;
        Ok(Self { stack, params })
    }
}

/// Contrastive loss of one pair and its gradient with respect to `a`
/// (the gradient for `b` is the negation).
pub fn contrastive_pair(a: &[f32], b: &[f32], same: bool, margin: f64) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x as f64 - y as f64).collect();
    let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if same {
        (d * d, diff.iter().map(|v| 2.0 * v).collect())
    } else if d < margin && d > 0.0 {
        let k = -2.0 * (margin - d) / d;
        ((margin - d).powi(2), diff.iter().map(|v| k * v).collect())
    } else {
        (if d < margin { margin * margin } else { 0.0 }, vec![0.0; diff.len()])
    }
}

pub fn train_embedding_net(set: &TrainingSet, cfg: &EmbeddingConfig) -> Result<EmbeddingNet> {
    let mut by_id: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, id) in set.identities.iter().enumerate() {
        if let Some(id) = id {
            by_id.entry(*id).or_default().push(i);
        }
    }
    let groups: Vec<Vec<usize>> = by_id.into_values().filter(|v| v.len() >= 2).collect();
    if groups.len() < 2 {
        return Err(EvalError::SingleIdentityDataset);
    }
    let mut net = EmbeddingNet::new(set.image_size, &cfg.widths, cfg.dim, cfg.seed)?;
    let mut opt = Adam::new(&net.params, cfg.learning_rate);
    opt.beta1 = 0.9;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE3B);
    let pairs = cfg.pairs_per_step.max(2);
    let dim = cfg.dim;
    for _ in 0..cfg.steps {
        let mut left = Vec::with_capacity(pairs);
        let mut right = Vec::with_capacity(pairs);
        let mut same = Vec::with_capacity(pairs);
        for k in 0..pairs {
            let g = &groups[rng.gen_range(0..groups.len())];
            if k % 2 == 0 {
                let pick: Vec<&usize> = g.choose_multiple(&mut rng, 2).collect();
                left.push(*pick[0]);
                right.push(*pick[1]);
                same.push(true);
            } else {
                let mut h = rng.gen_range(0..groups.len());
                while std::ptr::eq(&groups[h], g) {
                    h = rng.gen_range(0..groups.len());
                }
                left.push(*g.choose(&mut rng).expect("non-empty"));
                right.push(*groups[h].choose(&mut rng).expect("non-empty"));
                same.push(false);
            }
        }
        let idx: Vec<usize> = left.iter().chain(&right).copied().collect();
        let x: Vec<f32> = idx.iter().flat_map(|&i| augment(&set.images[i], set.image_size, cfg.augment_noise, &mut rng)).collect();
        let tape = net.stack.forward(&net.params, &x, idx.len(), None)?;
        let e = tape.output();
        let mut grad = vec![0.0f32; e.len()];
        for k in 0..pairs {
            let (a, b) = (&e[k * dim..(k + 1) * dim], &e[(pairs + k) * dim..(pairs + k + 1) * dim]);
            let (_, g) = contrastive_pair(a, b, same[k], cfg.margin);
            for j in 0..dim {
                let v = (g[j] / pairs as f64) as f32;
                grad[k * dim + j] += v;
                grad[(pairs + k) * dim + j] -= v;
            }
        }
        let mut g = net.params.zeros_like();
        net.stack.backward(&net.params, &tape, grad, Some(&mut g), false)?;
        opt.step(&mut net.params, &g);
    }
    Ok(net)
}

// ---------------------------------------------------------------------------
// Model comparison

/// Evaluators shared by every model under comparison.
pub struct EvalTools {
    pub classifier: GenderClassifier,
    pub embedder: EmbeddingNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGains {
    pub gender_male: [Option<f64>; AGE_GROUPS],
    pub gender_female: [Option<f64>; AGE_GROUPS],
    /// Mean of the per-group gains, per sex.
    pub gender_average: [Option<f64>; 2],
    pub distance_min: Option<f64>,
    pub distance_max: Option<f64>,
    pub distance_mean: Option<f64>,
    pub distance_sd: Option<f64>,
    pub distance_percentiles: [Option<f64>; 9],
    pub fr: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub name: String,
    pub gender: GenderScoreTable,
    pub gender_average: [Option<f64>; 2],
    pub distances: DistanceStats,
    pub fr: FrScoreTable,
    /// Gains over the baseline model; absent for the baseline itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<ModelGains>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub baseline: String,
    pub thresholds: Vec<f64>,
    pub inputs_male: usize,
    pub inputs_female: usize,
    pub distance_pooling: String,
    /// Classifier accuracy on its own held-out faces, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_test: Option<GenderScoreTable>,
    pub models: Vec<ModelEval>,
}

pub fn gains(baseline: &ModelEval, model: &ModelEval) -> ModelGains {
    let row = |sex: Sex| -> [Option<f64>; AGE_GROUPS] {
        std::array::from_fn(|g| match (baseline.gender.accuracy(sex, g), model.gender.accuracy(sex, g)) {
            (Some(b), Some(m)) => percentage_gain(b, m, true),
            _ => None,
        })
    };
    let (gm, gf) = (row(Sex::Male), row(Sex::Female));
    let lower = |b: f64, m: f64| percentage_gain(b, m, false);
    let (bd, md) = (&baseline.distances, &model.distances);
    ModelGains {
        gender_average: [mean_present(gm.iter().copied()), mean_present(gf.iter().copied())],
        gender_male: gm,
        gender_female: gf,
        distance_min: lower(bd.min, md.min),
        distance_max: lower(bd.max, md.max),
        distance_mean: lower(bd.mean, md.mean),
        distance_sd: lower(bd.sd, md.sd),
        distance_percentiles: std::array::from_fn(|i| lower(bd.percentiles[i], md.percentiles[i])),
        fr: baseline.fr.scores.iter().zip(&model.fr.scores).map(|(&b, &m)| percentage_gain(b, m, true)).collect(),
    }
}

/// Simulates every input through all ten groups and scores the results.
pub fn evaluate_model(
    name: &str,
    net: &Caae,
    params: &CaaeParams<f32>,
    inputs: &[(ImageTensor, Sex)],
    tools: &EvalTools,
    thresholds: &[f64],
) -> Result<ModelEval> {
    if inputs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let sims = simulate_ages_batch(net, params, inputs)?;
    let originals: Vec<&ImageTensor> = inputs.iter().map(|(x, _)| x).collect();
    let input_emb = tools.embedder.embed(&originals)?;
    let mut generated = Vec::with_capacity(inputs.len() * AGE_GROUPS);
    let mut groups = Vec::with_capacity(inputs.len() * AGE_GROUPS);
    for (sim, (_, sex)) in sims.iter().zip(inputs) {
        for (g, img) in sim.images.iter().enumerate() {
            generated.push((img.clone(), *sex));
            groups.push(g);
        }
    }
    let gender = gender_score(&tools.classifier, &generated, &groups)?;
    let gen_refs: Vec<&ImageTensor> = generated.iter().map(|(x, _)| x).collect();
    let gen_emb = tools.embedder.embed(&gen_refs)?;
    let distances = gen_emb
        .iter()
        .enumerate()
        .map(|(k, e)| embedding_distance(&input_emb[k / AGE_GROUPS], e))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelEval {
        name: name.to_string(),
        gender_average: [gender.average(Sex::Male), gender.average(Sex::Female)],
        gender,
        distances: distance_stats(&distances)?,
        fr: fr_scores(&distances, thresholds)?,
        gains: None,
    })
}

/// Evaluates each named model on the same inputs. The first model is the
/// baseline for gain columns.
pub fn evaluate_models(
    models: &[(String, Caae, CaaeParams<f32>)],
    inputs: &[(ImageTensor, Sex)],
    tools: &EvalTools,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let Some((_, first, _)) = models.first() else { return Err(EvalError::EmptyInput) };
    for (name, net, _) in models {
        if net.arch.image_size != first.arch.image_size || net.arch.n_z != first.arch.n_z {
            return Err(EvalError::Incompatible(format!("`{name}` differs in image_size or n_z")));
        }
    }
    let mut evals = models
        .iter()
        .map(|(name, net, p)| evaluate_model(name, net, p, inputs, tools, thresholds))
        .collect::<Result<Vec<_>>>()?;
    attach_gains(&mut evals);
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        baseline: evals[0].name.clone(),
        thresholds: thresholds.to_vec(),
        inputs_male: inputs.iter().filter(|(_, s)| *s == Sex::Male).count(),
        inputs_female: inputs.iter().filter(|(_, s)| *s == Sex::Female).count(),
        distance_pooling: DISTANCE_POOLING.into(),
        classifier_test: None,
        models: evals,
    })
}

/// Fills `gains` of every model after the first relative to the first.
pub fn attach_gains(evals: &mut [ModelEval]) {
    if let Some((base, rest)) = evals.split_first_mut() {
        base.gains = None;
        for m in rest {
            m.gains = Some(gains(base, m));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        let p = [Sex::Male, Sex::Male, Sex::Female, Sex::Male];
        let t = gender_score_from_predictions(&p, &[Sex::Male; 4], &[0; 4]).unwrap();
        assert_eq!(t.accuracy(Sex::Male, 0), Some(0.75));
        assert_eq!(t.accuracy(Sex::Male, 1), None);
        assert_eq!(t.accuracy(Sex::Female, 0), None);
        let cell = ScoreCell { correct: 1723, total: 1855 };
        assert_eq!(format!("{:.2}", cell.accuracy()), "0.93");
        assert_eq!(embedding_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(fr_score(&[1.0, 2.0], 1.6).unwrap(), 0.5);
        assert_eq!(fr_score(&[0.0; 4], 1e-9).unwrap(), 1.0);
        assert_eq!(fr_score(&[0.3, 5.39], 5.4).unwrap(), 1.0);
        let s = distance_stats(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.min, s.max, s.mean, s.sd, s.percentiles[4]), (1.0, 3.0, 2.0, 1.0, 2.0));
        let c = distance_stats(&[5.0; 3]).unwrap();
        assert_eq!(c.sd, 0.0);
        assert!(c.percentiles.iter().all(|&p| p == 5.0));
    }

    #[test]
    fn errors() {
        assert!(matches!(fr_score(&[], 1.0), Err(EvalError::EmptyInput)));
        assert!(matches!(distance_stats(&[1.0]), Err(EvalError::TooFewValues(1))));
        assert!(matches!(embedding_distance(&[1.0], &[1.0, 2.0]), Err(EvalError::ShapeMismatch(1, 2))));
        assert!(matches!(gender_score_from_predictions(&[], &[], &[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn table_gain_arithmetic() {
        let cell = |a: f64| Some(ScoreCell { correct: (a * 100.0).round() as usize, total: 100 });
        let caae = [0.65, 0.53, 0.44, 0.34, 0.31, 0.36, 0.42, 0.44, 0.45, 0.47];
        let caae_g = [0.77, 0.74, 0.71, 0.78, 0.78, 0.84, 0.89, 0.91, 0.90, 0.92];
        let model = |v: &[f64; 10], name: &str| ModelEval {
            name: name.into(),
            gender: GenderScoreTable { male: std::array::from_fn(|g| cell(v[g])), female: std::array::from_fn(|g| cell(v[g])) },
            gender_average: [None, None],
            distances: distance_stats(&[1.0, 2.0]).unwrap(),
            fr: FrScoreTable { thresholds: vec![1.6], scores: vec![0.38] },
            gains: None,
        };
        let (b, m) = (model(&caae, "CAAE"), model(&caae_g, "CAAE-G"));
        assert!((b.gender.average(Sex::Male).unwrap() - 0.441).abs() < 1e-12);
        let g = gains(&b, &m);
        // The average-row gain is the mean of per-group gains, not the gain of the averages.
        let mean_of_gains = g.gender_average[0].unwrap();
        let gain_of_means = percentage_gain(b.gender.average(Sex::Male).unwrap(), m.gender.average(Sex::Male).unwrap(), true).unwrap();
        assert_eq!(format!("{mean_of_gains:.1}"), "94.8");
        assert_eq!(format!("{gain_of_means:.1}"), "86.8");
        assert_eq!(gains(&b, &b).gender_average, [Some(0.0), Some(0.0)]);
        assert_eq!(percentage_gain(1.88, 1.77, false).map(|v| (v * 10.0).round() / 10.0), Some(5.9));
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let a = [0.3f32, -0.2, 0.5];
        let b = [0.1f32, 0.4, -0.3];
        for same in [true, false] {
            let (_, g) = contrastive_pair(&a, &b, same, 3.0);
            for j in 0..3 {
                let h = 1e-3f32;
                let mut ap = a;
                ap[j] += h;
                let mut am = a;
                am[j] -= h;
                let fd = (contrastive_pair(&ap, &b, same, 3.0).0 - contrastive_pair(&am, &b, same, 3.0).0) / (2.0 * h as f64);
                assert!((fd - g[j]).abs() < 1e-3, "{same} {j}: {fd} vs {}", g[j]);
            }
        }
    }
}
