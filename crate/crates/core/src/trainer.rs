//! Alternating adversarial training, checkpoints and age traversal.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_record_image, mix_seed, DatasetError, FaceRecord, ImageTensor, Sex, AGE_GROUPS};
use crate::losses::{Ablation, LossReport, LossWeights};
use crate::nets::{ArchConfig, Caae, CaaeParams, ConditionVector, LatentCode, NetError};
use crate::nn::{ParamSet, ShapeError};
use crate::objective::{autoencode, dimg_objective, dz_objective, eg_objective, Batch, EgOptions};
use crate::tensor::Scalar;

pub const FINAL_CHECKPOINT: &str = "final";
pub const TRAIN_LOG: &str = "train_log.ndjson";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite {term} = {value} at step {step}")]
    NonFiniteLoss { step: u64, term: String, value: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ShapeError> for TrainError {
    fn from(e: ShapeError) -> Self {
        TrainError::Net(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub image_size: usize,
    pub n_z: usize,
    #[serde(default)]
    pub weights: LossWeights,
    pub ablation: Ablation,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Use the literal minimax generator term instead of the non-saturating one.
    #[serde(default)]
    pub saturating_generator: bool,
    /// Layer widths; `image_size`, `n_z` and the gender switch always come
    /// from the fields above.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<ArchConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 1,
            image_size: 64,
            n_z: 50,
            weights: LossWeights::default(),
            ablation: Ablation::FULL,
            checkpoint_every: 0,
            saturating_generator: false,
            architecture: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        self.weights.validate().map_err(TrainError::BadConfig)?;
        self.arch().validate().map_err(|e| TrainError::BadConfig(e.to_string()))
    }

    /// Effective architecture. Without the gender extension the gender label is
    /// dropped from every network input.
    pub fn arch(&self) -> ArchConfig {
        let mut a = self.architecture.clone().unwrap_or_default();
        a.image_size = self.image_size;
        a.n_z = self.n_z;
        a.gender_tiles = match (self.ablation.gender_on, a.gender_tiles) {
            (false, _) => 0,
            (true, 0) => 1,
            (true, t) => t,
        };
        a
    }

    fn eg_options(&self) -> EgOptions {
        EgOptions { weights: self.weights, ablation: self.ablation, saturating: self.saturating_generator }
    }
}

/// `n × dim` draws from the uniform prior on `[-1, 1]`, row-major.
pub fn sample_prior<T: Scalar, R: Rng>(n: usize, dim: usize, rng: &mut R) -> Vec<T> {
    (0..n * dim).map(|_| T::from_f64(rng.gen_range(-1.0..=1.0))).collect()
}

/// Adam with first-moment decay 0.5.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: ParamSet<f32>,
    v: ParamSet<f32>,
}

impl Adam {
    pub fn new(like: &ParamSet<f32>, lr: f64) -> Self {
        Self { lr, beta1: 0.5, beta2: 0.999, eps: 1e-8, t: 0, m: like.zeros_like(), v: like.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.tensors.iter_mut().zip(&grads.tensors).zip(&mut self.m.tensors).zip(&mut self.v.tensors) {
            for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Training images held in memory in channel-major layout.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub image_size: usize,
    pub images: Vec<Vec<f32>>,
    pub groups: Vec<usize>,
    pub sexes: Vec<Sex>,
    pub identities: Vec<Option<u64>>,
}

impl TrainingSet {
    pub fn load(records: &[FaceRecord], image_size: usize) -> Result<Self, DatasetError> {
        let mut set = Self::empty(image_size);
        for r in records {
            set.push(&load_record_image(r, image_size)?, r.group, r.sex, r.identity);
        }
        Ok(set)
    }

    pub fn empty(image_size: usize) -> Self {
        Self { image_size, images: Vec::new(), groups: Vec::new(), sexes: Vec::new(), identities: Vec::new() }
    }

    pub fn push(&mut self, image: &ImageTensor, group: usize, sex: Sex, identity: Option<u64>) {
        assert_eq!(image.size(), self.image_size);
        self.images.push(image.to_chw());
        self.groups.push(group);
        self.sexes.push(sex);
        self.identities.push(identity);
    }

    /// The items at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            image_size: self.image_size,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
            sexes: idx.iter().map(|&i| self.sexes[i]).collect(),
            identities: idx.iter().map(|&i| self.identities[i]).collect(),
        }
    }

    pub fn image(&self, i: usize) -> ImageTensor {
        ImageTensor::from_chw(self.image_size, &self.images[i]).expect("stored images match the set size")
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, arch: &ArchConfig, idx: &[usize]) -> Batch<f32> {
        let items: Vec<_> = idx.iter().map(|&i| (self.images[i].as_slice(), self.groups[i], self.sexes[i])).collect();
        Batch::new(arch, &items)
    }
}

/// One logged step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub elapsed_ms: u64,
    #[serde(flatten)]
    pub losses: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_ndjson(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("log record serializes") + "\n").collect()
    }

    pub fn from_ndjson(text: &str) -> Result<Self, serde_json::Error> {
        let records = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// Owns the parameters and optimizer state of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub net: Caae,
    pub params: CaaeParams<f32>,
    opt_enc: Adam,
    opt_gen: Adam,
    opt_dz: Adam,
    opt_dimg: Adam,
    rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let net = Caae::new(config.arch())?;
        let params = net.init_params::<f32>(config.seed);
        let lr = config.learning_rate;
        Ok(Self {
            opt_enc: Adam::new(&params.encoder, lr),
            opt_gen: Adam::new(&params.generator, lr),
            opt_dz: Adam::new(&params.dz, lr),
            opt_dimg: Adam::new(&params.dimg, lr),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 5)),
            net,
            params,
            config,
            step: 0,
        })
    }

    /// One round of the alternation: image discriminator, latent
    /// discriminator, then encoder and generator against the updated
    /// discriminators. The autoencoder pass is computed once up front.
    pub fn train_step(&mut self, batch: &Batch<f32>) -> Result<LossReport, TrainError> {
        if batch.n == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let (net, p) = (&self.net, &mut self.params);
        let ae = autoencode(net, p, batch)?;

        let mut g = p.dimg.zeros_like();
        let adv_dimg = dimg_objective(net, p, batch, ae.xhat(), Some(&mut g))?;
        self.opt_dimg.step(&mut p.dimg, &g);

        let prior = sample_prior::<f32, _>(batch.n, net.arch.n_z, &mut self.rng);
        let mut g = p.dz.zeros_like();
        let adv_dz = dz_objective(net, p, &prior, ae.z(), batch.n, Some(&mut g))?;
        self.opt_dz.step(&mut p.dz, &g);

        let (mut ge, mut gg) = (p.encoder.zeros_like(), p.generator.zeros_like());
        let mut report = eg_objective(net, p, batch, &ae, &self.config.eg_options(), Some((&mut ge, &mut gg)))?;
        report.adv_dimg = adv_dimg;
        report.adv_dz = adv_dz;
        let step = self.step;
        if let Some((term, value)) = report.non_finite_term() {
            return Err(TrainError::NonFiniteLoss { step, term: term.into(), value });
        }
        self.opt_enc.step(&mut p.encoder, &ge);
        self.opt_gen.step(&mut p.generator, &gg);
        for (name, set) in [("encoder", &p.encoder), ("generator", &p.generator), ("dz", &p.dz), ("dimg", &p.dimg)] {
            if !set.all_finite() {
                return Err(TrainError::NonFiniteLoss { step, term: format!("{name} parameters"), value: f64::NAN });
            }
        }
        self.step += 1;
        Ok(report)
    }

    /// Runs `epochs × ⌈N / batch_size⌉` steps over a shuffled order. With an
    /// output directory, writes periodic checkpoints, the final checkpoint
    /// and the step log.
    pub fn fit(&mut self, data: &TrainingSet, out: Option<&Path>) -> Result<TrainLog, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if data.image_size != self.net.arch.image_size {
            return Err(TrainError::BadConfig(format!("images are {}px, config expects {}px", data.image_size, self.net.arch.image_size)));
        }
        let start = Instant::now();
        let mut log = TrainLog::default();
        let mut log_file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::io::BufWriter::new(std::fs::File::create(dir.join(TRAIN_LOG))?))
            }
            None => None,
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        let arch = self.net.arch.clone();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            for idx in order.chunks(self.config.batch_size) {
                let losses = self.train_step(&data.batch(&arch, idx))?;
                let rec = LogRecord { step: self.step, epoch, elapsed_ms: start.elapsed().as_millis() as u64, losses };
                if let Some(f) = log_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&rec).expect("log record serializes"))?;
                }
                log.records.push(rec);
                if let (Some(dir), k) = (out, self.config.checkpoint_every) {
                    if k > 0 && self.step.is_multiple_of(k) {
                        self.net.save_checkpoint(&self.params, &dir.join(format!("step-{:06}", self.step)))?;
                    }
                }
            }
            if let Some(last) = log.records.last() {
                log::info!("epoch {} done: recon {:.4} total {:.4}", epoch + 1, last.losses.recon, last.losses.total);
            }
        }
        if let Some(f) = log_file.as_mut() {
            f.flush()?;
        }
        if let Some(dir) = out {
            self.net.save_checkpoint(&self.params, &dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(log)
    }
}

/// Trains a fresh model from `config`.
pub fn train(config: &TrainConfig, data: &TrainingSet, out: Option<&Path>) -> Result<(Caae, CaaeParams<f32>, TrainLog), TrainError> {
    let mut t = Trainer::new(config.clone())?;
    let log = t.fit(data, out)?;
    Ok((t.net, t.params, log))
}

/// One face pushed through all ten age groups with a single latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct AgeSimulation {
    pub z: LatentCode,
    pub images: Vec<ImageTensor>,
}

pub fn simulate_ages(net: &Caae, params: &CaaeParams<f32>, x: &ImageTensor, sex: Sex) -> Result<AgeSimulation, NetError> {
    let z = net.encode(params, x)?;
    let images = (0..AGE_GROUPS)
        .map(|g| net.generate(params, &ConditionVector::new(&net.arch, &z.0, g, sex)))
        .collect::<Result<_, _>>()?;
    Ok(AgeSimulation { z, images })
}

/// Batched variant of [`simulate_ages`]: row `i` holds the ten simulations of
/// `inputs[i]`.
pub fn simulate_ages_batch(net: &Caae, params: &CaaeParams<f32>, inputs: &[(ImageTensor, Sex)]) -> Result<Vec<AgeSimulation>, NetError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(32) {
        let chw: Vec<f32> = chunk.iter().flat_map(|(x, _)| x.to_chw()).collect();
        for (x, _) in chunk {
            if x.size() != net.arch.image_size {
                return Err(ShapeError::Input { stack: "image".into(), expected: net.arch.image_len(), got: x.data().len() }.into());
            }
        }
        let z = net.encoder.infer(&params.encoder, &chw, chunk.len(), None)?;
        let n_z = net.arch.n_z;
        let mut cond = Vec::with_capacity(chunk.len() * AGE_GROUPS * net.arch.condition_len());
        for (i, (_, sex)) in chunk.iter().enumerate() {
            for g in 0..AGE_GROUPS {
                cond.extend(ConditionVector::new(&net.arch, &z[i * n_z..(i + 1) * n_z], g, *sex).0);
            }
        }
        let imgs = net.generator.infer(&params.generator, &cond, chunk.len() * AGE_GROUPS, None)?;
        let len = net.arch.image_len();
        for i in 0..chunk.len() {
            let images = (0..AGE_GROUPS)
                .map(|g| {
                    let k = i * AGE_GROUPS + g;
                    ImageTensor::from_chw(net.arch.image_size, &imgs[k * len..(k + 1) * len]).expect("generator output matches image shape")
                })
                .collect();
            out.push(AgeSimulation { z: LatentCode(z[i * n_z..(i + 1) * n_z].to_vec()), images });
        }
    }
    Ok(out)
}

/// Loads a checkpoint and simulates one face.
pub fn simulate_from_checkpoint(dir: &Path, x: &ImageTensor, sex: Sex) -> Result<AgeSimulation, NetError> {
    let (net, params) = Caae::load_checkpoint(dir)?;
    simulate_ages(&net, &params, x, sex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{render_synthetic_face, SyntheticFaceParams};

    fn small_config(size: usize) -> TrainConfig {
        let mut arch = ArchConfig::tiny(size);
        arch.encoder_channels = vec![4, 6];
        arch.generator_channels = vec![6, 4];
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            learning_rate: 1e-3,
            seed: 9,
            image_size: size,
            n_z: 6,
            architecture: Some(arch),
            ..TrainConfig::default()
        }
    }

    fn toy_set(size: usize, n: usize) -> TrainingSet {
        let mut set = TrainingSet::empty(size);
        for i in 0..n {
            let sex = if i % 2 == 0 { Sex::Male } else { Sex::Female };
            let age = 3 + 9 * (i as u32 % 10);
            let img = render_synthetic_face(&SyntheticFaceParams { identity_seed: i as u64 / 3, age, sex, size });
            set.push(&img, crate::dataset::age_to_group(age).unwrap(), sex, Some(i as u64 / 3));
        }
        set
    }

    #[test]
    fn prior_is_uniform_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = sample_prior(10_000, 1, &mut a);
        assert_eq!(x, sample_prior::<f64, _>(10_000, 1, &mut b));
        assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 4.0 / (3.0f64 * 10_000.0).sqrt(), "mean {mean}");
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data = toy_set(8, 8);
        let mut t = Trainer::new(small_config(8)).unwrap();
        for opt in [&mut t.opt_enc, &mut t.opt_gen, &mut t.opt_dz, &mut t.opt_dimg] {
            opt.lr = 0.0;
        }
        let before = t.params.clone();
        let batch = data.batch(&t.net.arch, &[0, 1, 2]);
        t.train_step(&batch).unwrap();
        for (a, b) in before.sets().iter().zip(t.params.sets()) {
            assert_eq!(a.digest(), b.digest());
        }
    }

    #[test]
    fn steps_are_deterministic_and_phases_touch_only_their_nets() {
        let data = toy_set(8, 8);
        let run = || {
            let mut t = Trainer::new(small_config(8)).unwrap();
            let batch = data.batch(&t.net.arch, &[0, 3, 5]);
            let r = t.train_step(&batch).unwrap();
            (r, t.params)
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);

        // The discriminator updates leave E and G alone and vice versa.
        let mut t = Trainer::new(small_config(8)).unwrap();
        let batch = data.batch(&t.net.arch, &[0, 3, 5]);
        let p0 = t.params.clone();
        let ae = autoencode(&t.net, &t.params, &batch).unwrap();
        let mut g = t.params.dimg.zeros_like();
        dimg_objective(&t.net, &t.params, &batch, ae.xhat(), Some(&mut g)).unwrap();
        t.opt_dimg.step(&mut t.params.dimg, &g);
        assert_eq!(p0.encoder.digest(), t.params.encoder.digest());
        assert_eq!(p0.generator.digest(), t.params.generator.digest());
        assert_ne!(p0.dimg.digest(), t.params.dimg.digest());
        let fm = p0.fm.digest();
        t.train_step(&batch).unwrap();
        assert_eq!(fm, t.params.fm.digest());
    }

    #[test]
    fn image_discriminator_overfits_one_batch() {
        let data = toy_set(8, 8);
        let mut cfg = small_config(8);
        cfg.weights = LossWeights { lambda: 0.0, gamma: 0.0, phi: 0.0 };
        let mut t = Trainer::new(cfg).unwrap();
        let batch = data.batch(&t.net.arch, &[0, 1, 2, 3]);
        let first = t.train_step(&batch).unwrap().adv_dimg;
        let mut last = first;
        for _ in 0..50 {
            last = t.train_step(&batch).unwrap().adv_dimg;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn fit_writes_checkpoints_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_set(8, 10);
        let mut cfg = small_config(8);
        cfg.checkpoint_every = 3;
        let (net, params, log) = train(&cfg, &data, Some(dir.path())).unwrap();
        assert_eq!(log.records.len(), 2 * 3);
        assert!(log.records.windows(2).all(|w| w[0].step < w[1].step));
        assert!(log.records.iter().all(|r| r.losses.non_finite_term().is_none()));
        assert!(dir.path().join("step-000003").join("manifest.json").exists());
        assert!(dir.path().join("step-000006").exists());
        assert_eq!(net.load_matching(&dir.path().join(FINAL_CHECKPOINT)).unwrap(), params);
        let text = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(TrainLog::from_ndjson(&text).unwrap(), log);

        let mut cfg0 = cfg.clone();
        cfg0.epochs = 0;
        let (net0, p0, log0) = train(&cfg0, &data, None).unwrap();
        assert!(log0.records.is_empty());
        assert_eq!(p0, net0.init_params::<f32>(cfg.seed));
    }

    #[test]
    fn simulation_reuses_one_code() {
        let t = Trainer::new(small_config(8)).unwrap();
        let x = toy_set(8, 1).image(0);
        let sim = simulate_ages(&t.net, &t.params, &x, Sex::Female).unwrap();
        assert_eq!(sim.images.len(), AGE_GROUPS);
        assert_eq!(sim.z, t.net.encode(&t.params, &x).unwrap());
        assert_eq!(sim, simulate_ages(&t.net, &t.params, &x, Sex::Female).unwrap());
        let batched = simulate_ages_batch(&t.net, &t.params, &[(x.clone(), Sex::Female)]).unwrap();
        for (a, b) in batched[0].images.iter().zip(&sim.images) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(8);
        c.batch_size = 0;
        assert!(matches!(Trainer::new(c), Err(TrainError::BadConfig(_))));
        let mut c = small_config(8);
        c.learning_rate = 0.0;
        assert!(Trainer::new(c).is_err());
        let mut c = small_config(8);
        c.ablation.gender_on = false;
        assert_eq!(c.arch().gender_tiles, 0);
    }
}
