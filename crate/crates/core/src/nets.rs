//! The five networks of the model: encoder, generator, latent discriminator,
//! image discriminator and the frozen feature extractor.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::dataset::{age_one_hot, mix_seed, ImageTensor, Sex, AGE_GROUPS, CHANNELS};
use crate::nn::{ConvSpec, Layer, ParamSet, Shape3, ShapeError, Stack};
use crate::tensor::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    ShapeMismatch(#[from] ShapeError),
    #[error("bad architecture config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Layer widths and conditioning layout. Every convolutional stack halves the
/// spatial size per block, so `image_size` must be divisible by `2^blocks`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub image_size: usize,
    pub n_z: usize,
    pub encoder_channels: Vec<usize>,
    /// First entry is the width after the input projection.
    pub generator_channels: Vec<usize>,
    pub dimg_channels: Vec<usize>,
    pub dz_hidden: Vec<usize>,
    pub fm_channels: Vec<usize>,
    /// Repetitions of the age one-hot inside condition vectors.
    pub label_tiles: usize,
    /// Repetitions of the gender one-hot; 0 drops the gender label entirely.
    pub gender_tiles: usize,
    /// Seed of the frozen feature extractor, independent of the training seed.
    pub fm_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_z: 50,
            encoder_channels: vec![8, 16, 32, 32],
            generator_channels: vec![32, 32, 16, 8],
            dimg_channels: vec![8, 16, 32, 32],
            dz_hidden: vec![64, 32],
            fm_channels: vec![16, 32, 64, 64],
            label_tiles: 1,
            gender_tiles: 1,
            fm_seed: 0x5EED_F00D,
        }
    }
}

impl ArchConfig {
    /// A configuration small enough for finite-difference checks.
    pub fn tiny(image_size: usize) -> Self {
        Self {
            image_size,
            n_z: 6,
            encoder_channels: vec![3, 4],
            generator_channels: vec![4, 3],
            dimg_channels: vec![3, 4],
            dz_hidden: vec![8],
            fm_channels: vec![3, 4],
            label_tiles: 1,
            gender_tiles: 1,
            fm_seed: 17,
        }
    }

    /// Length of `[z, l, s]` fed to the generator.
    pub fn condition_len(&self) -> usize {
        self.n_z + self.label_len()
    }

    /// Length of the tiled `[l, s]` part of the generator input.
    pub fn label_len(&self) -> usize {
        AGE_GROUPS * self.label_tiles + 2 * self.gender_tiles
    }

    /// Number of label planes appended inside the image discriminator: one
    /// per age group plus two when the gender label is enabled.
    pub fn plane_label_len(&self) -> usize {
        AGE_GROUPS + if self.gender_enabled() { 2 } else { 0 }
    }

    pub fn gender_enabled(&self) -> bool {
        self.gender_tiles > 0
    }

    pub fn image_shape(&self) -> Shape3 {
        Shape3::new(CHANNELS, self.image_size, self.image_size)
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().len()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::BadConfig(m));
        if self.n_z == 0 || self.image_size == 0 {
            return bad("n_z and image_size must be positive".into());
        }
        if self.label_tiles == 0 {
            return bad("label_tiles must be at least 1".into());
        }
        for (name, ch) in [
            ("encoder_channels", &self.encoder_channels),
            ("generator_channels", &self.generator_channels),
            ("dimg_channels", &self.dimg_channels),
            ("fm_channels", &self.fm_channels),
        ] {
            if ch.is_empty() || ch.contains(&0) {
                return bad(format!("{name} must be a non-empty list of positive widths"));
            }
            let scale = 1usize << ch.len().min(20);
            if !self.image_size.is_multiple_of(scale) {
                return bad(format!("image_size {} is not divisible by 2^{} ({name})", self.image_size, ch.len()));
            }
        }
        if self.dz_hidden.contains(&0) {
            return bad("dz_hidden widths must be positive".into());
        }
        Ok(())
    }
}

fn down(cin: usize, cout: usize) -> Layer {
    Layer::Conv(ConvSpec { cin, cout, kernel: 3, stride: 2, pad: 1 })
}

fn up(cin: usize, cout: usize) -> Layer {
    Layer::Deconv(ConvSpec { cin, cout, kernel: 4, stride: 2, pad: 1 })
}

/// Strided conv blocks each followed by a leaky rectifier.
fn conv_blocks(input: usize, widths: &[usize]) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut c = input;
    for &w in widths {
        layers.push(down(c, w));
        layers.push(Layer::LeakyRelu);
        c = w;
    }
    layers
}

/// Plain strided classifier/embedding trunk ending in a dense projection.
pub fn conv_head(name: &str, image_size: usize, widths: &[usize], out: usize) -> Result<Stack, ShapeError> {
    let mut layers = conv_blocks(CHANNELS, widths);
    let side = image_size >> widths.len();
    layers.push(Layer::Dense { din: widths.last().copied().unwrap_or(CHANNELS) * side * side, dout: out });
    Stack::new(name, Shape3::new(CHANNELS, image_size, image_size), layers)
}

/// Network graphs for one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Caae {
    pub arch: ArchConfig,
    pub encoder: Stack,
    pub generator: Stack,
    pub dz: Stack,
    pub dimg: Stack,
    pub fm: Stack,
}

/// Parameters of all five networks.
#[derive(Clone, Debug, PartialEq)]
pub struct CaaeParams<T> {
    pub encoder: ParamSet<T>,
    pub generator: ParamSet<T>,
    pub dz: ParamSet<T>,
    pub dimg: ParamSet<T>,
    pub fm: ParamSet<T>,
}

impl<T: Scalar> CaaeParams<T> {
    pub fn cast<U: Scalar>(&self) -> CaaeParams<U> {
        CaaeParams {
            encoder: self.encoder.cast(),
            generator: self.generator.cast(),
            dz: self.dz.cast(),
            dimg: self.dimg.cast(),
            fm: self.fm.cast(),
        }
    }

    pub fn sets(&self) -> [&ParamSet<T>; 5] {
        [&self.encoder, &self.generator, &self.dz, &self.dimg, &self.fm]
    }

    pub fn all_finite(&self) -> bool {
        self.sets().iter().all(|s| s.all_finite())
    }
}

/// Encoder output `z`; every component lies in `(-1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Vec<f32>);

/// Generator input `[z, l, s]` with the configured label tiling.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector(pub Vec<f32>);

impl ConditionVector {
    pub fn new(arch: &ArchConfig, z: &[f32], group: usize, sex: Sex) -> Self {
        let mut v = Vec::with_capacity(arch.condition_len());
        v.extend_from_slice(z);
        v.extend(label_vector(arch, group, sex));
        Self(v)
    }
}

/// `[l × label_tiles, s × gender_tiles]`.
pub fn label_vector(arch: &ArchConfig, group: usize, sex: Sex) -> Vec<f32> {
    let mut v = Vec::with_capacity(arch.label_len());
    let l = age_one_hot(group);
    for _ in 0..arch.label_tiles {
        v.extend_from_slice(&l);
    }
    let s = sex.one_hot();
    for _ in 0..arch.gender_tiles {
        v.extend_from_slice(&s);
    }
    v
}

/// Untiled `[l, s]` for the image discriminator; `s` is omitted when the
/// gender label is disabled.
pub fn plane_labels(arch: &ArchConfig, group: usize, sex: Sex) -> Vec<f32> {
    let mut v = age_one_hot(group).to_vec();
    if arch.gender_enabled() {
        v.extend_from_slice(&sex.one_hot());
    }
    v
}

pub fn sigmoid(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

impl Caae {
    pub fn new(arch: ArchConfig) -> Result<Self, NetError> {
        arch.validate()?;
        let s = arch.image_size;
        let img = arch.image_shape();

        let mut enc = conv_blocks(CHANNELS, &arch.encoder_channels);
        let side = s >> arch.encoder_channels.len();
        enc.push(Layer::Dense { din: arch.encoder_channels.last().unwrap() * side * side, dout: arch.n_z });
        enc.push(Layer::Tanh);
        let encoder = Stack::new("encoder", img, enc)?;

        let g = &arch.generator_channels;
        let side = s >> g.len();
        let mut gen = vec![
            Layer::Dense { din: arch.condition_len(), dout: g[0] * side * side },
            Layer::Reshape(Shape3::new(g[0], side, side)),
            Layer::LeakyRelu,
        ];
        for w in g.windows(2) {
            gen.push(up(w[0], w[1]));
            gen.push(Layer::LeakyRelu);
        }
        gen.push(up(*g.last().unwrap(), CHANNELS));
        gen.push(Layer::Tanh);
        let generator = Stack::new("generator", Shape3::flat(arch.condition_len()), gen)?;
        if generator.output_shape() != img {
            return Err(NetError::BadConfig(format!("generator produces {:?}, expected {img:?}", generator.output_shape())));
        }

        let mut dz_layers = Vec::new();
        let mut c = arch.n_z;
        for &h in &arch.dz_hidden {
            dz_layers.push(Layer::Dense { din: c, dout: h });
            dz_layers.push(Layer::LeakyRelu);
            c = h;
        }
        dz_layers.push(Layer::Dense { din: c, dout: 1 });
        let dz = Stack::new("dz", Shape3::flat(arch.n_z), dz_layers)?;

        // Labels enter as constant planes right after the first conv block.
        let d = &arch.dimg_channels;
        let mut di = vec![down(CHANNELS, d[0]), Layer::LeakyRelu, Layer::ConcatCond { channels: arch.plane_label_len() }];
        let mut c = d[0] + arch.plane_label_len();
        for &w in &d[1..] {
            di.push(down(c, w));
            di.push(Layer::LeakyRelu);
            c = w;
        }
        let side = s >> d.len();
        di.push(Layer::Dense { din: c * side * side, dout: 1 });
        let dimg = Stack::new("dimg", img, di)?;

        let fm = Stack::new("fm", img, conv_blocks(CHANNELS, &arch.fm_channels))?;
        Ok(Self { arch, encoder, generator, dz, dimg, fm })
    }

    /// Seeded initialization. The feature extractor always comes from
    /// `arch.fm_seed`, so models that differ only in training seed share it.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> CaaeParams<T> {
        let rng = |k: u64| ChaCha8Rng::seed_from_u64(mix_seed(seed, k));
        CaaeParams {
            encoder: self.encoder.init_params(&mut rng(1)),
            generator: self.generator.init_params(&mut rng(2)),
            dz: self.dz.init_params(&mut rng(3)),
            dimg: self.dimg.init_params(&mut rng(4)),
            fm: self.fm.init_params(&mut ChaCha8Rng::seed_from_u64(self.arch.fm_seed)),
        }
    }

    fn check_image(&self, x: &ImageTensor) -> Result<(), NetError> {
        if x.size() != self.arch.image_size {
            return Err(ShapeError::Input { stack: "image".into(), expected: self.arch.image_len(), got: x.data().len() }.into());
        }
        Ok(())
    }

    pub fn encode(&self, p: &CaaeParams<f32>, x: &ImageTensor) -> Result<LatentCode, NetError> {
        self.check_image(x)?;
        Ok(LatentCode(self.encoder.infer(&p.encoder, &x.to_chw(), 1, None)?))
    }

    pub fn generate(&self, p: &CaaeParams<f32>, c: &ConditionVector) -> Result<ImageTensor, NetError> {
        let out = self.generator.infer(&p.generator, &c.0, 1, None)?;
        Ok(ImageTensor::from_chw(self.arch.image_size, &out).expect("generator output matches image shape"))
    }

    pub fn dz_logit(&self, p: &CaaeParams<f32>, z: &[f32]) -> Result<f64, NetError> {
        Ok(self.dz.infer(&p.dz, z, 1, None)?[0] as f64)
    }

    /// Probability that `z` was drawn from the prior.
    pub fn dz_score(&self, p: &CaaeParams<f32>, z: &[f32]) -> Result<f64, NetError> {
        Ok(sigmoid(self.dz_logit(p, z)?))
    }

    pub fn dimg_logit(&self, p: &CaaeParams<f32>, x: &ImageTensor, group: usize, sex: Sex) -> Result<f64, NetError> {
        self.check_image(x)?;
        let cond = plane_labels(&self.arch, group, sex);
        Ok(self.dimg.infer(&p.dimg, &x.to_chw(), 1, Some(&cond))?[0] as f64)
    }

    /// Probability that `x` is a real face of age group `group` and sex `sex`.
    pub fn dimg_score(&self, p: &CaaeParams<f32>, x: &ImageTensor, group: usize, sex: Sex) -> Result<f64, NetError> {
        Ok(sigmoid(self.dimg_logit(p, x, group, sex)?))
    }

    /// Flattened activations of the last block of the frozen extractor.
    pub fn feature_map(&self, p: &CaaeParams<f32>, x: &ImageTensor) -> Result<Vec<f32>, NetError> {
        self.check_image(x)?;
        Ok(self.fm.infer(&p.fm, &x.to_chw(), 1, None)?)
    }

    /// Checks that every array of `p` has the layout these graphs expect.
    pub fn check_params<T: Scalar>(&self, p: &CaaeParams<T>) -> Result<(), NetError> {
        for (stack, set) in [(&self.encoder, &p.encoder), (&self.generator, &p.generator), (&self.dz, &p.dz), (&self.dimg, &p.dimg), (&self.fm, &p.fm)] {
            let layout = stack.param_layout();
            let ok = layout.len() == set.tensors.len()
                && layout.iter().zip(&set.tensors).all(|((n, s), t)| n == &t.name && s == &t.shape && t.data.len() == s.iter().product::<usize>());
            if !ok {
                return Err(ShapeError::Params { stack: stack.name.clone() }.into());
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, p: &CaaeParams<f32>, dir: &Path) -> Result<(), NetError> {
        let meta = serde_json::json!({ "kind": "caae", "arch": self.arch });
        checkpoint::save(dir, &meta, &p.sets())?;
        Ok(())
    }

    /// Loads a checkpoint and rebuilds the graphs from its stored architecture.
    pub fn load_checkpoint(dir: &Path) -> Result<(Self, CaaeParams<f32>), NetError> {
        let (meta, arrays) = checkpoint::load(dir)?;
        let arch: ArchConfig = serde_json::from_value(meta.get("arch").cloned().unwrap_or_default())
            .map_err(|e| CheckpointError::Corrupt(format!("architecture record: {e}")))?;
        let net = Self::new(arch)?;
        let params = net.params_from_arrays(arrays)?;
        Ok((net, params))
    }

    /// Loads a checkpoint that must match this architecture exactly.
    pub fn load_matching(&self, dir: &Path) -> Result<CaaeParams<f32>, NetError> {
        let (meta, arrays) = checkpoint::load(dir)?;
        let arch: Option<ArchConfig> = meta.get("arch").cloned().and_then(|a| serde_json::from_value(a).ok());
        if arch.as_ref() != Some(&self.arch) {
            return Err(CheckpointError::Corrupt("architecture differs from the requested config".into()).into());
        }
        self.params_from_arrays(arrays)
    }

    fn params_from_arrays(&self, mut arrays: Vec<crate::nn::ParamTensor<f32>>) -> Result<CaaeParams<f32>, NetError> {
        let mut take = |stack: &Stack| checkpoint::take_set(&mut arrays, &stack.param_layout());
        let p = CaaeParams {
            encoder: take(&self.encoder)?,
            generator: take(&self.generator)?,
            dz: take(&self.dz)?,
            dimg: take(&self.dimg)?,
            fm: take(&self.fm)?,
        };
        if let Some(extra) = arrays.first() {
            return Err(CheckpointError::Corrupt(format!("unexpected array `{}`", extra.name)).into());
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{render_synthetic_face, SyntheticFaceParams};

    fn face(size: usize, seed: u64) -> ImageTensor {
        render_synthetic_face(&SyntheticFaceParams { identity_seed: seed, age: 30, sex: Sex::Female, size })
    }

    #[test]
    fn default_architecture_shapes() {
        let net = Caae::new(ArchConfig::default()).unwrap();
        let p: CaaeParams<f32> = net.init_params(1);
        let x = face(64, 3);
        let z = net.encode(&p, &x).unwrap();
        assert_eq!(z.0.len(), 50);
        assert!(z.0.iter().all(|v| v.abs() < 1.0));
        let img = net.generate(&p, &ConditionVector::new(&net.arch, &z.0, 4, Sex::Male)).unwrap();
        assert_eq!(img.size(), 64);
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(net.feature_map(&p, &x).unwrap().len(), 64 * 4 * 4);
        let s = net.dimg_score(&p, &x, 4, Sex::Female).unwrap();
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn forward_passes_are_deterministic_and_finite() {
        let net = Caae::new(ArchConfig::default()).unwrap();
        let p: CaaeParams<f32> = net.init_params(2);
        let zero = ImageTensor::filled(64, 0.0);
        let a = net.encode(&p, &zero).unwrap();
        assert_eq!(a, net.encode(&p, &zero).unwrap());
        assert!(a.0.iter().all(|v| v.is_finite()));
        assert!(net.feature_map(&p, &zero).unwrap().iter().all(|v| v.is_finite()));
        assert_eq!(net.feature_map(&p, &zero).unwrap(), net.feature_map(&p, &zero).unwrap());
        let dz0 = net.dz_score(&p, &[0.0; 50]).unwrap();
        assert!(dz0.is_finite() && dz0 > 0.0 && dz0 < 1.0);
        for corner in [-1.0, 1.0] {
            let img = ImageTensor::filled(64, corner);
            let logit = net.dimg_logit(&p, &img, 9, Sex::Male).unwrap();
            assert!(logit.is_finite());
            let score = net.dimg_score(&p, &img, 0, Sex::Female).unwrap();
            assert!(score > 0.0 && score < 1.0);
            assert!(net.dz_logit(&p, &[corner; 50]).unwrap().is_finite());
        }
    }

    #[test]
    fn one_pixel_changes_the_feature_map() {
        let net = Caae::new(ArchConfig::default()).unwrap();
        let p: CaaeParams<f32> = net.init_params(0);
        let x = face(64, 5);
        let mut data = x.data().to_vec();
        data[(40 * 64 + 21) * 3 + 1] = -data[(40 * 64 + 21) * 3 + 1] + 0.01;
        let y = ImageTensor::new(64, data).unwrap();
        assert_ne!(net.feature_map(&p, &x).unwrap(), net.feature_map(&p, &y).unwrap());
    }

    #[test]
    fn init_is_seeded() {
        let net = Caae::new(ArchConfig::default()).unwrap();
        let a: CaaeParams<f32> = net.init_params(7);
        assert_eq!(a, net.init_params(7));
        let b: CaaeParams<f32> = net.init_params(8);
        assert_ne!(a.encoder, b.encoder);
        assert_eq!(a.fm, b.fm, "feature extractor does not depend on the training seed");
        assert!(a.all_finite());
        for set in a.sets() {
            for t in &set.tensors {
                if t.name.ends_with(".bias") {
                    assert!(t.data.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn all_condition_combinations_have_valid_shapes() {
        let net = Caae::new(ArchConfig { image_size: 32, ..ArchConfig::default() }).unwrap();
        let p: CaaeParams<f32> = net.init_params(3);
        let z = net.encode(&p, &face(32, 1)).unwrap();
        for group in 0..AGE_GROUPS {
            for sex in Sex::ALL {
                let c = ConditionVector::new(&net.arch, &z.0, group, sex);
                assert_eq!(c.0.len(), 50 + 12);
                let img = net.generate(&p, &c).unwrap();
                assert_eq!(img.size(), 32);
                assert_eq!(net.encode(&p, &img).unwrap().0.len(), 50);
            }
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(matches!(Caae::new(ArchConfig { image_size: 60, ..ArchConfig::default() }), Err(NetError::BadConfig(_))));
        assert!(matches!(Caae::new(ArchConfig { encoder_channels: vec![], ..ArchConfig::default() }), Err(NetError::BadConfig(_))));
        assert!(matches!(Caae::new(ArchConfig { n_z: 0, ..ArchConfig::default() }), Err(NetError::BadConfig(_))));
        let net = Caae::new(ArchConfig::default()).unwrap();
        let p: CaaeParams<f32> = net.init_params(0);
        assert!(matches!(net.encode(&p, &face(32, 1)), Err(NetError::ShapeMismatch(_))));
    }

    #[test]
    fn gender_free_architecture_drops_the_label() {
        let arch = ArchConfig { gender_tiles: 0, label_tiles: 2, ..ArchConfig::tiny(4) };
        assert_eq!(arch.condition_len(), 6 + 20);
        assert_eq!(label_vector(&arch, 3, Sex::Male), label_vector(&arch, 3, Sex::Female));
        let c = ConditionVector::new(&arch, &[0.5; 6], 3, Sex::Female);
        assert_eq!(c.0[6 + 3], 1.0);
        assert_eq!(c.0[16 + 3], 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let net = Caae::new(ArchConfig::tiny(8)).unwrap();
        let p: CaaeParams<f32> = net.init_params(4);
        net.save_checkpoint(&p, dir.path()).unwrap();
        let (net2, q) = Caae::load_checkpoint(dir.path()).unwrap();
        assert_eq!(net2, net);
        assert_eq!(q, p);
        assert_eq!(net.load_matching(dir.path()).unwrap(), p);

        let other = Caae::new(ArchConfig { n_z: 7, ..ArchConfig::tiny(8) }).unwrap();
        assert!(matches!(other.load_matching(dir.path()), Err(NetError::Checkpoint(CheckpointError::Corrupt(_)))));

        let weights = dir.path().join("weights.bin");
        let bytes = std::fs::read(&weights).unwrap();
        std::fs::write(&weights, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Caae::load_checkpoint(dir.path()), Err(NetError::Checkpoint(CheckpointError::Corrupt(_)))));
    }
}
