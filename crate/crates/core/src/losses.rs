//! Loss terms of the training objective and their composition.
//!
//! The public functions take probabilities, guard their domain and floor every
//! logarithm at [`LOG_FLOOR`]. Training uses the `*_logits` forms, which
//! compute the same quantities from discriminator logits without ever
//! materializing a saturated probability.

use serde::{Deserialize, Serialize};

use crate::dataset::ImageTensor;
use crate::tensor::Scalar;

pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("operands have {0} and {1} elements")]
    ShapeMismatch(usize, usize),
    #[error("score {0} is outside the open interval (0, 1)")]
    DomainError(f64),
    #[error("no scores given")]
    Empty,
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Reconstruction weight.
    pub lambda: f64,
    /// Total-variation weight.
    pub gamma: f64,
    /// Feature-map (identity) weight.
    pub phi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 100.0, gamma: 10.0, phi: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("phi", self.phi)] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Which extensions of the baseline model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub gender_on: bool,
    pub vgg_on: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation { gender_on: true, vgg_on: true };
    pub const BASELINE: Ablation = Ablation { gender_on: false, vgg_on: false };
}

/// Per-batch loss components. `adv_dz`/`adv_dimg` are the discriminators'
/// own losses; `total` is the encoder/generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub tv: f64,
    pub adv_dz: f64,
    pub adv_dimg: f64,
    pub adv_gen_z: f64,
    pub adv_gen_img: f64,
    pub feat: f64,
    pub total: f64,
}

impl LossReport {
    /// First non-finite component, by name.
    pub fn non_finite_term(&self) -> Option<(&'static str, f64)> {
        [
            ("recon", self.recon),
            ("tv", self.tv),
            ("adv_dz", self.adv_dz),
            ("adv_dimg", self.adv_dimg),
            ("adv_gen_z", self.adv_gen_z),
            ("adv_gen_img", self.adv_gen_img),
            ("feat", self.feat),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

fn mse<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LossError::ShapeMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (x.to_f64() - y.to_f64()).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// Mean squared elementwise difference.
pub fn reconstruction_loss(x: &ImageTensor, xhat: &ImageTensor) -> Result<f64> {
    mse(x.data(), xhat.data())
}

/// Mean squared error over raw buffers of any layout.
pub fn mean_squared_error<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    mse(a, b)
}

/// Gradient of [`mean_squared_error`] with respect to `pred`, scaled by `scale`.
pub fn mse_grad<T: Scalar>(pred: &[T], target: &[T], scale: f64) -> Vec<f64> {
    let k = 2.0 * scale / pred.len().max(1) as f64;
    pred.iter().zip(target).map(|(&p, &t)| k * (p.to_f64() - t.to_f64())).collect()
}

/// Squared-difference total variation of one `c×h×w` image: the sum over
/// horizontal and vertical neighbour pairs, divided by the pixel count `h·w`.
pub fn tv_chw<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> f64 {
    assert_eq!(x.len(), c * h * w);
    let mut sum = 0.0;
    for plane in x.chunks_exact(h * w) {
        for y in 0..h {
            for xx in 0..w {
                let v = plane[y * w + xx].to_f64();
                if xx + 1 < w {
                    sum += (plane[y * w + xx + 1].to_f64() - v).powi(2);
                }
                if y + 1 < h {
                    sum += (plane[(y + 1) * w + xx].to_f64() - v).powi(2);
                }
            }
        }
    }
    sum / (h * w) as f64
}

/// Adds `scale · ∂tv/∂x` into `grad`.
pub fn tv_chw_grad<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, scale: f64, grad: &mut [f64]) {
    let k = 2.0 * scale / (h * w) as f64;
    for ci in 0..c {
        let off = ci * h * w;
        for y in 0..h {
            for xx in 0..w {
                let p = off + y * w + xx;
                let v = x[p].to_f64();
                if xx + 1 < w {
                    let d = x[p + 1].to_f64() - v;
                    grad[p + 1] += k * d;
                    grad[p] -= k * d;
                }
                if y + 1 < h {
                    let d = x[p + w].to_f64() - v;
                    grad[p + w] += k * d;
                    grad[p] -= k * d;
                }
            }
        }
    }
}

pub fn tv_loss(x: &ImageTensor) -> f64 {
    let s = x.size();
    tv_chw(&x.to_chw(), crate::dataset::CHANNELS, s, s)
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(LossError::Empty);
    }
    match scores.iter().find(|&&s| !(s > 0.0 && s < 1.0)) {
        Some(&bad) => Err(LossError::DomainError(bad)),
        None => Ok(()),
    }
}

fn mean_neg_log(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    -values.map(|v| v.max(LOG_FLOOR).ln()).sum::<f64>() / n as f64
}

/// `−mean(log real) − mean(log(1 − fake))` for either discriminator.
pub fn discriminator_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    check_scores(real_scores)?;
    check_scores(fake_scores)?;
    Ok(mean_neg_log(real_scores.iter().copied(), real_scores.len())
        + mean_neg_log(fake_scores.iter().map(|f| 1.0 - f), fake_scores.len()))
}

pub fn dz_discriminator_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    discriminator_loss(real_scores, fake_scores)
}

pub fn dimg_discriminator_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    discriminator_loss(real_scores, fake_scores)
}

/// Non-saturating generator loss `−mean(log fake)`.
pub fn generator_adversarial_loss(fake_scores: &[f64]) -> Result<f64> {
    check_scores(fake_scores)?;
    Ok(mean_neg_log(fake_scores.iter().copied(), fake_scores.len()))
}

/// Literal minimax form `mean(log(1 − fake))`, minimized by the generator.
pub fn generator_adversarial_loss_saturating(fake_scores: &[f64]) -> Result<f64> {
    check_scores(fake_scores)?;
    Ok(-mean_neg_log(fake_scores.iter().map(|f| 1.0 - f), fake_scores.len()))
}

/// Mean squared difference of two feature vectors.
pub fn feature_loss(fm_x: &[f32], fm_xhat: &[f32]) -> Result<f64> {
    mse(fm_x, fm_xhat)
}

/// Encoder/generator objective:
/// `λ·recon + γ·tv + adv_gen_z + adv_gen_img + φ·feat`, with `φ` forced to 0
/// when the feature term is ablated.
pub fn compose_eg_loss(parts: &LossReport, w: &LossWeights, ablation: Ablation) -> f64 {
    let phi = if ablation.vgg_on { w.phi } else { 0.0 };
    w.lambda * parts.recon + w.gamma * parts.tv + parts.adv_gen_z + parts.adv_gen_img + phi * parts.feat
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean of `−log σ(l)` over logits labelled real, with `∂/∂l`.
pub fn real_logit_loss(logits: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len().max(1) as f64;
    let loss = logits.iter().map(|&l| softplus(-l)).sum::<f64>() / n;
    let grad = logits.iter().map(|&l| -crate::nets::sigmoid(-l) / n).collect();
    (loss, grad)
}

/// Mean of `−log(1 − σ(l))` over logits labelled fake, with `∂/∂l`.
pub fn fake_logit_loss(logits: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len().max(1) as f64;
    let loss = logits.iter().map(|&l| softplus(l)).sum::<f64>() / n;
    let grad = logits.iter().map(|&l| crate::nets::sigmoid(l) / n).collect();
    (loss, grad)
}

/// Generator-side adversarial term from logits of generated samples.
pub fn generator_logit_loss(logits: &[f64], saturating: bool) -> (f64, Vec<f64>) {
    if saturating {
        let (l, g) = fake_logit_loss(logits);
        (-l, g.into_iter().map(|v| -v).collect())
    } else {
        real_logit_loss(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn worked_values() {
        assert_eq!(mean_squared_error(&[0.0f64; 4], &[1.0; 4]).unwrap(), 1.0);
        let tv = tv_chw(&[0.0f64, 1.0, 0.0, 1.0], 1, 2, 2);
        assert_eq!(tv, 0.5);
        assert!((discriminator_loss(&[0.5], &[0.5]).unwrap() - 1.386_294_361_119_890_6).abs() < 1e-12);
        let tight = discriminator_loss(&[1.0 - 1e-9], &[1e-9]).unwrap();
        assert!((tight - 2e-9).abs() < 1e-15, "{tight}");
        assert!((generator_adversarial_loss(&[0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((generator_adversarial_loss(&[1.0 - 1e-9]).unwrap() - 1e-9).abs() < 1e-15);
    }

    #[test]
    fn identities() {
        let img = ImageTensor::filled(8, 0.3);
        assert_eq!(reconstruction_loss(&img, &img).unwrap(), 0.0);
        assert_eq!(tv_loss(&img), 0.0);
        assert_eq!(feature_loss(&[0.1, 2.0], &[0.1, 2.0]).unwrap(), 0.0);
        assert_eq!(compose_eg_loss(&LossReport::default(), &LossWeights::default(), Ablation::FULL), 0.0);
        let parts = LossReport { recon: 1.0, ..Default::default() };
        assert_eq!(compose_eg_loss(&parts, &LossWeights::default(), Ablation::BASELINE), 100.0);
    }

    #[test]
    fn domain_guards() {
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(discriminator_loss(&[bad], &[0.5]), Err(LossError::DomainError(_))));
            assert!(matches!(discriminator_loss(&[0.5], &[bad]), Err(LossError::DomainError(_))));
            assert!(matches!(generator_adversarial_loss(&[bad]), Err(LossError::DomainError(_))));
        }
        assert_eq!(generator_adversarial_loss(&[]), Err(LossError::Empty));
        assert!(matches!(mean_squared_error(&[0.0f32; 3], &[0.0; 4]), Err(LossError::ShapeMismatch(3, 4))));
    }

    /// Scalar-loop oracles written independently of the functions above.
    #[test]
    fn random_inputs_match_scalar_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut acc = 0.0;
            for i in 0..n {
                let d = a[i] - b[i];
                acc += d * d;
            }
            assert!(rel(mean_squared_error(&a, &b).unwrap(), acc / n as f64) < 1e-12);

            let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let img: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tv = 0.0;
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let at = |yy: usize, xx: usize| img[c * h * w + yy * w + xx];
                        if x + 1 < w {
                            tv += (at(y, x + 1) - at(y, x)).powi(2);
                        }
                        if y + 1 < h {
                            tv += (at(y + 1, x) - at(y, x)).powi(2);
                        }
                    }
                }
            }
            let got = tv_chw(&img, 3, h, w);
            assert!(got == 0.0 && tv == 0.0 || rel(got, tv / (h * w) as f64) < 1e-12);

            let real: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
            let fake: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
            let mut lr = 0.0;
            let mut lf = 0.0;
            let mut lg = 0.0;
            for i in 0..n {
                lr -= real[i].ln();
                lf -= (1.0 - fake[i]).ln();
                lg -= fake[i].ln();
            }
            let oracle_d = lr / n as f64 + lf / n as f64;
            assert!(rel(dz_discriminator_loss(&real, &fake).unwrap(), oracle_d) < 1e-12);
            assert!(rel(dimg_discriminator_loss(&real, &fake).unwrap(), oracle_d) < 1e-12);
            assert!(rel(generator_adversarial_loss(&fake).unwrap(), lg / n as f64) < 1e-12);

            let fa: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let fb: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut ff = 0.0;
            for i in 0..n {
                ff += (fa[i] as f64 - fb[i] as f64).powi(2);
            }
            let got = feature_loss(&fa, &fb).unwrap();
            assert!(rel(got, ff / n as f64) < 1e-12);
            assert_eq!(got, feature_loss(&fb, &fa).unwrap());

            let parts = LossReport {
                recon: rng.gen(),
                tv: rng.gen(),
                adv_gen_z: rng.gen(),
                adv_gen_img: rng.gen(),
                feat: rng.gen(),
                ..Default::default()
            };
            let wts = LossWeights { lambda: rng.gen_range(0.0..200.0), gamma: rng.gen_range(0.0..20.0), phi: rng.gen_range(0.0..1.0) };
            let hand = wts.lambda * parts.recon + wts.gamma * parts.tv + parts.adv_gen_z + parts.adv_gen_img + wts.phi * parts.feat;
            assert!(rel(compose_eg_loss(&parts, &wts, Ablation::FULL), hand) < 1e-12);
            let hand_nov = hand - wts.phi * parts.feat;
            assert!(rel(compose_eg_loss(&parts, &wts, Ablation { gender_on: true, vgg_on: false }), hand_nov) < 1e-12);
        }
    }

    #[test]
    fn logit_forms_agree_with_probability_forms() {
        let logits = [-4.0, -0.3, 0.0, 1.7, 6.0];
        let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        let (r, _) = real_logit_loss(&logits);
        let (f, _) = fake_logit_loss(&logits);
        assert!(rel(r + f, discriminator_loss(&probs, &probs).unwrap()) < 1e-12);
        let (g, _) = generator_logit_loss(&logits, false);
        assert!(rel(g, generator_adversarial_loss(&probs).unwrap()) < 1e-12);
        let (gs, _) = generator_logit_loss(&logits, true);
        assert!(rel(gs, generator_adversarial_loss_saturating(&probs).unwrap()) < 1e-12);
        // Saturated logits stay finite where the probability form would hit the floor.
        let (big, grad) = real_logit_loss(&[-800.0]);
        assert!((big - 800.0).abs() < 1e-9 && grad[0].is_finite());
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let logits = [-2.0, 0.4, 3.0];
        for f in [real_logit_loss, fake_logit_loss] {
            let (_, g) = f(&logits);
            for i in 0..3 {
                let mut up = logits;
                up[i] += 1e-6;
                let mut dn = logits;
                dn[i] -= 1e-6;
                let fd = (f(&up).0 - f(&dn).0) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut g = vec![0.0; x.len()];
        tv_chw_grad(&x, 2, 3, 4, 1.0, &mut g);
        for i in 0..x.len() {
            let mut up = x.clone();
            up[i] += 1e-6;
            let mut dn = x.clone();
            dn[i] -= 1e-6;
            let fd = (tv_chw(&up, 2, 3, 4) - tv_chw(&dn, 2, 3, 4)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
