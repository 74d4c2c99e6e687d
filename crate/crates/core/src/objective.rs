//! Batched forward passes and analytic gradients of the three training
//! objectives. Everything is generic over the scalar type so the same code
//! serves `f32` training and `f64` gradient checks.

use crate::dataset::{Sex, CHANNELS};
use crate::losses::{self, compose_eg_loss, generator_logit_loss, mse_grad, tv_chw, tv_chw_grad, Ablation, LossReport, LossWeights};
use crate::nets::{label_vector, plane_labels, ArchConfig, Caae, CaaeParams};
use crate::nn::{ParamSet, ShapeError, Tape};
use crate::tensor::{cast_slice, Scalar};

/// A batch of channel-major images with their labels: tiled for the
/// generator, untiled for the image discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub n: usize,
    pub images: Vec<T>,
    pub labels: Vec<T>,
    pub plane_labels: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    /// Builds a batch from `(chw image, group, sex)` triples.
    pub fn new(arch: &ArchConfig, items: &[(&[T], usize, Sex)]) -> Self {
        let mut images = Vec::with_capacity(items.len() * arch.image_len());
        let mut labels = Vec::with_capacity(items.len() * arch.label_len());
        let mut plane = Vec::with_capacity(items.len() * arch.plane_label_len());
        let cast = |v: f32| T::from_f64(v as f64);
        for &(img, group, sex) in items {
            assert_eq!(img.len(), arch.image_len(), "image does not match the architecture");
            images.extend_from_slice(img);
            labels.extend(label_vector(arch, group, sex).into_iter().map(cast));
            plane.extend(plane_labels(arch, group, sex).into_iter().map(cast));
        }
        Self { n: items.len(), images, labels, plane_labels: plane }
    }
}

/// Encoder and generator passes over one batch, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Autoencoded<T> {
    pub enc: Tape<T>,
    pub gen: Tape<T>,
}

impl<T: Scalar> Autoencoded<T> {
    pub fn z(&self) -> &[T] {
        self.enc.output()
    }

    pub fn xhat(&self) -> &[T] {
        self.gen.output()
    }
}

/// `[z, l, s]` rows for the generator.
pub fn conditions<T: Scalar>(n_z: usize, z: &[T], labels: &[T], n: usize) -> Vec<T> {
    let ll = labels.len() / n.max(1);
    let mut out = Vec::with_capacity(n * (n_z + ll));
    for i in 0..n {
        out.extend_from_slice(&z[i * n_z..(i + 1) * n_z]);
        out.extend_from_slice(&labels[i * ll..(i + 1) * ll]);
    }
    out
}

pub fn autoencode<T: Scalar>(net: &Caae, p: &CaaeParams<T>, batch: &Batch<T>) -> Result<Autoencoded<T>, ShapeError> {
    let enc = net.encoder.forward(&p.encoder, &batch.images, batch.n, None)?;
    let cond = conditions(net.arch.n_z, enc.output(), &batch.labels, batch.n);
    let gen = net.generator.forward(&p.generator, &cond, batch.n, None)?;
    Ok(Autoencoded { enc, gen })
}

fn logits<T: Scalar>(tape: &Tape<T>) -> Vec<f64> {
    tape.output().iter().map(|&v| Scalar::to_f64(v)).collect()
}

/// Image discriminator loss on real images versus `fakes` under the batch
/// labels. Parameter gradients are accumulated into `grads` when given.
pub fn dimg_objective<T: Scalar>(
    net: &Caae,
    p: &CaaeParams<T>,
    batch: &Batch<T>,
    fakes: &[T],
    grads: Option<&mut ParamSet<T>>,
) -> Result<f64, ShapeError> {
    let real = net.dimg.forward(&p.dimg, &batch.images, batch.n, Some(&batch.plane_labels))?;
    let fake = net.dimg.forward(&p.dimg, fakes, batch.n, Some(&batch.plane_labels))?;
    let (lr, gr) = losses::real_logit_loss(&logits(&real));
    let (lf, gf) = losses::fake_logit_loss(&logits(&fake));
    if let Some(g) = grads {
        net.dimg.backward(&p.dimg, &real, cast_slice(&gr), Some(&mut *g), false)?;
        net.dimg.backward(&p.dimg, &fake, cast_slice(&gf), Some(g), false)?;
    }
    Ok(lr + lf)
}

/// Latent discriminator loss on prior draws versus encoder codes.
pub fn dz_objective<T: Scalar>(
    net: &Caae,
    p: &CaaeParams<T>,
    prior: &[T],
    codes: &[T],
    n: usize,
    grads: Option<&mut ParamSet<T>>,
) -> Result<f64, ShapeError> {
    let real = net.dz.forward(&p.dz, prior, n, None)?;
    let fake = net.dz.forward(&p.dz, codes, n, None)?;
    let (lr, gr) = losses::real_logit_loss(&logits(&real));
    let (lf, gf) = losses::fake_logit_loss(&logits(&fake));
    if let Some(g) = grads {
        net.dz.backward(&p.dz, &real, cast_slice(&gr), Some(&mut *g), false)?;
        net.dz.backward(&p.dz, &fake, cast_slice(&gf), Some(g), false)?;
    }
    Ok(lr + lf)
}

/// Options of the encoder/generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgOptions {
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub saturating: bool,
}

/// Encoder/generator objective for an existing autoencoder pass. Fills every
/// generator-side field of the report; when `grads` is given, accumulates
/// `(encoder, generator)` parameter gradients of `total`.
pub fn eg_objective<T: Scalar>(
    net: &Caae,
    p: &CaaeParams<T>,
    batch: &Batch<T>,
    ae: &Autoencoded<T>,
    opts: &EgOptions,
    grads: Option<(&mut ParamSet<T>, &mut ParamSet<T>)>,
) -> Result<LossReport, ShapeError> {
    let n = batch.n;
    let s = net.arch.image_size;
    let img = net.arch.image_len();
    let n_z = net.arch.n_z;
    let xhat = ae.xhat();
    let x = &batch.images;

    let mut r = LossReport {
        recon: losses::mean_squared_error(x, xhat).expect("equal batch shapes"),
        tv: xhat.chunks_exact(img).map(|im| tv_chw(im, CHANNELS, s, s)).sum::<f64>() / n as f64,
        ..LossReport::default()
    };
    let dz_tape = net.dz.forward(&p.dz, ae.z(), n, None)?;
    let (adv_z, gz_logit) = generator_logit_loss(&logits(&dz_tape), opts.saturating);
    let dimg_tape = net.dimg.forward(&p.dimg, xhat, n, Some(&batch.plane_labels))?;
    let (adv_img, gimg_logit) = generator_logit_loss(&logits(&dimg_tape), opts.saturating);
    r.adv_gen_z = adv_z;
    r.adv_gen_img = adv_img;
    let feat = if opts.ablation.vgg_on {
        let fm_x = net.fm.infer(&p.fm, x, n, None)?;
        let fm_tape = net.fm.forward(&p.fm, xhat, n, None)?;
        r.feat = losses::mean_squared_error(&fm_x, fm_tape.output()).expect("equal feature shapes");
        Some((fm_x, fm_tape))
    } else {
        None
    };
    r.total = compose_eg_loss(&r, &opts.weights, opts.ablation);

    let Some((g_enc, g_gen)) = grads else { return Ok(r) };
    let w = &opts.weights;
    let mut gx = mse_grad(xhat, x, w.lambda);
    for (im, g) in xhat.chunks_exact(img).zip(gx.chunks_exact_mut(img)) {
        tv_chw_grad(im, CHANNELS, s, s, w.gamma / n as f64, g);
    }
    let add = |acc: &mut [f64], part: Vec<T>| acc.iter_mut().zip(part).for_each(|(a, v)| *a += Scalar::to_f64(v));
    let from_dimg = net.dimg.backward(&p.dimg, &dimg_tape, cast_slice(&gimg_logit), None, true)?.expect("input grad");
    add(&mut gx, from_dimg);
    if let Some((fm_x, fm_tape)) = &feat {
        let gf = mse_grad(fm_tape.output(), fm_x, w.phi);
        let from_fm = net.fm.backward(&p.fm, fm_tape, cast_slice(&gf), None, true)?.expect("input grad");
        add(&mut gx, from_fm);
    }
    let gcond = net.generator.backward(&p.generator, &ae.gen, cast_slice(&gx), Some(g_gen), true)?.expect("input grad");
    let mut gz = net.dz.backward(&p.dz, &dz_tape, cast_slice(&gz_logit), None, true)?.expect("input grad");
    let cl = net.arch.condition_len();
    for i in 0..n {
        for j in 0..n_z {
            gz[i * n_z + j] = gz[i * n_z + j] + gcond[i * cl + j];
        }
    }
    net.encoder.backward(&p.encoder, &ae.enc, gz, Some(g_enc), false)?;
    Ok(r)
}

/// Loss report of the encoder/generator objective plus both discriminator
/// losses, without gradients. `prior` holds one draw per batch item.
pub fn evaluate_losses<T: Scalar>(
    net: &Caae,
    p: &CaaeParams<T>,
    batch: &Batch<T>,
    prior: &[T],
    opts: &EgOptions,
) -> Result<LossReport, ShapeError> {
    let ae = autoencode(net, p, batch)?;
    let mut r = eg_objective(net, p, batch, &ae, opts, None)?;
    r.adv_dimg = dimg_objective(net, p, batch, ae.xhat(), None)?;
    r.adv_dz = dz_objective(net, p, prior, ae.z(), batch.n, None)?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{render_synthetic_face, SyntheticFaceParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Caae, CaaeParams<f64>, Batch<f64>, Vec<f64>) {
        let net = Caae::new(ArchConfig::tiny(4)).unwrap();
        let p = net.init_params::<f64>(seed);
        let faces: Vec<Vec<f64>> = (0..2)
            .map(|i| {
                let f = render_synthetic_face(&SyntheticFaceParams { identity_seed: seed + i, age: 3 + 30 * i as u32, sex: Sex::Female, size: 4 });
                cast_slice(&f.to_chw())
            })
            .collect();
        let batch = Batch::new(&net.arch, &[(&faces[0], 0, Sex::Male), (&faces[1], 5, Sex::Female)]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = (0..2 * net.arch.n_z).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        (net, p, batch, prior)
    }

    fn opts() -> EgOptions {
        EgOptions { weights: LossWeights { lambda: 1.5, gamma: 0.7, phi: 0.3 }, ablation: Ablation::FULL, saturating: false }
    }

    #[test]
    fn eg_gradient_spot_checks() {
        let (net, p, batch, _) = setup(3);
        let o = opts();
        let ae = autoencode(&net, &p, &batch).unwrap();
        let (mut ge, mut gg) = (p.encoder.zeros_like(), p.generator.zeros_like());
        eg_objective(&net, &p, &batch, &ae, &o, Some((&mut ge, &mut gg))).unwrap();
        let loss = |q: &CaaeParams<f64>| {
            let ae = autoencode(&net, q, &batch).unwrap();
            eg_objective(&net, q, &batch, &ae, &o, None).unwrap().total
        };
        let h = 1e-6;
        for (which, idx) in [(0usize, 0usize), (0, 5), (1, 2), (1, 40)] {
            let nudge = |d: f64| {
                let mut q = p.clone();
                let set = if which == 0 { &mut q.encoder } else { &mut q.generator };
                *set.scalar_mut(idx) += d;
                q
            };
            let (a, b) = (nudge(h), nudge(-h));
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            let an = if which == 0 { ge.flat_values()[idx] } else { gg.flat_values()[idx] };
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{which}/{idx}: {fd} vs {an}");
        }
    }

    #[test]
    fn conditions_interleave_rows() {
        let c = conditions(2, &[1.0f64, 2.0, 3.0, 4.0], &[9.0, 8.0], 2);
        assert_eq!(c, vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }
}
