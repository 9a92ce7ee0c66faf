//! Oracle classifier over the synthetic classes, the inception score it
//! induces, and the paraphrase consistency ratio.

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Conv, Ctx, Group, GroupSet, Init, Linear, ParamStore};
use crate::synth::{render, SceneSpec, NUM_CLASSES};
use crate::tensor::Tensor;
use crate::gan::{sample_noise, GanModel};
use crate::text::stack_images;
use crate::train::{generate, sample_pairs, EncodedCaption, Pair, TrainSet};

/// Held-out accuracy an oracle must reach before it may score anything.
pub const ORACLE_GATE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out renders per class for the accuracy gate.
    pub held_out_per_class: usize,
    pub hidden: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            steps: 800,
            batch_size: 32,
            lr: 2e-3,
            held_out_per_class: 10,
            hidden: 64,
        }
    }
}

/// Small convolutional classifier over 32×32 renders.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    pub store: ParamStore,
    convs: Vec<Conv>,
    hidden: Linear,
    out: Linear,
    /// Held-out accuracy measured after training, if any.
    pub accuracy: Option<f64>,
}

impl OracleClassifier {
    pub fn new(hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let g = Group::Oracle;
        let widths = [3, 16, 32, 64];
        let mut convs = Vec::new();
        for i in 0..3 {
            let name = alloc::format!("oracle.conv{i}");
            convs.push(Conv::down4(&mut store, &name, widths[i], widths[i + 1], Init::LeCun(2.0), g, rng)?);
        }
        let hidden_l = Linear::new(&mut store, "oracle.hidden", 64 * 16, hidden, Init::LeCun(2.0), g, rng)?;
        let out = Linear::new(&mut store, "oracle.out", hidden, NUM_CLASSES, Init::LeCun(1.0), g, rng)?;
        Ok(OracleClassifier {
            store,
            convs,
            hidden: hidden_l,
            out,
            accuracy: None,
        })
    }

    /// `(features [N×H], logits [N×K])`.
    fn forward(&self, ctx: &mut Ctx, images: crate::graph::Var) -> Result<(crate::graph::Var, crate::graph::Var)> {
        let s = ctx.graph.shape(images).to_vec();
        if s.len() != 4 || s[1..] != [3, 32, 32] {
            return Err(Error::shape("oracle", &s, &[3, 32, 32]));
        }
        let mut h = images;
        for c in &self.convs {
            h = c.forward(ctx, h)?;
            h = ctx.graph.relu(h)?;
        }
        let h = ctx.graph.reshape(h, &[s[0], 64 * 16])?;
        let f = self.hidden.forward(ctx, h)?;
        let f = ctx.graph.relu(f)?;
        let logits = self.out.forward(ctx, f)?;
        Ok((f, logits))
    }

    fn run(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut ctx = Ctx::new(&self.store, GroupSet::NONE, false);
        let x = ctx.constant(images.clone());
        let (f, l) = self.forward(&mut ctx, x)?;
        let p = ctx.graph.softmax(l, 1)?;
        Ok((ctx.value(f).clone(), ctx.value(p).clone()))
    }

    /// Class posteriors, one row per image.
    pub fn probs(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (_, p) = self.run(images)?;
        Ok(p.data().chunks(NUM_CLASSES).map(<[f64]>::to_vec).collect())
    }

    /// Penultimate-layer features.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.run(images)?.0)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(self.probs(images)?.iter().map(|p| argmax(p)).collect())
    }

    pub fn ensure_validated(&self) -> Result<()> {
        match self.accuracy {
            Some(a) if a >= ORACLE_GATE => Ok(()),
            a => Err(Error::OracleNotValidated {
                accuracy: a.unwrap_or(0.0),
                required: ORACLE_GATE,
            }),
        }
    }

    /// Trains on freshly sampled renders of every class, then measures
    /// accuracy on a separate held-out draw. Returns the training losses.
    pub fn train(&mut self, cfg: &OracleConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mut adam = Adam::new(AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            ..AdamConfig::default()
        });
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let (images, labels) = labelled_batch(cfg.batch_size, rng)?;
            let grads = {
                let mut ctx = Ctx::new(&self.store, GroupSet::of(&[Group::Oracle]), true);
                let x = ctx.constant(images);
                let (_, logits) = self.forward(&mut ctx, x)?;
                let lp = ctx.graph.log_softmax(logits, 1)?;
                let mut onehot = alloc::vec![0.0; labels.len() * NUM_CLASSES];
                for (i, &c) in labels.iter().enumerate() {
                    onehot[i * NUM_CLASSES + c] = -1.0 / labels.len() as f64;
                }
                let w = ctx.constant(Tensor::new(&[labels.len(), NUM_CLASSES], onehot)?);
                let nll = ctx.graph.mul(lp, w)?;
                let loss = ctx.graph.sum(nll)?;
                let l = ctx.value(loss).item();
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: step as u64,
                        what: "oracle".to_string(),
                    });
                }
                losses.push(l);
                ctx.backward(loss)?;
                ctx.grads()
            };
            adam.update(&mut self.store, &grads);
        }
        self.accuracy = Some(self.held_out_accuracy(cfg.held_out_per_class, rng)?);
        Ok(losses)
    }

    fn held_out_accuracy(&self, per_class: usize, rng: &mut impl Rng) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for _ in 0..per_class {
            let specs: Vec<SceneSpec> = (0..NUM_CLASSES).map(|c| SceneSpec::sample(c, rng)).collect();
            let imgs = specs.iter().map(|s| render(s, 32)).collect::<Result<Vec<_>>>()?;
            let batch = stack_images(&imgs.iter().collect::<Vec<_>>())?;
            let pred = self.predict(&batch)?;
            correct += pred.iter().zip(&specs).filter(|(p, s)| **p == s.class_id()).count();
            total += specs.len();
        }
        Ok(correct as f64 / total.max(1) as f64)
    }
}

fn labelled_batch(n: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
    let imgs = labels.iter().map(|&c| render(&SceneSpec::sample(c, rng), 32)).collect::<Result<Vec<_>>>()?;
    Ok((stack_images(&imgs.iter().collect::<Vec<_>>())?, labels))
}

fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` on each of `n_splits` contiguous splits;
/// returns the mean and population standard deviation over splits.
pub fn inception_score(probs: &[Vec<f64>], n_splits: usize) -> Result<(f64, f64)> {
    if n_splits == 0 || probs.len() < 10 * n_splits {
        return Err(Error::invalid("inception_score", "need at least 10 images per split"));
    }
    let k = probs[0].len();
    if probs.iter().any(|p| p.len() != k) {
        return Err(Error::invalid("inception_score", "ragged probability rows"));
    }
    let n = probs.len();
    let mut scores = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let part = &probs[s * n / n_splits..(s + 1) * n / n_splits];
        let mut marginal = alloc::vec![0.0; k];
        for p in part {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / part.len() as f64;
            }
        }
        let mut kl = 0.0;
        for p in part {
            for (pv, m) in p.iter().zip(&marginal) {
                if *pv > 0.0 {
                    kl += pv * (libm::log(*pv) - libm::log(*m));
                }
            }
        }
        scores.push(libm::exp(kl / part.len() as f64));
    }
    Ok(mean_std(&scores))
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// [`inception_score`] of images under a validated oracle.
pub fn oracle_inception_score(oracle: &OracleClassifier, images: &Tensor, n_splits: usize) -> Result<(f64, f64)> {
    oracle.ensure_validated()?;
    inception_score(&oracle.probs(images)?, n_splits)
}

/// Mean feature distance over intra pairs (`y = 1`) divided by that over
/// inter pairs. `a`, `b` are `[P×F]` with one row per pair side.
pub fn consistency_ratio(a: &Tensor, b: &Tensor, y: &[f64]) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 2 || a.shape()[0] != y.len() {
        return Err(Error::shape("consistency_ratio", a.shape(), b.shape()));
    }
    let f = a.shape()[1];
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for (i, &yi) in y.iter().enumerate() {
        let d = libm::sqrt(
            a.data()[i * f..(i + 1) * f]
                .iter()
                .zip(&b.data()[i * f..(i + 1) * f])
                .map(|(x, z)| (x - z) * (x - z))
                .sum(),
        );
        if yi == 1.0 {
            intra += d;
            n_intra += 1;
        } else {
            inter += d;
            n_inter += 1;
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::invalid("consistency_ratio", "need both intra and inter pairs"));
    }
    let inter = inter / n_inter as f64;
    if inter == 0.0 {
        return Err(Error::invalid("consistency_ratio", "inter-pair distances are all zero"));
    }
    Ok(intra / n_intra as f64 / inter)
}

/// Consistency ratio of image pairs under the oracle's penultimate features.
pub fn oracle_consistency(oracle: &OracleClassifier, a: &Tensor, b: &Tensor, y: &[f64]) -> Result<f64> {
    oracle.ensure_validated()?;
    consistency_ratio(&oracle.features(a)?, &oracle.features(b)?, y)
}

/// Last-stage images generated in eval mode for `captions`, with noise
/// drawn from `rng`, in chunks of at most 64.
pub fn generate_last_stage(store: &ParamStore, model: &GanModel, captions: &[&EncodedCaption], rng: &mut impl Rng) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in captions.chunks(64) {
        let z = sample_noise(chunk.len(), model.config.z_dim, rng);
        let mut imgs = generate(store, model, chunk, &z)?;
        parts.push(imgs.pop().expect("at least one stage"));
    }
    let mut shape = parts[0].shape().to_vec();
    shape[0] = captions.len();
    Tensor::new(&shape, parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Oracle inception score of one generated image per caption of `set`.
pub fn generated_inception_score(
    store: &ParamStore,
    model: &GanModel,
    oracle: &OracleClassifier,
    set: &TrainSet,
    n_splits: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    oracle.ensure_validated()?;
    let caps: Vec<&EncodedCaption> = set.items.iter().flat_map(|i| i.captions.iter()).collect();
    let images = generate_last_stage(store, model, &caps, rng)?;
    oracle_inception_score(oracle, &images, n_splits)
}

/// Consistency ratio over `n_pairs` caption pairs of `set`, half intra and
/// half inter, each side with its own noise.
pub fn generated_consistency(
    store: &ParamStore,
    model: &GanModel,
    oracle: &OracleClassifier,
    set: &TrainSet,
    n_pairs: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    oracle.ensure_validated()?;
    let pairs = sample_pairs(set, n_pairs, 0.5, rng)?;
    let side = |f: fn(&Pair) -> (usize, usize)| -> Vec<&EncodedCaption> {
        pairs.pairs.iter().map(|p| {
            let (i, c) = f(p);
            &set.items[i].captions[c]
        }).collect()
    };
    let a = generate_last_stage(store, model, &side(|p| (p.image_a, p.caption_a)), rng)?;
    let b = generate_last_stage(store, model, &side(|p| (p.image_b, p.caption_b)), rng)?;
    oracle_consistency(oracle, &a, &b, &pairs.y())
}
