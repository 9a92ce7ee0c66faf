//! Siamese pair sampling, the clamped contrastive loss, adversarial losses
//! and the alternating discriminator/generator updates.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gan::{sample_noise, DiscOutput, GanConfig, GanModel, StageOutputs};
use crate::graph::{Graph, Var};
use crate::nn::{apply_buffer_updates, Adam, AdamConfig, Ctx, Group, GroupSet, ParamStore};
use crate::norm::TextCondition;
use crate::synth::Scene;
use crate::tensor::Tensor;
use crate::text::{normalize_rows, stack_images, TextEncoder, Vocabulary};

/// How the `1/(2N) Σ_n` prefactor of the contrastive loss is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContrastiveNorm {
    /// `½·term` per pair.
    #[default]
    PerPairHalf,
    /// `N` identical copies of the term over `2N`; numerically the same value.
    PerFeatureDim,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub epsilon: f64,
    /// Stages whose discriminator features enter the contrastive loss.
    pub contrastive_stages: [bool; 3],
    pub contrastive_weight: f64,
    pub adversarial_weight: f64,
    pub normalization: ContrastiveNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            epsilon: 1.0,
            contrastive_stages: [true; 3],
            contrastive_weight: 1.0,
            adversarial_weight: 1.0,
            normalization: ContrastiveNorm::PerPairHalf,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha < self.epsilon) {
            return Err(Error::invalid("loss", "need 0 < alpha < epsilon"));
        }
        if self.contrastive_weight < 0.0 || self.adversarial_weight < 0.0 {
            return Err(Error::invalid("loss", "weights must be non-negative"));
        }
        Ok(())
    }
}

/// Mean over pairs of `½[y·max(d, α)² + (1−y)·max(ε − d, 0)²]`, `d = ‖v1 − v2‖₂`
/// per row of `v1, v2 [B×F]`.
pub fn contrastive_loss(g: &mut Graph, v1: Var, v2: Var, y: &[f64], cfg: &LossConfig) -> Result<Var> {
    let s = g.shape(v1).to_vec();
    if s.len() != 2 || s[0] != y.len() {
        return Err(Error::shape("contrastive_loss", &s, &[y.len()]));
    }
    let b = s[0];
    let d = g.row_l2_distance(v1, v2)?;
    let pos = g.clamp_min(d, cfg.alpha)?;
    let pos = g.square(pos)?;
    let gap = g.neg(d)?;
    let gap = g.shift(gap, cfg.epsilon)?;
    let neg = g.clamp_min(gap, 0.0)?;
    let neg = g.square(neg)?;
    let yv = g.constant(Tensor::new(&[b], y.to_vec())?);
    let ny = g.constant(Tensor::new(&[b], y.iter().map(|v| 1.0 - v).collect())?);
    let pos = g.mul(yv, pos)?;
    let neg = g.mul(ny, neg)?;
    let term = g.add(pos, neg)?;
    let per_pair = match cfg.normalization {
        ContrastiveNorm::PerPairHalf => g.scale(term, 0.5)?,
        ContrastiveNorm::PerFeatureDim => {
            let n = s[1] as f64;
            g.scale(term, n / (2.0 * n))?
        }
    };
    g.mean(per_pair)
}

/// Per-stage contrastive terms on the unconditioned and conditioned features.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContrastiveTerms {
    pub u: [Option<Var>; 3],
    pub c: [Option<Var>; 3],
    pub total: Option<Var>,
}

/// Sum over the configured stages of the contrastive loss on `(v_a, v_b)` plus
/// that on `(v_c,a, v_c,b)`.
pub fn combined_contrastive(g: &mut Graph, a: &[DiscOutput], b: &[DiscOutput], y: &[f64], cfg: &LossConfig) -> Result<ContrastiveTerms> {
    let mut terms = ContrastiveTerms::default();
    for k in 0..a.len().min(b.len()).min(3) {
        if !cfg.contrastive_stages[k] {
            continue;
        }
        let u = contrastive_loss(g, a[k].feat_u, b[k].feat_u, y, cfg)?;
        let c = contrastive_loss(g, a[k].feat_c, b[k].feat_c, y, cfg)?;
        let both = g.add(u, c)?;
        terms.total = Some(match terms.total {
            None => both,
            Some(t) => g.add(t, both)?,
        });
        terms.u[k] = Some(u);
        terms.c[k] = Some(c);
    }
    Ok(terms)
}

/// [`combined_contrastive`] over concrete stage outputs.
pub fn combined_contrastive_value(a: &[StageOutputs], b: &[StageOutputs], y: &[f64], cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let wrap = |o: &StageOutputs, g: &mut Graph| DiscOutput {
        logit_u: g.constant(Tensor::scalar(0.0)),
        logit_c: g.constant(Tensor::scalar(0.0)),
        feat_u: g.constant(o.feat_u.clone()),
        feat_c: g.constant(o.feat_c.clone()),
    };
    let da: Vec<DiscOutput> = a.iter().map(|o| wrap(o, &mut g)).collect();
    let db: Vec<DiscOutput> = b.iter().map(|o| wrap(o, &mut g)).collect();
    let t = combined_contrastive(&mut g, &da, &db, y, cfg)?;
    Ok(t.total.map_or(0.0, |v| g.value(v).item()))
}

/// Batch mean of binary cross-entropy against a constant target.
fn bce(g: &mut Graph, logits: Var, target: f64) -> Result<Var> {
    let t = alloc::vec![target; g.value(logits).len()];
    let e = g.bce_with_logits(logits, &t)?;
    g.mean(e)
}

/// Discriminator loss of one stage: `BCE(real_u, 1) + BCE(fake_u, 0)` on the
/// unconditioned branch plus `BCE(real_c, 1) + ½[BCE(fake_c, 0) + BCE(wrong_c, 0)]`
/// on the conditioned one, where `wrong_c` scores real images against
/// mismatched captions.
pub fn discriminator_loss(g: &mut Graph, real: &DiscOutput, fake: &DiscOutput, wrong_c: Var) -> Result<Var> {
    let ru = bce(g, real.logit_u, 1.0)?;
    let fu = bce(g, fake.logit_u, 0.0)?;
    let rc = bce(g, real.logit_c, 1.0)?;
    let fc = bce(g, fake.logit_c, 0.0)?;
    let wc = bce(g, wrong_c, 0.0)?;
    let u = g.add(ru, fu)?;
    let neg = g.add(fc, wc)?;
    let neg = g.scale(neg, 0.5)?;
    let c = g.add(rc, neg)?;
    g.add(u, c)
}

/// Generator loss of one stage: `BCE(fake_u, 1) + BCE(fake_c, 1)`.
pub fn generator_loss(g: &mut Graph, fake: &DiscOutput) -> Result<Var> {
    let u = bce(g, fake.logit_u, 1.0)?;
    let c = bce(g, fake.logit_c, 1.0)?;
    g.add(u, c)
}

/// `(g_loss, d_loss)` of one stage.
pub fn adversarial_losses(g: &mut Graph, real: &DiscOutput, fake: &DiscOutput, wrong_c: Var) -> Result<(Var, Var)> {
    let gl = generator_loss(g, fake)?;
    let dl = discriminator_loss(g, real, fake, wrong_c)?;
    Ok((gl, dl))
}

/// Rescales `x [B×D]` so every row has unit root-mean-square.
fn unit_rms_rows(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let d = ctx.graph.shape(x)[1] as f64;
    let x = normalize_rows(ctx, x)?;
    ctx.graph.scale(x, libm::sqrt(d))
}

/// Text features as the GAN sees them: the sentence vector and every word
/// column rescaled to unit root-mean-square. Raw encoder outputs are bounded
/// LSTM states with norms far below that of the noise they are joined with.
pub fn gan_condition(ctx: &mut Ctx, sentence: Var, words: &[Var]) -> Result<TextCondition> {
    let sentence = unit_rms_rows(ctx, sentence)?;
    let words = words
        .iter()
        .map(|&w| {
            let t = ctx.graph.transpose(w)?;
            let t = unit_rms_rows(ctx, t)?;
            ctx.graph.transpose(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TextCondition { sentence, words })
}

/// Frozen-encoder features of token sequences, as fed to the GAN.
pub fn encode_captions(store: &ParamStore, encoder: &TextEncoder, captions: &[Vec<usize>]) -> Result<Vec<EncodedCaption>> {
    let mut ctx = Ctx::new(store, GroupSet::NONE, false);
    let enc = encoder.encode_batch(&mut ctx, captions)?;
    let cond = gan_condition(&mut ctx, enc.sentence, &enc.words)?;
    let sentence = ctx.value(cond.sentence).clone();
    let d = sentence.shape()[1];
    Ok(captions
        .iter()
        .enumerate()
        .map(|(n, tokens)| EncodedCaption {
            text: String::new(),
            tokens: tokens.clone(),
            sentence: Tensor::new(&[d], sentence.data()[n * d..(n + 1) * d].to_vec()).expect("row"),
            words: ctx.value(cond.words[n]).clone(),
        })
        .collect())
}

/// One caption with its GAN-ready features.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCaption {
    pub text: String,
    pub tokens: Vec<usize>,
    /// `[D]`.
    pub sentence: Tensor,
    /// `[D×T]`.
    pub words: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub scene_id: usize,
    pub class_id: usize,
    /// Renders at 8, 16 and 32 pixels.
    pub images: [Tensor; 3],
    pub captions: Vec<EncodedCaption>,
}

/// Rendered scenes with encoded captions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSet {
    pub items: Vec<TrainItem>,
}

impl TrainSet {
    pub fn build(store: &ParamStore, encoder: &TextEncoder, vocab: &Vocabulary, scenes: &[Scene]) -> Result<Self> {
        let mut items = Vec::with_capacity(scenes.len());
        for s in scenes {
            let tokens = s.captions.iter().map(|c| vocab.tokenize(c)).collect::<Result<Vec<_>>>()?;
            let captions = encode_captions(store, encoder, &tokens)?
                .into_iter()
                .zip(&s.captions)
                .zip(tokens)
                .map(|((mut e, text), tokens)| {
                    e.text = text.clone();
                    e.tokens = tokens;
                    e
                })
                .collect();
            items.push(TrainItem {
                scene_id: s.id,
                class_id: s.spec.class_id(),
                images: s.render_all()?,
                captions,
            });
        }
        Ok(TrainSet { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Indices of one Siamese pair into a [`TrainSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub image_a: usize,
    pub caption_a: usize,
    pub image_b: usize,
    pub caption_b: usize,
}

impl Pair {
    /// 1 for two captions of one image, 0 otherwise.
    pub fn y(&self) -> f64 {
        if self.image_a == self.image_b {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn y(&self) -> Vec<f64> {
        self.pairs.iter().map(Pair::y).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Draws images from a shuffled pool, reshuffling only once it is exhausted,
/// so a batch repeats an image only when it needs more than the set holds.
struct Pool {
    order: Vec<usize>,
    n: usize,
}

impl Pool {
    fn new(n: usize) -> Self {
        Pool { order: Vec::new(), n }
    }

    fn next(&mut self, rng: &mut impl Rng, avoid: Option<usize>) -> usize {
        if self.order.is_empty() {
            self.order = (0..self.n).collect();
            self.order.shuffle(rng);
        }
        let pos = self.order.iter().rposition(|&i| Some(i) != avoid);
        match pos {
            Some(p) => self.order.remove(p),
            None => {
                // only `avoid` is left: refill and draw from the fresh pool
                let mut fresh: Vec<usize> = (0..self.n).filter(|&i| Some(i) != avoid).collect();
                fresh.shuffle(rng);
                let pick = fresh.pop().expect("at least two images");
                self.order.extend(fresh);
                pick
            }
        }
    }
}

/// `round(batch·intra_ratio)` intra pairs (two distinct captions of one image)
/// followed by inter pairs over distinct images.
pub fn sample_pairs(set: &TrainSet, batch: usize, intra_ratio: f64, rng: &mut impl Rng) -> Result<PairBatch> {
    if set.len() < 2 || set.items.iter().any(|i| i.captions.len() < 2) {
        return Err(Error::DatasetTooSmall("pairing needs two images with two captions each".to_string()));
    }
    if batch == 0 || !(0.0..=1.0).contains(&intra_ratio) {
        return Err(Error::invalid("sample_pairs", "batch must be positive and intra_ratio in [0, 1]"));
    }
    let n_intra = libm::round(batch as f64 * intra_ratio) as usize;
    let mut pool = Pool::new(set.len());
    let mut pairs = Vec::with_capacity(batch);
    let two_captions = |img: usize, rng: &mut dyn rand::RngCore| {
        let k = set.items[img].captions.len();
        let a = rng.random_range(0..k);
        let b = (a + 1 + rng.random_range(0..k - 1)) % k;
        (a, b)
    };
    for _ in 0..n_intra {
        let img = pool.next(rng, None);
        let (ca, cb) = two_captions(img, rng);
        pairs.push(Pair {
            image_a: img,
            caption_a: ca,
            image_b: img,
            caption_b: cb,
        });
    }
    for _ in n_intra..batch {
        let ia = pool.next(rng, None);
        let ib = pool.next(rng, Some(ia));
        pairs.push(Pair {
            image_a: ia,
            caption_a: rng.random_range(0..set.items[ia].captions.len()),
            image_b: ib,
            caption_b: rng.random_range(0..set.items[ib].captions.len()),
        });
    }
    Ok(PairBatch { pairs })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub gan: GanConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub intra_ratio: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Lets generator updates reach the text encoder.
    pub unfreeze_encoder: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gan: GanConfig::default(),
            loss: LossConfig::default(),
            batch_size: 8,
            intra_ratio: 0.5,
            lr_g: 2e-4,
            lr_d: 2e-4,
            unfreeze_encoder: false,
            seed: 0,
        }
    }
}

/// Losses of one training step. The contrastive terms are those seen by the
/// generator update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub step: u64,
    pub d_adv: [f64; 3],
    pub g_adv: [f64; 3],
    pub contrastive_u: [f64; 3],
    pub contrastive_c: [f64; 3],
    pub d_total: f64,
    pub g_total: f64,
}

impl LossReport {
    pub fn columns() -> Vec<String> {
        let mut cols = alloc::vec!["step".to_string()];
        for name in ["d_adv", "g_adv", "con_u", "con_c"] {
            for k in 0..3 {
                cols.push(alloc::format!("{name}{k}"));
            }
        }
        cols.push("d_total".to_string());
        cols.push("g_total".to_string());
        cols
    }

    /// Values in [`LossReport::columns`] order, the step first.
    pub fn values(&self) -> Vec<f64> {
        let mut v = alloc::vec![self.step as f64];
        for arr in [self.d_adv, self.g_adv, self.contrastive_u, self.contrastive_c] {
            v.extend_from_slice(&arr);
        }
        v.push(self.d_total);
        v.push(self.g_total);
        v
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// One side of a pair batch, as tensors.
#[derive(Debug, Clone)]
struct Side {
    sentence: Tensor,
    words: Vec<Tensor>,
    tokens: Vec<Vec<usize>>,
    reals: [Tensor; 3],
    images: Vec<usize>,
}

fn side(set: &TrainSet, picks: &[(usize, usize)]) -> Result<Side> {
    let caps: Vec<&EncodedCaption> = picks.iter().map(|&(i, c)| &set.items[i].captions[c]).collect();
    let d = caps[0].sentence.len();
    let sentence = Tensor::new(&[caps.len(), d], caps.iter().flat_map(|c| c.sentence.data().iter().copied()).collect())?;
    let reals = [0, 1, 2].map(|k| stack_images(&picks.iter().map(|&(i, _)| &set.items[i].images[k]).collect::<Vec<_>>()));
    let [r0, r1, r2] = reals;
    Ok(Side {
        sentence,
        words: caps.iter().map(|c| c.words.clone()).collect(),
        tokens: caps.iter().map(|c| c.tokens.clone()).collect(),
        reals: [r0?, r1?, r2?],
        images: picks.iter().map(|&(i, _)| i).collect(),
    })
}

/// For every caption of the concatenated sides, the index of the nearest
/// following caption that belongs to a different image.
fn mismatched(images: &[usize]) -> Vec<usize> {
    let n = images.len();
    (0..n)
        .map(|i| (1..n).map(|k| (i + k) % n).find(|&j| images[j] != images[i]).unwrap_or((i + 1) % n))
        .collect()
}

/// Trainer state: parameters, both optimizers, the RNG and the step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub model: GanModel,
    pub encoder: TextEncoder,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

/// Everything one update consumes, drawn up front so it can be replayed.
#[derive(Debug, Clone)]
pub struct StepInput {
    pub pairs: PairBatch,
    pub z_a: Tensor,
    pub z_b: Tensor,
}

impl Trainer {
    /// Adds the GAN to `store`, which must already hold `encoder`.
    pub fn new(config: TrainConfig, mut store: ParamStore, encoder: TextEncoder) -> Result<Self> {
        config.loss.validate()?;
        if config.gan.text_dim != encoder.config.feature_dim() {
            return Err(Error::invalid("trainer", "text_dim must equal the encoder feature width"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = GanModel::new(&mut store, config.gan, &mut rng)?;
        let adam = |lr| {
            Adam::new(AdamConfig {
                lr,
                ..AdamConfig::default()
            })
        };
        Ok(Trainer {
            config,
            store,
            model,
            encoder,
            opt_g: adam(config.lr_g),
            opt_d: adam(config.lr_d),
            rng,
            step: 0,
        })
    }

    /// Pairs and noise for the next step, drawn from the trainer RNG.
    pub fn draw(&mut self, set: &TrainSet) -> Result<StepInput> {
        let pairs = sample_pairs(set, self.config.batch_size, self.config.intra_ratio, &mut self.rng)?;
        let b = pairs.len();
        let z_a = sample_noise(b, self.config.gan.z_dim, &mut self.rng);
        let z_b = sample_noise(b, self.config.gan.z_dim, &mut self.rng);
        Ok(StepInput { pairs, z_a, z_b })
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, set: &TrainSet) -> Result<LossReport> {
        let input = self.draw(set)?;
        self.step_on(set, &input)
    }

    /// [`Trainer::train_step`] on a given input.
    pub fn step_on(&mut self, set: &TrainSet, input: &StepInput) -> Result<LossReport> {
        let (a, b) = self.sides(set, &input.pairs)?;
        let y = input.pairs.y();
        let mut report = LossReport {
            step: self.step,
            ..LossReport::default()
        };
        self.d_update(&a, &b, &y, input, &mut report)?;
        self.g_update(&a, &b, &y, input, &mut report)?;
        self.step += 1;
        Ok(report)
    }

    /// A discriminator-only update; the report carries the losses before it.
    pub fn d_step_on(&mut self, set: &TrainSet, input: &StepInput) -> Result<LossReport> {
        let (a, b) = self.sides(set, &input.pairs)?;
        let mut report = LossReport {
            step: self.step,
            ..LossReport::default()
        };
        self.d_update(&a, &b, &input.pairs.y(), input, &mut report)?;
        Ok(report)
    }

    fn sides(&self, set: &TrainSet, pairs: &PairBatch) -> Result<(Side, Side)> {
        if pairs.is_empty() {
            return Err(Error::invalid("train_step", "empty batch"));
        }
        let a: Vec<(usize, usize)> = pairs.pairs.iter().map(|p| (p.image_a, p.caption_a)).collect();
        let b: Vec<(usize, usize)> = pairs.pairs.iter().map(|p| (p.image_b, p.caption_b)).collect();
        Ok((side(set, &a)?, side(set, &b)?))
    }

    fn condition(&self, ctx: &mut Ctx, s: &Side) -> Result<TextCondition> {
        if self.config.unfreeze_encoder {
            let enc = self.encoder.encode_batch(ctx, &s.tokens)?;
            return gan_condition(ctx, enc.sentence, &enc.words);
        }
        Ok(TextCondition {
            sentence: ctx.constant(s.sentence.clone()),
            words: s.words.iter().map(|w| ctx.constant(w.clone())).collect(),
        })
    }

    fn check(&self, ctx: &Ctx, v: Var, what: &str) -> Result<f64> {
        let x = ctx.value(v).item();
        if !x.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                what: what.to_string(),
            });
        }
        Ok(x)
    }

    fn d_update(&mut self, a: &Side, b: &Side, y: &[f64], input: &StepInput, report: &mut LossReport) -> Result<()> {
        let cfg = self.config;
        let stages = cfg.gan.stages;
        let grads = {
            // generator runs frozen here; its batch-norm statistics are
            // updated by the generator pass only
            let mut ctx = Ctx::new(&self.store, GroupSet::of(&[Group::Discriminator]), true);
            let ca = self.condition(&mut ctx, a)?;
            let cb = self.condition(&mut ctx, b)?;
            let za = ctx.constant(input.z_a.clone());
            let zb = ctx.constant(input.z_b.clone());
            let fa = self.model.generator.forward(&mut ctx, za, &ca)?;
            let fb = self.model.generator.forward(&mut ctx, zb, &cb)?;
            let s_all = ctx.graph.concat(&[ca.sentence, cb.sentence], 0)?;
            let mut images = a.images.clone();
            images.extend_from_slice(&b.images);
            let wrong = mismatched(&images);
            let s_wrong = ctx.graph.index_rows(s_all, &wrong)?;
            let n = y.len();

            let mut total: Option<Var> = None;
            let mut outs_a = Vec::new();
            let mut outs_b = Vec::new();
            for k in 0..stages {
                let d = &self.model.discriminators[k];
                let reals = ctx.constant(Tensor::new(
                    &{
                        let mut s = a.reals[k].shape().to_vec();
                        s[0] *= 2;
                        s
                    },
                    a.reals[k].data().iter().chain(b.reals[k].data()).copied().collect(),
                )?);
                let fakes = ctx.graph.concat(&[fa.images[k], fb.images[k]], 0)?;
                let real = d.forward(&mut ctx, reals, s_all)?;
                let fake = d.forward(&mut ctx, fakes, s_all)?;
                let wrong_c = d.forward(&mut ctx, reals, s_wrong)?.logit_c;
                let dl = discriminator_loss(&mut ctx.graph, &real, &fake, wrong_c)?;
                report.d_adv[k] = self.check(&ctx, dl, "discriminator adversarial")?;
                let dl = ctx.graph.scale(dl, cfg.loss.adversarial_weight)?;
                total = Some(match total {
                    None => dl,
                    Some(t) => ctx.graph.add(t, dl)?,
                });
                outs_a.push(split_rows(&mut ctx.graph, &fake, 0, n)?);
                outs_b.push(split_rows(&mut ctx.graph, &fake, n, n)?);
            }
            if cfg.loss.contrastive_weight > 0.0 {
                let terms = combined_contrastive(&mut ctx.graph, &outs_a, &outs_b, y, &cfg.loss)?;
                if let Some(c) = terms.total {
                    let c = ctx.graph.scale(c, cfg.loss.contrastive_weight)?;
                    total = Some(ctx.graph.add(total.expect("at least one stage"), c)?);
                }
            }
            let total = total.expect("at least one stage");
            report.d_total = self.check(&ctx, total, "discriminator total")?;
            ctx.backward(total)?;
            ctx.grads()
        };
        self.opt_d.update(&mut self.store, &grads);
        Ok(())
    }

    fn g_update(&mut self, a: &Side, b: &Side, y: &[f64], input: &StepInput, report: &mut LossReport) -> Result<()> {
        let cfg = self.config;
        let mut groups = alloc::vec![Group::Generator];
        if cfg.unfreeze_encoder {
            groups.push(Group::TextEncoder);
        }
        let (grads, stats) = {
            let mut ctx = Ctx::new(&self.store, GroupSet::of(&groups), true);
            let ca = self.condition(&mut ctx, a)?;
            let cb = self.condition(&mut ctx, b)?;
            let za = ctx.constant(input.z_a.clone());
            let zb = ctx.constant(input.z_b.clone());
            let fa = self.model.generator.forward(&mut ctx, za, &ca)?;
            let fb = self.model.generator.forward(&mut ctx, zb, &cb)?;
            let s_all = ctx.graph.concat(&[ca.sentence, cb.sentence], 0)?;
            let n = y.len();
            let mut total: Option<Var> = None;
            let mut outs_a = Vec::new();
            let mut outs_b = Vec::new();
            for k in 0..cfg.gan.stages {
                let fakes = ctx.graph.concat(&[fa.images[k], fb.images[k]], 0)?;
                let fake = self.model.discriminators[k].forward(&mut ctx, fakes, s_all)?;
                let gl = generator_loss(&mut ctx.graph, &fake)?;
                report.g_adv[k] = self.check(&ctx, gl, "generator adversarial")?;
                let gl = ctx.graph.scale(gl, cfg.loss.adversarial_weight)?;
                total = Some(match total {
                    None => gl,
                    Some(t) => ctx.graph.add(t, gl)?,
                });
                outs_a.push(split_rows(&mut ctx.graph, &fake, 0, n)?);
                outs_b.push(split_rows(&mut ctx.graph, &fake, n, n)?);
            }
            if cfg.loss.contrastive_weight > 0.0 {
                let terms = combined_contrastive(&mut ctx.graph, &outs_a, &outs_b, y, &cfg.loss)?;
                for k in 0..3 {
                    if let Some(u) = terms.u[k] {
                        report.contrastive_u[k] = ctx.value(u).item();
                    }
                    if let Some(c) = terms.c[k] {
                        report.contrastive_c[k] = ctx.value(c).item();
                    }
                }
                if let Some(c) = terms.total {
                    self.check(&ctx, c, "contrastive")?;
                    let c = ctx.graph.scale(c, cfg.loss.contrastive_weight)?;
                    total = Some(ctx.graph.add(total.expect("at least one stage"), c)?);
                }
            }
            let total = total.expect("at least one stage");
            report.g_total = self.check(&ctx, total, "generator total")?;
            ctx.backward(total)?;
            (ctx.grads(), ctx.take_buffer_updates())
        };
        self.opt_g.update(&mut self.store, &grads);
        apply_buffer_updates(&mut self.store, stats);
        Ok(())
    }

    /// Steps per pass over the set.
    pub fn steps_per_epoch(&self, set: &TrainSet) -> usize {
        set.len().div_ceil(self.config.batch_size).max(1)
    }

    /// Runs `epochs` passes; `hook` sees every report after its step.
    pub fn train_loop<H>(&mut self, set: &TrainSet, epochs: usize, mut hook: H) -> Result<Vec<LossReport>>
    where
        H: FnMut(&Trainer, &LossReport) -> Result<()>,
    {
        let total = epochs * self.steps_per_epoch(set);
        let mut reports = Vec::with_capacity(total);
        for _ in 0..total {
            let r = self.train_step(set)?;
            hook(self, &r)?;
            reports.push(r);
        }
        Ok(reports)
    }

    /// Eval-mode images for a batch of captions and noise, one tensor per stage.
    pub fn generate(&self, captions: &[&EncodedCaption], z: &Tensor) -> Result<Vec<Tensor>> {
        generate(&self.store, &self.model, captions, z)
    }
}

/// Eval-mode generation from encoded captions; `z` is `[B×z_dim]`.
pub fn generate(store: &ParamStore, model: &GanModel, captions: &[&EncodedCaption], z: &Tensor) -> Result<Vec<Tensor>> {
    if captions.is_empty() {
        return Err(Error::invalid("generate", "no captions"));
    }
    let mut ctx = Ctx::new(store, GroupSet::NONE, false);
    let d = captions[0].sentence.len();
    let sentence = Tensor::new(&[captions.len(), d], captions.iter().flat_map(|c| c.sentence.data().iter().copied()).collect())?;
    let cond = TextCondition {
        sentence: ctx.constant(sentence),
        words: captions.iter().map(|c| ctx.constant(c.words.clone())).collect(),
    };
    let zv = ctx.constant(z.clone());
    let out = model.generator.forward(&mut ctx, zv, &cond)?;
    Ok(out.images.iter().map(|&v| ctx.value(v).clone()).collect())
}

/// Rows `[start, start + len)` of every output of a discriminator.
fn split_rows(g: &mut Graph, d: &DiscOutput, start: usize, len: usize) -> Result<DiscOutput> {
    Ok(DiscOutput {
        logit_u: g.slice(d.logit_u, 0, start, len)?,
        logit_c: g.slice(d.logit_c, 0, start, len)?,
        feat_u: g.slice(d.feat_u, 0, start, len)?,
        feat_c: g.slice(d.feat_c, 0, start, len)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatched_never_points_to_same_image() {
        let imgs = [3, 3, 5, 7, 3, 3, 5, 9];
        for (i, &j) in mismatched(&imgs).iter().enumerate() {
            assert_ne!(imgs[i], imgs[j]);
        }
    }

    #[test]
    fn report_columns_line_up() {
        let r = LossReport::default();
        assert_eq!(LossReport::columns().len(), r.values().len());
    }
}
