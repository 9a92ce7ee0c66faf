//! Batch normalization and its semantically conditioned variants.
//!
//! * [`batch_norm`]: per-channel standardization over (N, H, W) plus a learned
//!   affine transform.
//! * [`cbn_apply`]: the affine transform shifted by condition-derived
//!   modulations, `(γ + γ_c)·x̂ + (β + β_c)`.
//! * [`SentenceHead`]: modulations from the global sentence vector through two
//!   one-hidden-layer perceptrons, broadcast over space.
//! * [`WordHead`]: modulations from a per-position attention over projected word
//!   features ([`vse`]) followed by two 1×1 convolutions.
//!
//! Every head starts with zeroed output layers, so a freshly built
//! conditioned site computes exactly plain batch normalization.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Conv, Ctx, Group, Init, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Width of the hidden layer of the sentence-level perceptrons.
pub const SENTENCE_HIDDEN: usize = 128;

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: Group) -> Result<Self> {
        let f = |s: &str| alloc::format!("{name}.{s}");
        Ok(BatchNormLayer {
            gamma: store.add(&f("gamma"), &[channels], alloc::vec![1.0; channels], group, true)?,
            beta: store.add(&f("beta"), &[channels], alloc::vec![0.0; channels], group, true)?,
            running_mean: store.buffer(&f("running_mean"), &[channels], 0.0, group)?,
            running_var: store.buffer(&f("running_var"), &[channels], 1.0, group)?,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    /// `(x − μ)/sqrt(σ² + eps)` with batch statistics in train mode (updating
    /// the running averages) and running statistics in eval mode.
    pub fn normalize(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape("batch_norm", &shape, &[self.channels]));
        }
        let c = self.channels;
        let (mean, var) = if ctx.is_train() {
            if shape[0] * shape[2] * shape[3] < 2 {
                return Err(Error::invalid("batch_norm", "train mode needs at least two values per channel"));
            }
            let (m, v) = ctx.graph.channel_stats(x)?;
            let (bm, bv) = (ctx.value(m).data().to_vec(), ctx.value(v).data().to_vec());
            let mo = self.momentum;
            let rm: Vec<f32> = ctx
                .buffer(self.running_mean)
                .iter()
                .zip(&bm)
                .map(|(r, b)| ((1.0 - mo) * *r as f64 + mo * b) as f32)
                .collect();
            let rv: Vec<f32> = ctx
                .buffer(self.running_var)
                .iter()
                .zip(&bv)
                .map(|(r, b)| ((1.0 - mo) * *r as f64 + mo * b) as f32)
                .collect();
            ctx.set_buffer(self.running_mean, rm);
            ctx.set_buffer(self.running_var, rv);
            (m, v)
        } else {
            let rm = Tensor::from_f32(&[c], &ctx.buffer(self.running_mean))?;
            let rv = Tensor::from_f32(&[c], &ctx.buffer(self.running_var))?;
            (ctx.constant(rm), ctx.constant(rv))
        };
        let g = &mut ctx.graph;
        let mean = g.reshape(mean, &[1, c, 1, 1])?;
        let var = g.reshape(var, &[1, c, 1, 1])?;
        let centered = g.sub(x, mean)?;
        let var_eps = g.shift(var, self.eps)?;
        let std = g.sqrt(var_eps)?;
        g.div(centered, std)
    }

    fn affine(&self, ctx: &mut Ctx) -> Result<(Var, Var)> {
        let c = self.channels;
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        Ok((ctx.graph.reshape(gamma, &[1, c, 1, 1])?, ctx.graph.reshape(beta, &[1, c, 1, 1])?))
    }
}

/// Per-channel modulation offsets `(γ_c, β_c)` broadcastable against `[N×C×H×W]`.
#[derive(Debug, Clone, Copy)]
pub struct ModulationParams {
    pub gamma: Var,
    pub beta: Var,
}

/// `γ·x̂ + β`.
pub fn batch_norm(layer: &BatchNormLayer, ctx: &mut Ctx, x: Var) -> Result<Var> {
    let xhat = layer.normalize(ctx, x)?;
    let (gamma, beta) = layer.affine(ctx)?;
    let scaled = ctx.graph.mul(gamma, xhat)?;
    ctx.graph.add(scaled, beta)
}

/// `(γ + γ_c)·x̂ + (β + β_c)`.
pub fn cbn_apply(layer: &BatchNormLayer, ctx: &mut Ctx, x: Var, mods: ModulationParams) -> Result<Var> {
    let xhat = layer.normalize(ctx, x)?;
    modulate(layer, ctx, xhat, mods)
}

fn modulate(layer: &BatchNormLayer, ctx: &mut Ctx, xhat: Var, mods: ModulationParams) -> Result<Var> {
    let (gamma, beta) = layer.affine(ctx)?;
    let g = &mut ctx.graph;
    let scale = g.add(gamma, mods.gamma)?;
    let shift = g.add(beta, mods.beta)?;
    let scaled = g.mul(scale, xhat)?;
    g.add(scaled, shift)
}

/// One-hidden-layer perceptron used for each sentence-level modulation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.hidden.forward(ctx, x)?;
        let h = ctx.graph.relu(h)?;
        self.out.forward(ctx, h)
    }
}

/// Sentence-level conditioning: `γ_c = f_γ(s̄)`, `β_c = f_β(s̄)`.
#[derive(Debug, Clone)]
pub struct SentenceHead {
    pub mlp_gamma: Mlp,
    pub mlp_beta: Mlp,
    pub channels: usize,
    pub sentence_dim: usize,
}

impl SentenceHead {
    pub fn new(store: &mut ParamStore, name: &str, sentence_dim: usize, channels: usize, group: Group, rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = |which: &str, store: &mut ParamStore| -> Result<Mlp> {
            Ok(Mlp {
                hidden: Linear::new(store, &alloc::format!("{name}.{which}.hidden"), sentence_dim, SENTENCE_HIDDEN, Init::LeCun(1.0), group, rng)?,
                out: Linear::new(store, &alloc::format!("{name}.{which}.out"), SENTENCE_HIDDEN, channels, Init::Zeros, group, rng)?,
            })
        };
        let mlp_gamma = mlp("gamma", store)?;
        let mlp_beta = mlp("beta", store)?;
        Ok(SentenceHead {
            mlp_gamma,
            mlp_beta,
            channels,
            sentence_dim,
        })
    }
}

/// Sentence modulations from `s̄[N×D]`, shaped `[N×C×1×1]`.
pub fn sentence_mods(head: &SentenceHead, ctx: &mut Ctx, s_bar: Var) -> Result<ModulationParams> {
    let shape = ctx.graph.shape(s_bar).to_vec();
    if shape.len() != 2 || shape[1] != head.sentence_dim {
        return Err(Error::shape("sentence_mods", &shape, &[head.sentence_dim]));
    }
    let n = shape[0];
    let gamma = head.mlp_gamma.forward(ctx, s_bar)?;
    let beta = head.mlp_beta.forward(ctx, s_bar)?;
    Ok(ModulationParams {
        gamma: ctx.graph.reshape(gamma, &[n, head.channels, 1, 1])?,
        beta: ctx.graph.reshape(beta, &[n, head.channels, 1, 1])?,
    })
}

/// Word-level conditioning: perception layer `f` plus two 1×1 convolutions.
#[derive(Debug, Clone)]
pub struct WordHead {
    pub perception: Linear,
    pub conv_gamma: Conv,
    pub conv_beta: Conv,
    pub channels: usize,
    pub word_dim: usize,
}

impl WordHead {
    pub fn new(store: &mut ParamStore, name: &str, word_dim: usize, channels: usize, group: Group, rng: &mut impl Rng) -> Result<Self> {
        Ok(WordHead {
            perception: Linear::new(store, &alloc::format!("{name}.perception"), word_dim, channels, Init::LeCun(1.0), group, rng)?,
            conv_gamma: Conv::pointwise(store, &alloc::format!("{name}.conv_gamma"), channels, channels, Init::Zeros, group, rng)?,
            conv_beta: Conv::pointwise(store, &alloc::format!("{name}.conv_beta"), channels, channels, Init::Zeros, group, rng)?,
            channels,
            word_dim,
        })
    }
}

/// Attention of every sub-region over the projected words of one sample.
#[derive(Debug, Clone, Copy)]
pub struct VseOutput {
    /// `[C×L]`: `vse_j = Σ_t softmax_t(v_jᵀ f(w_t)) · f(w_t)`.
    pub vse: Var,
    /// `[L×T]` attention weights; each row sums to one.
    pub weights: Var,
}

/// Visual-semantic embedding of one sample: `x_feats[C×L]`, `words[D×T]`.
pub fn vse(head: &WordHead, ctx: &mut Ctx, x_feats: Var, words: Var) -> Result<VseOutput> {
    let xs = ctx.graph.shape(x_feats).to_vec();
    let ws = ctx.graph.shape(words).to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[0] != head.channels || ws[0] != head.word_dim {
        return Err(Error::shape("vse", &xs, &ws));
    }
    let words_t = ctx.graph.transpose(words)?; // T×D
    let proj_t = head.perception.forward(ctx, words_t)?; // T×C
    let g = &mut ctx.graph;
    let proj = g.transpose(proj_t)?; // C×T
    let regions = g.transpose(x_feats)?; // L×C
    let scores = g.matmul(regions, proj)?; // L×T
    let weights = g.softmax(scores, 1)?;
    let vse_t = g.matmul(weights, proj_t)?; // L×C
    let vse = g.transpose(vse_t)?;
    Ok(VseOutput { vse, weights })
}

/// Batched [`vse`]: `x[N×C×H×W]` with one `[D×T_n]` word matrix per sample,
/// giving the `[N×C×H×W]` fused map.
pub fn vse_map(head: &WordHead, ctx: &mut Ctx, x: Var, words: &[Var]) -> Result<Var> {
    let s = ctx.graph.shape(x).to_vec();
    if s.len() != 4 || s[0] != words.len() {
        return Err(Error::shape("vse_map", &s, &[words.len()]));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut maps = Vec::with_capacity(words.len());
    for (n, &wn) in words.iter().enumerate() {
        let xn = ctx.graph.slice(x, 0, n, 1)?;
        let xn = ctx.graph.reshape(xn, &[c, h * w])?;
        let out = vse(head, ctx, xn, wn)?;
        maps.push(ctx.graph.reshape(out.vse, &[1, c, h, w])?);
    }
    ctx.graph.concat(&maps, 0)
}

/// `γ_c = conv_γ(vse)`, `β_c = conv_β(vse)`: per-sample, per-position modulations.
pub fn word_mods(head: &WordHead, ctx: &mut Ctx, vse_map: Var) -> Result<ModulationParams> {
    let s = ctx.graph.shape(vse_map).to_vec();
    if s.len() != 4 || s[1] != head.channels {
        return Err(Error::shape("word_mods", &s, &[head.channels]));
    }
    Ok(ModulationParams {
        gamma: head.conv_gamma.forward(ctx, vse_map)?,
        beta: head.conv_beta.forward(ctx, vse_map)?,
    })
}

/// Which linguistic cue conditions a normalization site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CueLevel {
    Sentence,
    #[default]
    Word,
}

/// Plain batch norm followed by channel concatenation of a cue map:
/// the sentence vector replicated over space, or the word-attention map.
pub fn bn_concat_baseline(layer: &BatchNormLayer, ctx: &mut Ctx, x: Var, cue: Var, level: CueLevel) -> Result<Var> {
    let y = batch_norm(layer, ctx, x)?;
    concat_cue(ctx, y, cue, level)
}

fn concat_cue(ctx: &mut Ctx, y: Var, cue: Var, level: CueLevel) -> Result<Var> {
    let ys = ctx.graph.shape(y).to_vec();
    let cs = ctx.graph.shape(cue).to_vec();
    let cue_map = match level {
        CueLevel::Sentence => {
            if cs.len() != 2 || cs[0] != ys[0] {
                return Err(Error::shape("bn_concat_baseline", &ys, &cs));
            }
            let r = ctx.graph.reshape(cue, &[cs[0], cs[1], 1, 1])?;
            ctx.graph.expand(r, &[ys[0], cs[1], ys[2], ys[3]])?
        }
        CueLevel::Word => {
            if cs.len() != 4 || cs[0] != ys[0] || cs[2] != ys[2] || cs[3] != ys[3] {
                return Err(Error::shape("bn_concat_baseline", &ys, &cs));
            }
            cue
        }
    };
    ctx.graph.concat(&[y, cue_map], 1)
}

/// Conditioning mode of a generator normalization site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScbnMode {
    /// Plain batch normalization.
    Off,
    Sentence,
    #[default]
    Word,
    /// Sentence and word modulations summed.
    Both,
    /// Batch norm, then concatenation with a cue map and a 1×1 fuse conv.
    Concat(CueLevel),
}

impl ScbnMode {
    pub fn name(self) -> &'static str {
        match self {
            ScbnMode::Off => "off",
            ScbnMode::Sentence => "sentence",
            ScbnMode::Word => "word",
            ScbnMode::Both => "both",
            ScbnMode::Concat(CueLevel::Sentence) => "bn-sent",
            ScbnMode::Concat(CueLevel::Word) => "bn-word",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "off" => ScbnMode::Off,
            "sentence" => ScbnMode::Sentence,
            "word" => ScbnMode::Word,
            "both" => ScbnMode::Both,
            "bn-sent" => ScbnMode::Concat(CueLevel::Sentence),
            "bn-word" => ScbnMode::Concat(CueLevel::Word),
            _ => return None,
        })
    }
}

/// Text features consumed by conditioned sites for a batch.
#[derive(Debug, Clone)]
pub struct TextCondition {
    /// `[N×D]` sentence vectors.
    pub sentence: Var,
    /// One `[D×T_n]` word-feature matrix per sample.
    pub words: Vec<Var>,
}

/// A normalization site whose behaviour is chosen by [`ScbnMode`].
#[derive(Debug, Clone)]
pub struct ScbnSite {
    pub mode: ScbnMode,
    pub bn: BatchNormLayer,
    pub sentence: Option<SentenceHead>,
    pub word: Option<WordHead>,
    pub fuse: Option<Conv>,
}

impl ScbnSite {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, text_dim: usize, mode: ScbnMode, group: Group, rng: &mut impl Rng) -> Result<Self> {
        let bn = BatchNormLayer::new(store, &alloc::format!("{name}.bn"), channels, group)?;
        let needs_sentence = matches!(mode, ScbnMode::Sentence | ScbnMode::Both);
        let needs_word = matches!(mode, ScbnMode::Word | ScbnMode::Both | ScbnMode::Concat(CueLevel::Word));
        let sentence = if needs_sentence {
            Some(SentenceHead::new(store, &alloc::format!("{name}.sent"), text_dim, channels, group, rng)?)
        } else {
            None
        };
        let word = if needs_word {
            Some(WordHead::new(store, &alloc::format!("{name}.word"), text_dim, channels, group, rng)?)
        } else {
            None
        };
        let fuse = match mode {
            ScbnMode::Concat(level) => {
                let cue = if level == CueLevel::Sentence { text_dim } else { channels };
                Some(Conv::pointwise(store, &alloc::format!("{name}.fuse"), channels + cue, channels, Init::LeCun(1.0), group, rng)?)
            }
            _ => None,
        };
        Ok(ScbnSite { mode, bn, sentence, word, fuse })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, cond: &TextCondition) -> Result<Var> {
        match self.mode {
            ScbnMode::Off => batch_norm(&self.bn, ctx, x),
            ScbnMode::Concat(level) => {
                let xhat = self.bn.normalize(ctx, x)?;
                let cue = match level {
                    CueLevel::Sentence => cond.sentence,
                    CueLevel::Word => vse_map(self.word.as_ref().expect("word head"), ctx, xhat, &cond.words)?,
                };
                let (gamma, beta) = self.bn.affine(ctx)?;
                let y = ctx.graph.mul(gamma, xhat)?;
                let y = ctx.graph.add(y, beta)?;
                let joined = concat_cue(ctx, y, cue, level)?;
                self.fuse.as_ref().expect("fuse conv").forward(ctx, joined)
            }
            ScbnMode::Sentence | ScbnMode::Word | ScbnMode::Both => {
                let xhat = self.bn.normalize(ctx, x)?;
                let mut mods: Option<ModulationParams> = None;
                if let Some(head) = &self.sentence {
                    mods = Some(sentence_mods(head, ctx, cond.sentence)?);
                }
                if let Some(head) = &self.word {
                    let map = vse_map(head, ctx, xhat, &cond.words)?;
                    let wm = word_mods(head, ctx, map)?;
                    mods = Some(match mods {
                        None => wm,
                        Some(sm) => ModulationParams {
                            gamma: ctx.graph.add(sm.gamma, wm.gamma)?,
                            beta: ctx.graph.add(sm.beta, wm.beta)?,
                        },
                    });
                }
                modulate(&self.bn, ctx, xhat, mods.expect("conditioned mode has a head"))
            }
        }
    }
}
