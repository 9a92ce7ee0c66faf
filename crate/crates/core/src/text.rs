//! Caption vocabulary, a batched bi-directional LSTM encoder, and the
//! image-text matching objective used to pretrain it.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Adam, AdamConfig, Conv, Ctx, Group, GroupSet, Init, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Longest caption the encoder accepts, in tokens.
pub const MAX_TOKENS: usize = 32;

/// Lowercases, turns punctuation into spaces and splits on whitespace.
pub fn clean(text: &str) -> Vec<String> {
    let folded: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    folded.split_whitespace().map(ToString::to_string).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_words::<_, &str>([])
    }
}

impl Vocabulary {
    /// Specials first, then the distinct cleaned words in sorted order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set: Vec<String> = words.into_iter().flat_map(|w| clean(w.as_ref())).collect();
        set.sort();
        set.dedup();
        let mut tokens = alloc::vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(set);
        Self::from_tokens(tokens).expect("specials are in place")
    }

    /// Rebuilds a vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::invalid("vocabulary", "token list must start with <pad>, <unk>"));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid("vocabulary", alloc::format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token indices of `text`; unknown words map to [`UNK`].
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let words = clean(text);
        if words.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(words.iter().map(|w| self.get(w).unwrap_or(UNK)).collect())
    }

    /// Cleaned words of `text` that are not in the vocabulary.
    pub fn unknown_words(&self, text: &str) -> Vec<String> {
        clean(text).into_iter().filter(|w| self.get(w).is_none()).collect()
    }
}

/// Drops padding so every remaining token yields one feature column.
pub fn strip_padding(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| t != PAD).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Per direction; features are twice this wide.
    pub hidden: usize,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        TextEncoderConfig {
            vocab_size,
            embed_dim: 128,
            hidden: 128,
        }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Gate weights of one LSTM direction, gates ordered `i, f, g, o`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let g = Group::TextEncoder;
        let w_input = store.add(
            &alloc::format!("{name}.w_input"),
            &[input, 4 * hidden],
            Init::Normal(1.0 / libm::sqrtf(input as f32)).sample(&[input, 4 * hidden], rng),
            g,
            true,
        )?;
        let w_hidden = store.add(
            &alloc::format!("{name}.w_hidden"),
            &[hidden, 4 * hidden],
            Init::Normal(1.0 / libm::sqrtf(hidden as f32)).sample(&[hidden, 4 * hidden], rng),
            g,
            true,
        )?;
        let bias = store.add(&alloc::format!("{name}.bias"), &[4 * hidden], alloc::vec![0.0; 4 * hidden], g, true)?;
        Ok(LstmCell {
            w_input,
            w_hidden,
            bias,
            hidden,
        })
    }

    /// One step from precomputed input projections `xw[B×4H]`.
    fn step(&self, ctx: &mut Ctx, xw: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wh = ctx.param(self.w_hidden);
        let b = ctx.param(self.bias);
        let hd = self.hidden;
        let g = &mut ctx.graph;
        let hw = g.matmul(h, wh)?;
        let pre = g.add(xw, hw)?;
        let pre = g.add(pre, b)?;
        let i = g.slice(pre, 1, 0, hd)?;
        let f = g.slice(pre, 1, hd, hd)?;
        let cand = g.slice(pre, 1, 2 * hd, hd)?;
        let o = g.slice(pre, 1, 3 * hd, hd)?;
        let (i, f, o) = (g.sigmoid(i)?, g.sigmoid(f)?, g.sigmoid(o)?);
        let cand = g.tanh(cand)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }
}

/// Word features `[D×T]` and sentence vector `[D]` of one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub word_feats: Tensor,
    pub sentence_feat: Tensor,
}

/// Batched encoder output on a tape.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `[B×D]`.
    pub sentence: Var,
    /// One `[D×T_n]` matrix per caption.
    pub words: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub embedding: ParamId,
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, config: TextEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let embedding = store.init("text.embedding", &[config.vocab_size, config.embed_dim], Init::Normal(0.1), Group::TextEncoder, rng)?;
        let forward = LstmCell::new(store, "text.fwd", config.embed_dim, config.hidden, rng)?;
        let backward = LstmCell::new(store, "text.bwd", config.embed_dim, config.hidden, rng)?;
        Ok(TextEncoder {
            config,
            embedding,
            forward,
            backward,
        })
    }

    /// Encodes captions of varying length in one pass. Padding is stripped
    /// first; shorter captions are masked so their state is frozen (forward
    /// direction) or still zero (backward direction) outside their span.
    pub fn encode_batch(&self, ctx: &mut Ctx, captions: &[Vec<usize>]) -> Result<EncodedBatch> {
        if captions.is_empty() {
            return Err(Error::invalid("encode", "no captions"));
        }
        let seqs: Vec<Vec<usize>> = captions.iter().map(|c| strip_padding(c)).collect();
        for s in &seqs {
            if s.is_empty() {
                return Err(Error::EmptyText);
            }
            if s.len() > MAX_TOKENS {
                return Err(Error::invalid("encode", alloc::format!("{} tokens exceed the limit of {MAX_TOKENS}", s.len())));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    index: bad,
                    size: self.config.vocab_size,
                });
            }
        }
        let b = seqs.len();
        let t_max = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let hd = self.config.hidden;
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();

        // rows ordered step-major: row t·B + n
        let ids: Vec<usize> = (0..t_max).flat_map(|t| seqs.iter().map(move |s| s.get(t).copied().unwrap_or(PAD))).collect();
        let emb = ctx.param(self.embedding);
        let x = ctx.graph.index_rows(emb, &ids)?;
        let wf = ctx.param(self.forward.w_input);
        let wb = ctx.param(self.backward.w_input);
        let xf = ctx.graph.matmul(x, wf)?;
        let xb = ctx.graph.matmul(x, wb)?;

        let mask = |ctx: &mut Ctx, t: usize| -> Option<Var> {
            if lens.iter().all(|&l| t < l) {
                return None;
            }
            let m: Vec<f64> = lens.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            Some(ctx.constant(Tensor::new(&[b, 1], m).expect("mask shape")))
        };
        let blend = |ctx: &mut Ctx, m: Option<Var>, new: Var, old: Var| -> Result<Var> {
            match m {
                None => Ok(new),
                Some(m) => {
                    let d = ctx.graph.sub(new, old)?;
                    let d = ctx.graph.mul(m, d)?;
                    ctx.graph.add(old, d)
                }
            }
        };

        let zero = ctx.constant(Tensor::zeros(&[b, hd]));
        let (mut h, mut c) = (zero, zero);
        let mut fwd = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let xw = ctx.graph.slice(xf, 0, t * b, b)?;
            let (hn, cn) = self.forward.step(ctx, xw, h, c)?;
            let m = mask(ctx, t);
            h = blend(ctx, m, hn, h)?;
            c = blend(ctx, m, cn, c)?;
            fwd.push(h);
        }
        let fwd_last = h;
        let (mut h, mut c) = (zero, zero);
        let mut bwd = alloc::vec![zero; t_max];
        for t in (0..t_max).rev() {
            let xw = ctx.graph.slice(xb, 0, t * b, b)?;
            let (hn, cn) = self.backward.step(ctx, xw, h, c)?;
            let m = mask(ctx, t);
            h = blend(ctx, m, hn, h)?;
            c = blend(ctx, m, cn, c)?;
            bwd[t] = h;
        }
        let sentence = ctx.graph.concat(&[fwd_last, h], 1)?;

        let fwd_all = ctx.graph.concat(&fwd, 0)?;
        let bwd_all = ctx.graph.concat(&bwd, 0)?;
        let mut words = Vec::with_capacity(b);
        for (n, &len) in lens.iter().enumerate() {
            let rows: Vec<usize> = (0..len).map(|t| t * b + n).collect();
            let f = ctx.graph.index_rows(fwd_all, &rows)?;
            let r = ctx.graph.index_rows(bwd_all, &rows)?;
            let both = ctx.graph.concat(&[f, r], 1)?;
            words.push(ctx.graph.transpose(both)?);
        }
        Ok(EncodedBatch { sentence, words })
    }

    /// Gradient-free encoding of one caption.
    pub fn encode(&self, store: &ParamStore, tokens: &[usize]) -> Result<EncoderOutput> {
        let mut out = self.encode_many(store, core::slice::from_ref(&tokens.to_vec()))?;
        Ok(out.remove(0))
    }

    /// Gradient-free encoding of many captions, batched.
    pub fn encode_many(&self, store: &ParamStore, captions: &[Vec<usize>]) -> Result<Vec<EncoderOutput>> {
        let mut ctx = Ctx::new(store, GroupSet::NONE, false);
        let enc = self.encode_batch(&mut ctx, captions)?;
        let d = self.config.feature_dim();
        let s = ctx.value(enc.sentence).data().to_vec();
        enc.words
            .iter()
            .enumerate()
            .map(|(n, &w)| {
                Ok(EncoderOutput {
                    word_feats: ctx.value(w).clone(),
                    sentence_feat: Tensor::new(&[d], s[n * d..(n + 1) * d].to_vec())?,
                })
            })
            .collect()
    }
}

/// Small convolutional image encoder used only by the matching objective.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub convs: Vec<Conv>,
    pub head: Linear,
    pub resolution: usize,
}

impl ImageEncoder {
    /// Three stride-2 convolutions (16, 32, 64 channels) and a linear head.
    pub fn new(store: &mut ParamStore, resolution: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if resolution % 8 != 0 || resolution == 0 {
            return Err(Error::invalid("image_encoder", "resolution must be a multiple of 8"));
        }
        let g = Group::ImageEncoder;
        let widths = [3, 16, 32, 64];
        let mut convs = Vec::new();
        for i in 0..3 {
            convs.push(Conv::down4(store, &alloc::format!("imgenc.conv{i}"), widths[i], widths[i + 1], Init::LeCun(1.0), g, rng)?);
        }
        let side = resolution / 8;
        let head = Linear::new(store, "imgenc.head", 64 * side * side, out_dim, Init::LeCun(1.0), g, rng)?;
        Ok(ImageEncoder { convs, head, resolution })
    }

    /// `images[B×3×R×R]` to embeddings `[B×out_dim]`.
    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let mut h = images;
        for conv in &self.convs {
            h = conv.forward(ctx, h)?;
            h = ctx.graph.leaky_relu(h)?;
        }
        let b = ctx.graph.shape(h)[0];
        let flat: usize = ctx.graph.shape(h)[1..].iter().product();
        let h = ctx.graph.reshape(h, &[b, flat])?;
        self.head.forward(ctx, h)
    }
}

/// Scales each row of `x[B×D]` to unit length.
pub fn normalize_rows(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let g = &mut ctx.graph;
    let sq = g.square(x)?;
    let ss = g.sum_axis(sq, 1)?;
    let ss = g.shift(ss, 1e-12)?;
    let norm = g.sqrt(ss)?;
    g.div(x, norm)
}

/// Symmetric batch-softmax cross-entropy over cosine similarities divided by
/// `temperature`; row `i` of each side is the positive for row `i` of the other.
pub fn matching_loss(ctx: &mut Ctx, images: Var, texts: Var, temperature: f64) -> Result<Var> {
    let b = ctx.graph.shape(images)[0];
    let a = normalize_rows(ctx, images)?;
    let t = normalize_rows(ctx, texts)?;
    let g = &mut ctx.graph;
    let tt = g.transpose(t)?;
    let sim = g.matmul(a, tt)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let eye = g.constant(Tensor::new(&[b, b], (0..b * b).map(|k| if k / b == k % b { 1.0 } else { 0.0 }).collect())?);
    let mut total = None;
    for side in [logits, g.transpose(logits)?] {
        let lp = g.log_softmax(side, 1)?;
        let picked = g.mul(lp, eye)?;
        let s = g.sum(picked)?;
        let l = g.scale(s, -0.5 / b as f64)?;
        total = Some(match total {
            None => l,
            Some(prev) => g.add(prev, l)?,
        });
    }
    Ok(total.expect("two sides"))
}

/// One (image, caption) pair; `group` identifies the source image so a batch
/// never holds two captions of the same picture.
#[derive(Debug, Clone)]
pub struct MatchingItem {
    /// `[3×R×R]`.
    pub image: Tensor,
    pub tokens: Vec<usize>,
    pub group: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig {
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
            temperature: 0.1,
        }
    }
}

/// Stacks `[3×R×R]` images into `[B×3×R×R]`.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("stack_images", "no images"))?;
    let mut shape = alloc::vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * images.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape("stack_images", first.shape(), im.shape()));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(&shape, data)
}

fn distinct_group_batch(items: &[MatchingItem], batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut seen = alloc::collections::BTreeSet::new();
    order.into_iter().filter(|&i| seen.insert(items[i].group)).take(batch).collect()
}

/// Trains the text and image encoders so matched pairs outscore mismatched
/// ones; returns the loss of every step.
pub fn pretrain_matching(
    store: &mut ParamStore,
    text: &TextEncoder,
    image: &ImageEncoder,
    items: &[MatchingItem],
    cfg: MatchingConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let groups: alloc::collections::BTreeSet<usize> = items.iter().map(|i| i.group).collect();
    if cfg.batch_size < 2 || groups.len() < cfg.batch_size {
        return Err(Error::DatasetTooSmall(alloc::format!(
            "{} distinct images for a matching batch of {}",
            groups.len(),
            cfg.batch_size
        )));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        ..AdamConfig::default()
    });
    let trainable = GroupSet::of(&[Group::TextEncoder, Group::ImageEncoder]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = distinct_group_batch(items, cfg.batch_size, rng);
        let imgs = stack_images(&idx.iter().map(|&i| &items[i].image).collect::<Vec<_>>())?;
        let caps: Vec<Vec<usize>> = idx.iter().map(|&i| items[i].tokens.clone()).collect();
        let grads = {
            let mut ctx = Ctx::new(store, trainable, true);
            let iv = ctx.constant(imgs);
            let ie = image.forward(&mut ctx, iv)?;
            let te = text.encode_batch(&mut ctx, &caps)?.sentence;
            let loss = matching_loss(&mut ctx, ie, te, cfg.temperature)?;
            let l = ctx.value(loss).item();
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: step as u64,
                    what: "matching".to_string(),
                });
            }
            losses.push(l);
            ctx.backward(loss)?;
            ctx.grads()
        };
        adam.update(store, &grads);
    }
    Ok(losses)
}

/// Mean cosine similarity of matched pairs and of pairs from different images.
pub fn similarity_gap(store: &ParamStore, text: &TextEncoder, image: &ImageEncoder, items: &[MatchingItem]) -> Result<(f64, f64)> {
    let mut ctx = Ctx::new(store, GroupSet::NONE, false);
    let imgs = stack_images(&items.iter().map(|i| &i.image).collect::<Vec<_>>())?;
    let iv = ctx.constant(imgs);
    let ie = image.forward(&mut ctx, iv)?;
    let caps: Vec<Vec<usize>> = items.iter().map(|i| i.tokens.clone()).collect();
    let te = text.encode_batch(&mut ctx, &caps)?.sentence;
    let a = normalize_rows(&mut ctx, ie)?;
    let t = normalize_rows(&mut ctx, te)?;
    let tt = ctx.graph.transpose(t)?;
    let sim = ctx.graph.matmul(a, tt)?;
    let s = ctx.value(sim).data();
    let n = items.len();
    let (mut matched, mut mismatched, mut count) = (0.0, 0.0, 0usize);
    for i in 0..n {
        matched += s[i * n + i];
        for j in 0..n {
            if items[i].group != items[j].group {
                mismatched += s[i * n + j];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::DatasetTooSmall("similarity needs at least two images".to_string()));
    }
    Ok((matched / n as f64, mismatched / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clean_folds_case_and_punctuation() {
        assert_eq!(clean("A red, CIRCLE."), ["a", "red", "circle"]);
        assert!(clean(" .,! ").is_empty());
    }

    #[test]
    fn vocabulary_round_trips_through_tokens() {
        let v = Vocabulary::from_words(["red circle", "blue square"]);
        assert_eq!(v.token(PAD), Some(PAD_TOKEN));
        assert_eq!(v.token(UNK), Some(UNK_TOKEN));
        assert_eq!(Vocabulary::from_tokens(v.tokens().to_vec()).unwrap(), v);
        assert!(Vocabulary::from_tokens(alloc::vec!["x".into()]).is_err());
    }

    #[test]
    fn encoder_masks_short_captions_like_solo_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = TextEncoderConfig {
            vocab_size: 9,
            embed_dim: 4,
            hidden: 3,
        };
        let enc = TextEncoder::new(&mut store, cfg, &mut rng).unwrap();
        let caps = alloc::vec![alloc::vec![2, 3, 4, 5], alloc::vec![6, 7], alloc::vec![8]];
        let batched = enc.encode_many(&store, &caps).unwrap();
        for (cap, out) in caps.iter().zip(&batched) {
            let solo = enc.encode(&store, cap).unwrap();
            assert!(solo.word_feats.max_abs_diff(&out.word_feats) < 1e-14);
            assert!(solo.sentence_feat.max_abs_diff(&out.sentence_feat) < 1e-14);
        }
    }
}
