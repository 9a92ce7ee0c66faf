//! Stacked generators with a conditioned normalization site after every
//! upsampling block, and per-stage two-branch discriminators.
//!
//! Resolutions are 8, 16 and 32 pixels. Stage 0 maps `concat(z, s̄)` to a
//! 4×4 seed; later stages join the previous hidden map with `s̄` and double
//! the resolution.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Conv, Ctx, Group, Init, Linear, ParamId, ParamStore};
use crate::norm::{batch_norm, BatchNormLayer, ScbnMode, ScbnSite, TextCondition};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanConfig {
    pub z_dim: usize,
    pub text_dim: usize,
    /// Channels of the 4×4 seed; halved by every upsampling block.
    pub g_channels: usize,
    /// Discriminator trunk widths.
    pub d_channels: [usize; 3],
    /// Length of the contrastive feature vectors `v`, `v_c`.
    pub feat_dim: usize,
    pub scbn: ScbnMode,
    /// 1 to 3 stages.
    pub stages: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            z_dim: 100,
            text_dim: 256,
            g_channels: 64,
            d_channels: [32, 64, 128],
            feat_dim: 256,
            scbn: ScbnMode::Word,
            stages: 3,
        }
    }
}

impl GanConfig {
    pub fn resolution(stage: usize) -> usize {
        8 << stage
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stages) {
            return Err(Error::invalid("gan", "stages must be 1, 2 or 3"));
        }
        if self.g_channels % 8 != 0 || self.g_channels < 8 {
            return Err(Error::invalid("gan", "g_channels must be a positive multiple of 8"));
        }
        if self.z_dim == 0 || self.text_dim == 0 || self.feat_dim == 0 || self.d_channels.contains(&0) {
            return Err(Error::invalid("gan", "dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Entry {
    /// Dense map of `concat(z, s̄)` to the 4×4 seed.
    Seed { dense: Linear, bn: BatchNormLayer },
    /// `conv1×1(h) + linear(s̄)`, i.e. a 1×1 convolution over the channel
    /// concatenation of `h` and the spatially replicated sentence vector.
    Join { conv: Conv, text: Linear, bn: BatchNormLayer },
}

#[derive(Debug, Clone)]
pub struct GeneratorStage {
    pub index: usize,
    entry: Entry,
    pub up_conv: Conv,
    pub scbn: ScbnSite,
    pub to_image: Conv,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GanConfig,
    pub stages: Vec<GeneratorStage>,
}

/// Images (`[B×3×R×R]`, one per stage) and the hidden maps that feed the next stage.
#[derive(Debug, Clone)]
pub struct GenOutput {
    pub images: Vec<Var>,
    pub hidden: Vec<Var>,
}

impl Generator {
    pub fn new(store: &mut ParamStore, config: GanConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let g = Group::Generator;
        let mut stages = Vec::new();
        let mut ch = config.g_channels;
        for k in 0..config.stages {
            let name = alloc::format!("g{k}");
            let f = |s: &str| alloc::format!("{name}.{s}");
            let (entry, in_ch) = if k == 0 {
                let dense = Linear::new(store, &f("seed"), config.z_dim + config.text_dim, ch * 16, Init::LeCun(1.0), g, rng)?;
                let bn = BatchNormLayer::new(store, &f("seed_bn"), ch, g)?;
                (Entry::Seed { dense, bn }, ch)
            } else {
                let conv = Conv::pointwise(store, &f("join"), ch, ch, Init::LeCun(1.0), g, rng)?;
                let text = Linear::new(store, &f("join_text"), config.text_dim, ch, Init::LeCun(1.0), g, rng)?;
                let bn = BatchNormLayer::new(store, &f("join_bn"), ch, g)?;
                (Entry::Join { conv, text, bn }, ch)
            };
            let out = in_ch / 2;
            let up_conv = Conv::same3(store, &f("up"), in_ch, out, Init::LeCun(1.0), g, rng)?;
            let scbn = ScbnSite::new(store, &f("scbn"), out, config.text_dim, config.scbn, g, rng)?;
            let to_image = Conv::same3(store, &f("img"), out, 3, Init::LeCun(1.0), g, rng)?;
            stages.push(GeneratorStage {
                index: k,
                entry,
                up_conv,
                scbn,
                to_image,
                in_channels: in_ch,
                out_channels: out,
            });
            ch = out;
        }
        Ok(Generator { config, stages })
    }

    /// Runs every stage. `z` is `[B×z_dim]`; the condition carries `[B×D]`
    /// sentence vectors and one word matrix per sample.
    pub fn forward(&self, ctx: &mut Ctx, z: Var, cond: &TextCondition) -> Result<GenOutput> {
        let zs = ctx.graph.shape(z).to_vec();
        let ss = ctx.graph.shape(cond.sentence).to_vec();
        let c = &self.config;
        if zs.len() != 2 || zs[1] != c.z_dim || ss.len() != 2 || ss[1] != c.text_dim || ss[0] != zs[0] || cond.words.len() != zs[0] {
            return Err(Error::shape("generate", &zs, &ss));
        }
        let b = zs[0];
        let mut images = Vec::new();
        let mut hidden: Vec<Var> = Vec::new();
        for stage in &self.stages {
            let h = match &stage.entry {
                Entry::Seed { dense, bn } => {
                    let zs = ctx.graph.concat(&[z, cond.sentence], 1)?;
                    let h = dense.forward(ctx, zs)?;
                    let h = ctx.graph.reshape(h, &[b, stage.in_channels, 4, 4])?;
                    batch_norm(bn, ctx, h)?
                }
                Entry::Join { conv, text, bn } => {
                    let prev = *hidden.last().expect("previous stage");
                    let hc = conv.forward(ctx, prev)?;
                    let t = text.forward(ctx, cond.sentence)?;
                    let t = ctx.graph.reshape(t, &[b, stage.in_channels, 1, 1])?;
                    let h = ctx.graph.add(hc, t)?;
                    batch_norm(bn, ctx, h)?
                }
            };
            let h = ctx.graph.relu(h)?;
            let h = ctx.graph.upsample_nearest2x(h)?;
            let h = stage.up_conv.forward(ctx, h)?;
            let h = stage.scbn.forward(ctx, h, cond)?;
            let h = ctx.graph.relu(h)?;
            let img = stage.to_image.forward(ctx, h)?;
            images.push(ctx.graph.tanh(img)?);
            hidden.push(h);
        }
        Ok(GenOutput { images, hidden })
    }
}

/// Per-sample outputs of one discriminator on a batch.
#[derive(Debug, Clone, Copy)]
pub struct DiscOutput {
    /// `[B]` logits of the unconditioned branch.
    pub logit_u: Var,
    /// `[B]` logits of the sentence-conditioned branch.
    pub logit_c: Var,
    /// `[B×F]` contrastive features `v`.
    pub feat_u: Var,
    /// `[B×F]` contrastive features `v_c`.
    pub feat_c: Var,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub stage: usize,
    pub trunk: Vec<Conv>,
    pub feat_u: Linear,
    pub logit_u: Linear,
    pub join: Conv,
    pub join_text: Linear,
    pub feat_c: Linear,
    pub logit_c: Linear,
    pub channels: usize,
}

impl Discriminator {
    /// Trunk of three convolutions ending at 4×4: the first `stage + 1`
    /// halve the resolution, the rest keep it.
    pub fn new(store: &mut ParamStore, stage: usize, config: &GanConfig, rng: &mut impl Rng) -> Result<Self> {
        let g = Group::Discriminator;
        let f = |s: &str| alloc::format!("d{stage}.{s}");
        let widths = [3, config.d_channels[0], config.d_channels[1], config.d_channels[2]];
        let mut trunk = Vec::new();
        for i in 0..3 {
            let conv = if i <= stage {
                Conv::down4(store, &f(&alloc::format!("conv{i}")), widths[i], widths[i + 1], Init::LeCun(1.0), g, rng)?
            } else {
                Conv::same3(store, &f(&alloc::format!("conv{i}")), widths[i], widths[i + 1], Init::LeCun(1.0), g, rng)?
            };
            trunk.push(conv);
        }
        let ch = config.d_channels[2];
        let flat = ch * 16;
        Ok(Discriminator {
            stage,
            trunk,
            feat_u: Linear::new(store, &f("feat_u"), flat, config.feat_dim, Init::LeCun(1.0), g, rng)?,
            logit_u: Linear::new(store, &f("logit_u"), config.feat_dim, 1, Init::LeCun(1.0), g, rng)?,
            join: Conv::pointwise(store, &f("join"), ch, ch, Init::LeCun(1.0), g, rng)?,
            join_text: Linear::new(store, &f("join_text"), config.text_dim, ch, Init::LeCun(1.0), g, rng)?,
            feat_c: Linear::new(store, &f("feat_c"), flat, config.feat_dim, Init::LeCun(1.0), g, rng)?,
            logit_c: Linear::new(store, &f("logit_c"), config.feat_dim, 1, Init::LeCun(1.0), g, rng)?,
            channels: ch,
        })
    }

    /// Scores `images[B×3×R×R]` against sentence vectors `s_bar[B×D]`.
    pub fn forward(&self, ctx: &mut Ctx, images: Var, s_bar: Var) -> Result<DiscOutput> {
        let s = ctx.graph.shape(images).to_vec();
        let res = GanConfig::resolution(self.stage);
        if s.len() != 4 || s[1] != 3 || s[2] != res || s[3] != res {
            return Err(Error::shape("discriminate", &s, &[3, res, res]));
        }
        let b = s[0];
        let mut h = images;
        for conv in &self.trunk {
            h = conv.forward(ctx, h)?;
            h = ctx.graph.leaky_relu(h)?;
        }
        let flat = self.channels * 16;

        let hu = ctx.graph.reshape(h, &[b, flat])?;
        let fu = self.feat_u.forward(ctx, hu)?;
        let fu = ctx.graph.leaky_relu(fu)?;
        let lu = self.logit_u.forward(ctx, fu)?;

        let hc = self.join.forward(ctx, h)?;
        let t = self.join_text.forward(ctx, s_bar)?;
        let t = ctx.graph.reshape(t, &[b, self.channels, 1, 1])?;
        let hc = ctx.graph.add(hc, t)?;
        let hc = ctx.graph.leaky_relu(hc)?;
        let hc = ctx.graph.reshape(hc, &[b, flat])?;
        let fc = self.feat_c.forward(ctx, hc)?;
        let fc = ctx.graph.leaky_relu(fc)?;
        let lc = self.logit_c.forward(ctx, fc)?;

        Ok(DiscOutput {
            logit_u: ctx.graph.reshape(lu, &[b])?,
            logit_c: ctx.graph.reshape(lc, &[b])?,
            feat_u: fu,
            feat_c: fc,
        })
    }
}

/// Concrete per-sample outputs of one stage: image, sigmoid scores and features.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs {
    pub image: Tensor,
    pub score_u: Vec<f64>,
    pub score_c: Vec<f64>,
    pub feat_u: Tensor,
    pub feat_c: Tensor,
}

impl StageOutputs {
    pub fn read(ctx: &Ctx, image: Var, d: &DiscOutput) -> Self {
        let sig = |v: Var| ctx.value(v).data().iter().map(|&x| crate::graph::sigmoid(x)).collect();
        StageOutputs {
            image: ctx.value(image).clone(),
            score_u: sig(d.logit_u),
            score_c: sig(d.logit_c),
            feat_u: ctx.value(d.feat_u).clone(),
            feat_c: ctx.value(d.feat_c).clone(),
        }
    }
}

/// Generator plus one discriminator per stage, all in one parameter store.
#[derive(Debug, Clone)]
pub struct GanModel {
    pub config: GanConfig,
    pub generator: Generator,
    pub discriminators: Vec<Discriminator>,
}

impl GanModel {
    pub fn new(store: &mut ParamStore, config: GanConfig, rng: &mut impl Rng) -> Result<Self> {
        let generator = Generator::new(store, config, rng)?;
        let discriminators = (0..config.stages).map(|k| Discriminator::new(store, k, &config, rng)).collect::<Result<Vec<_>>>()?;
        Ok(GanModel {
            config,
            generator,
            discriminators,
        })
    }

    /// Parameters owned by discriminator `stage`, found by name prefix.
    pub fn discriminator_params(store: &ParamStore, stage: usize) -> Vec<ParamId> {
        let prefix = alloc::format!("d{stage}.");
        store.iter().filter(|(_, p)| p.name.starts_with(&prefix)).map(|(id, _)| id).collect()
    }
}

/// Draws `[B×z_dim]` standard normal noise.
pub fn sample_noise(batch: usize, z_dim: usize, rng: &mut impl Rng) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..batch * z_dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(&[batch, z_dim], data).expect("noise shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GroupSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_shapes_follow_resolution_ladder() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = GanConfig {
            z_dim: 4,
            text_dim: 6,
            g_channels: 16,
            d_channels: [4, 4, 8],
            feat_dim: 5,
            ..GanConfig::default()
        };
        let model = GanModel::new(&mut store, cfg, &mut rng).unwrap();
        let mut ctx = Ctx::new(&store, GroupSet::NONE, true);
        let z = ctx.constant(sample_noise(2, 4, &mut rng));
        let s = ctx.constant(Tensor::zeros(&[2, 6]));
        let w = ctx.constant(Tensor::zeros(&[6, 3]));
        let cond = TextCondition {
            sentence: s,
            words: alloc::vec![w, w],
        };
        let out = model.generator.forward(&mut ctx, z, &cond).unwrap();
        for (k, img) in out.images.iter().enumerate() {
            let r = 8 << k;
            assert_eq!(ctx.graph.shape(*img), &[2, 3, r, r]);
            let d = model.discriminators[k].forward(&mut ctx, *img, s).unwrap();
            assert_eq!(ctx.graph.shape(d.feat_u), &[2, 5]);
            assert_eq!(ctx.graph.shape(d.logit_c), &[2]);
        }
        assert_eq!(ctx.graph.shape(out.hidden[2]), &[2, 2, 32, 32]);
    }
}
