//! The subcommands, as library functions.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdgan_core::gan::{sample_noise, GanModel};
use sdgan_core::metrics::{
    generated_consistency, generated_inception_score, mean_std, oracle_inception_score, OracleClassifier, OracleConfig,
};
use sdgan_core::nn::ParamStore;
use sdgan_core::synth::{build_dataset, caption_words, Dataset};
use sdgan_core::text::{
    pretrain_matching, similarity_gap, stack_images, ImageEncoder, MatchingConfig, MatchingItem, TextEncoder, TextEncoderConfig, Vocabulary,
};
use sdgan_core::train::{encode_captions, generate, EncodedCaption, LossReport, TrainSet, Trainer};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{hex, RunConfig};
use crate::data::{grid, read_dataset, save_rgb, write_dataset};
use crate::error::{CliError, IoContext, Result};

/// Image-encoder resolution used by matching pretraining.
const MATCH_RES: usize = 32;

pub fn gen_data(scenes: usize, seed: u64, captions: usize, out: &Path) -> Result<Dataset> {
    let ds = build_dataset(scenes, seed, captions)?;
    write_dataset(&ds, out)?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub epochs: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden: usize,
    pub batch_size: usize,
}

impl PretrainArgs {
    fn hash(&self) -> [u8; 32] {
        let s = format!(
            "epochs={}\nseed={}\nembed_dim={}\nhidden={}\nbatch_size={}\n",
            self.epochs, self.seed, self.embed_dim, self.hidden, self.batch_size
        );
        Sha256::digest(s).into()
    }
}

fn matching_items(ds_scenes: &[sdgan_core::synth::Scene], vocab: &Vocabulary) -> Result<Vec<MatchingItem>> {
    let mut items = Vec::new();
    for s in ds_scenes {
        let image = sdgan_core::synth::render(&s.spec, MATCH_RES)?;
        for c in &s.captions {
            items.push(MatchingItem {
                image: image.clone(),
                tokens: vocab.tokenize(c)?,
                group: s.id,
            });
        }
    }
    Ok(items)
}

/// A text encoder restored from a checkpoint, with the image encoder it was
/// trained against when present.
pub struct EncoderBundle {
    pub store: ParamStore,
    pub text: TextEncoder,
    pub image: Option<ImageEncoder>,
    pub vocab: Vocabulary,
}

fn vocab_meta(v: &Vocabulary) -> String {
    v.tokens().join("\n")
}

fn vocab_from_meta(ck: &Checkpoint) -> Result<Vocabulary> {
    let tokens = ck.meta("vocab")?.split('\n').map(str::to_string).collect();
    Ok(Vocabulary::from_tokens(tokens)?)
}

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta(key)?
        .parse()
        .map_err(|_| CliError::Checkpoint(format!("metadata `{key}` is not an integer")))
}

/// Returns the held-out `(matched, mismatched)` similarity after training.
pub fn pretrain_encoder(args: &PretrainArgs) -> Result<(f64, f64)> {
    if args.epochs == 0 {
        return Err(CliError::Usage("pretrain-encoder needs at least one epoch".into()));
    }
    let ds = read_dataset(&args.data)?;
    let vocab = Vocabulary::from_words(caption_words());
    let train = matching_items(&ds.train, &vocab)?;
    let test = matching_items(&ds.test, &vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut store = ParamStore::new();
    let cfg = TextEncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: args.embed_dim,
        hidden: args.hidden,
    };
    let text = TextEncoder::new(&mut store, cfg, &mut rng)?;
    let image = ImageEncoder::new(&mut store, MATCH_RES, cfg.feature_dim(), &mut rng)?;
    let mcfg = MatchingConfig {
        steps: args.epochs * train.len().div_ceil(args.batch_size),
        batch_size: args.batch_size,
        ..MatchingConfig::default()
    };
    pretrain_matching(&mut store, &text, &image, &train, mcfg, &mut rng)?;
    let probe: Vec<MatchingItem> = test.into_iter().step_by(5).take(64).collect();
    let gap = similarity_gap(&store, &text, &image, &probe)?;

    let mut ck = Checkpoint::new(args.hash()).with_store(&store);
    ck.meta.insert("kind".into(), "encoder".into());
    ck.meta.insert("vocab".into(), vocab_meta(&vocab));
    ck.meta.insert("embed_dim".into(), args.embed_dim.to_string());
    ck.meta.insert("hidden".into(), args.hidden.to_string());
    ck.save(&args.out)?;
    Ok(gap)
}

/// Rebuilds the encoder stored in `ck`; `with_image` also restores the image encoder.
pub fn encoder_from(ck: &Checkpoint, with_image: bool) -> Result<EncoderBundle> {
    let vocab = vocab_from_meta(ck)?;
    let cfg = TextEncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: meta_usize(ck, "embed_dim")?,
        hidden: meta_usize(ck, "hidden")?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let text = TextEncoder::new(&mut store, cfg, &mut rng)?;
    let image = if with_image {
        Some(ImageEncoder::new(&mut store, MATCH_RES, cfg.feature_dim(), &mut rng)?)
    } else {
        None
    };
    ck.load_into(&mut store)?;
    Ok(EncoderBundle { store, text, image, vocab })
}

pub fn load_encoder(path: &Path, with_image: bool) -> Result<EncoderBundle> {
    let ck = Checkpoint::load(path)?;
    if ck.meta("kind")? != "encoder" {
        return Err(CliError::Checkpoint(format!("{}: not an encoder checkpoint", path.display())));
    }
    encoder_from(&ck, with_image)
}

/// Trainer, data and bookkeeping of one `train` run.
pub struct Session {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub trainer: Trainer,
    pub train: TrainSet,
    pub test: TrainSet,
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self> {
        let enc = load_encoder(&config.encoder, false)?;
        let ds = read_dataset(&config.data)?;
        let n = if config.train_scenes == 0 { ds.train.len() } else { config.train_scenes.min(ds.train.len()) };
        let train = TrainSet::build(&enc.store, &enc.text, &enc.vocab, &ds.train[..n])?;
        let test = TrainSet::build(&enc.store, &enc.text, &enc.vocab, &ds.test)?;
        let mut tc = config.train;
        tc.gan.text_dim = enc.text.config.feature_dim();
        let trainer = Trainer::new(tc, enc.store, enc.text)?;
        Ok(Session {
            config,
            vocab: enc.vocab,
            trainer,
            train,
            test,
        })
    }

    pub fn total_steps(&self) -> u64 {
        (self.config.epochs * self.trainer.steps_per_epoch(&self.train)) as u64
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let t = &self.trainer;
        let mut ck = Checkpoint::new(self.config.hash()).with_store(&t.store);
        ck.meta.insert("kind".into(), "gan".into());
        ck.meta.insert("config".into(), self.config.canonical());
        ck.meta.insert("vocab".into(), vocab_meta(&self.vocab));
        ck.meta.insert("embed_dim".into(), t.encoder.config.embed_dim.to_string());
        ck.meta.insert("hidden".into(), t.encoder.config.hidden.to_string());
        ck.optimizers.insert("d".into(), t.opt_d.clone());
        ck.optimizers.insert("g".into(), t.opt_g.clone());
        ck.rng = Some(RngState::capture(&t.rng));
        ck.step = t.step;
        ck
    }

    /// Restores parameters, optimizers, RNG and step from a checkpoint of the same configuration.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.meta("kind")? != "gan" {
            return Err(CliError::Checkpoint("not a training checkpoint".into()));
        }
        if ck.config_hash != self.config.hash() {
            return Err(CliError::Checkpoint(format!(
                "config hash {} differs from the run's {}",
                hex(&ck.config_hash),
                hex(&self.config.hash())
            )));
        }
        let t = &mut self.trainer;
        ck.load_into(&mut t.store)?;
        let opt = |name: &str| ck.optimizers.get(name).cloned().ok_or_else(|| CliError::Checkpoint(format!("optimizer `{name}` missing")));
        t.opt_d = opt("d")?;
        t.opt_g = opt("g")?;
        t.rng = ck.rng.ok_or_else(|| CliError::Checkpoint("rng state missing".into()))?.restore();
        t.step = ck.step;
        Ok(())
    }

    /// Grid of the first scenes' first captions over every stage, from a fixed noise seed.
    pub fn sample_grid(&self, rows: usize) -> Result<image::RgbImage> {
        let caps: Vec<&EncodedCaption> = self.test.items.iter().take(rows).map(|i| &i.captions[0]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed ^ 0x5a5a);
        let z = sample_noise(caps.len(), self.trainer.model.config.z_dim, &mut rng);
        let stages = generate(&self.trainer.store, &self.trainer.model, &caps, &z)?;
        Ok(grid(&rows_of(&stages, caps.len()), 64))
    }
}

/// Regroups per-stage `[B×3×R×R]` batches into one row per sample.
fn rows_of(stages: &[sdgan_core::Tensor], n: usize) -> Vec<Vec<sdgan_core::Tensor>> {
    (0..n)
        .map(|i| {
            stages
                .iter()
                .map(|t| {
                    let per = t.len() / n;
                    sdgan_core::Tensor::new(&t.shape()[1..], t.data()[i * per..(i + 1) * per].to_vec()).expect("image shape")
                })
                .collect()
        })
        .collect()
}

fn csv_line(r: &LossReport) -> String {
    let v = r.values();
    let mut s = format!("{}", r.step);
    for x in &v[1..] {
        s.push(',');
        s.push_str(&format!("{x:e}"));
    }
    s
}

/// Keeps the header and the rows before `step`.
fn truncate_csv(path: &Path, step: u64) -> Result<()> {
    let text = std::fs::read_to_string(path).at(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).at(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub fn ckpt_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt_{step:06}.bin"))
}

pub fn train(config: RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let mut s = Session::new(config)?;
    let out = s.config.out.clone();
    std::fs::create_dir_all(&out).at(&out)?;
    let csv = out.join("losses.csv");
    let mut checkpoints = Vec::new();
    match resume {
        Some(p) => {
            s.restore(&Checkpoint::load(p)?)?;
            if csv.exists() {
                truncate_csv(&csv, s.trainer.step)?;
            } else {
                std::fs::write(&csv, format!("{}\n", LossReport::columns().join(","))).at(&csv)?;
            }
        }
        None => {
            std::fs::write(&csv, format!("{}\n", LossReport::columns().join(","))).at(&csv)?;
            let p = ckpt_path(&out, 0);
            s.checkpoint().save(&p)?;
            checkpoints.push(p);
        }
    }
    let total = s.total_steps();
    let mut log = OpenOptions::new().append(true).open(&csv).at(&csv)?;
    let mut reports = Vec::new();
    while s.trainer.step < total {
        let r = s.trainer.train_step(&s.train)?;
        writeln!(log, "{}", csv_line(&r)).at(&csv)?;
        reports.push(r);
        let step = s.trainer.step;
        if s.config.checkpoint_every > 0 && step % s.config.checkpoint_every == 0 && step < total {
            let p = ckpt_path(&out, step);
            s.checkpoint().save(&p)?;
            checkpoints.push(p);
        }
        if s.config.sample_every > 0 && step % s.config.sample_every == 0 && step < total {
            save_rgb(&s.sample_grid(4)?, &out.join(format!("samples_{step:06}.png")))?;
        }
    }
    let step = s.trainer.step;
    let last = ckpt_path(&out, step);
    if !checkpoints.contains(&last) {
        s.checkpoint().save(&last)?;
        checkpoints.push(last.clone());
    }
    save_rgb(&s.sample_grid(4)?, &out.join(format!("samples_{step:06}.png")))?;
    Ok(TrainSummary {
        reports,
        checkpoints,
        final_checkpoint: last,
    })
}

/// A trained generator restored from a `train` checkpoint.
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub gan: GanModel,
    pub encoder: TextEncoder,
    pub vocab: Vocabulary,
    pub hash: [u8; 32],
}

pub fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    if ck.meta("kind")? != "gan" {
        return Err(CliError::Checkpoint(format!("{}: not a training checkpoint", path.display())));
    }
    let config = RunConfig::parse(ck.meta("config")?)?;
    let mut enc = encoder_from(&ck, false)?;
    let mut gc = config.train.gan;
    gc.text_dim = enc.text.config.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gan = GanModel::new(&mut enc.store, gc, &mut rng)?;
    ck.load_into(&mut enc.store)?;
    Ok(Model {
        config,
        store: enc.store,
        gan,
        encoder: enc.text,
        vocab: enc.vocab,
        hash: ck.config_hash,
    })
}

/// Returns the words that were not in the vocabulary.
pub fn sample(ckpt: &Path, text: &str, seed: u64, count: usize, out: &Path) -> Result<Vec<String>> {
    let m = load_model(ckpt)?;
    let unknown = m.vocab.unknown_words(text);
    let tokens = m.vocab.tokenize(text)?;
    let enc = encode_captions(&m.store, &m.encoder, &vec![tokens; count.max(1)])?;
    let caps: Vec<&EncodedCaption> = enc.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_noise(caps.len(), m.gan.config.z_dim, &mut rng);
    let stages = generate(&m.store, &m.gan, &caps, &z)?;
    save_rgb(&grid(&rows_of(&stages, caps.len()), 64), out)?;
    Ok(unknown)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    InceptionScore,
    Consistency,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "is" => Ok(Metric::InceptionScore),
            "consistency" => Ok(Metric::Consistency),
            other => Err(CliError::Usage(format!("unknown metric `{other}` (expected `is` or `consistency`)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::InceptionScore => "is",
            Metric::Consistency => "consistency",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalArgs {
    /// `None` scores the real renders of every scene (inception score only).
    pub ckpt: Option<PathBuf>,
    pub data: PathBuf,
    pub metric: Metric,
    pub seed: u64,
    pub oracle_steps: usize,
    pub splits: usize,
    pub pairs: usize,
    pub repeats: usize,
}

pub fn train_oracle(seed: u64, steps: usize) -> Result<OracleClassifier> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = OracleConfig {
        steps,
        ..OracleConfig::default()
    };
    let mut oracle = OracleClassifier::new(cfg.hidden, &mut rng)?;
    oracle.train(&cfg, &mut rng)?;
    oracle.ensure_validated()?;
    Ok(oracle)
}

pub fn eval(args: &EvalArgs) -> Result<MetricReport> {
    let ds = read_dataset(&args.data)?;
    let oracle = train_oracle(args.seed, args.oracle_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let Some(ckpt) = &args.ckpt else {
        if args.metric != Metric::InceptionScore {
            return Err(CliError::Usage("consistency needs --ckpt".into()));
        }
        let imgs = ds
            .scenes()
            .map(|s| sdgan_core::synth::render(&s.spec, 32))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let batch = stack_images(&imgs.iter().collect::<Vec<_>>())?;
        let (mean, std) = oracle_inception_score(&oracle, &batch, args.splits)?;
        return Ok(MetricReport {
            metric: "is".into(),
            mean,
            std,
            config_hash: hex(&Sha256::digest(b"real")),
        });
    };
    let m = load_model(ckpt)?;
    let test = TrainSet::build(&m.store, &m.encoder, &m.vocab, &ds.test)?;
    let (mean, std) = match args.metric {
        Metric::InceptionScore => generated_inception_score(&m.store, &m.gan, &oracle, &test, args.splits, &mut rng)?,
        Metric::Consistency => {
            let xs = (0..args.repeats.max(1))
                .map(|_| generated_consistency(&m.store, &m.gan, &oracle, &test, args.pairs, &mut rng))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            mean_std(&xs)
        }
    };
    Ok(MetricReport {
        metric: args.metric.name().into(),
        mean,
        std,
        config_hash: hex(&m.hash),
    })
}
