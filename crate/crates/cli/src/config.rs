//! `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sdgan_core::gan::GanConfig;
use sdgan_core::norm::ScbnMode;
use sdgan_core::train::{ContrastiveNorm, LossConfig, TrainConfig};
use sha2::{Digest, Sha256};

use crate::error::{CliError, IoContext, Result};

/// `(key, default, description)`; an empty default marks a required key.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("data", "", "dataset directory written by gen-data"),
    ("encoder", "", "checkpoint written by pretrain-encoder"),
    ("out", "run", "output directory"),
    ("seed", "0", "initialisation, pairing and noise seed"),
    ("scbn", "word", "off | sentence | word | both | bn-sent | bn-word"),
    ("alpha", "0.1", "contrastive clamp for intra pairs"),
    ("epsilon", "1.0", "contrastive margin for inter pairs"),
    ("contrastive_stages", "0,1,2", "stages whose features enter the contrastive loss; `none` for no stage"),
    ("contrastive_weight", "1.0", "weight of the contrastive loss"),
    ("adversarial_weight", "1.0", "weight of the adversarial losses"),
    ("normalization", "per_pair_half", "per_pair_half | per_feature_dim"),
    ("batch_size", "8", "pairs per step"),
    ("intra_ratio", "0.5", "fraction of pairs sharing one image"),
    ("epochs", "1", "passes over the training scenes"),
    ("lr_g", "0.0002", "generator learning rate"),
    ("lr_d", "0.0002", "discriminator learning rate"),
    ("z_dim", "100", "noise length"),
    ("g_channels", "64", "generator width at 4x4"),
    ("d_channels", "32,64,128", "discriminator trunk widths"),
    ("feat_dim", "256", "length of the contrastive feature vectors"),
    ("stages", "3", "number of stages: 1 (8px), 2 (16px) or 3 (32px)"),
    ("unfreeze_encoder", "false", "let generator updates train the text encoder"),
    ("train_scenes", "0", "use only the first N training scenes; 0 for all"),
    ("checkpoint_every", "0", "steps between checkpoints; 0 for the final one only"),
    ("sample_every", "0", "steps between sample grids; 0 for the final one only"),
];

/// Keys that do not change the training trajectory and are left out of the hash.
const UNHASHED: &[&str] = &["out", "epochs", "checkpoint_every", "sample_every"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub values: BTreeMap<String, String>,
    pub data: PathBuf,
    pub encoder: PathBuf,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub epochs: usize,
    pub train_scenes: usize,
    pub checkpoint_every: u64,
    pub sample_every: u64,
}

fn default_of(key: &str) -> Option<&'static str> {
    SCHEMA.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

pub fn parse_scbn(s: &str) -> Option<ScbnMode> {
    ScbnMode::parse(s)
}

fn list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text)
    }

    /// Parses the file and validates every key; all problems are reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut errors = Vec::new();
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`", n + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if default_of(k).is_none() {
                errors.push(format!("line {}: unknown key `{k}`", n + 1));
            } else if values.insert(k.to_string(), v.to_string()).is_some() {
                errors.push(format!("line {}: duplicate key `{k}`", n + 1));
            }
        }
        for (k, d, _) in SCHEMA {
            if !values.contains_key(*k) {
                if d.is_empty() {
                    errors.push(format!("missing required key `{k}`"));
                } else {
                    values.insert(k.to_string(), d.to_string());
                }
            }
        }
        if !errors.is_empty() {
            return Err(CliError::Config(errors));
        }
        Self::from_values(values)
    }

    fn from_values(values: BTreeMap<String, String>) -> Result<Self> {
        let mut errors = Vec::new();
        let get = |k: &str| values[k].as_str();
        macro_rules! num {
            ($k:literal, $t:ty) => {
                get($k).parse::<$t>().unwrap_or_else(|_| {
                    errors.push(format!("`{}`: cannot parse `{}`", $k, get($k)));
                    Default::default()
                })
            };
        }
        let seed = num!("seed", u64);
        let alpha = num!("alpha", f64);
        let epsilon = num!("epsilon", f64);
        let contrastive_weight = num!("contrastive_weight", f64);
        let adversarial_weight = num!("adversarial_weight", f64);
        let batch_size = num!("batch_size", usize);
        let intra_ratio = num!("intra_ratio", f64);
        let epochs = num!("epochs", usize);
        let lr_g = num!("lr_g", f64);
        let lr_d = num!("lr_d", f64);
        let z_dim = num!("z_dim", usize);
        let g_channels = num!("g_channels", usize);
        let feat_dim = num!("feat_dim", usize);
        let stages = num!("stages", usize);
        let unfreeze_encoder = num!("unfreeze_encoder", bool);
        let train_scenes = num!("train_scenes", usize);
        let checkpoint_every = num!("checkpoint_every", u64);
        let sample_every = num!("sample_every", u64);

        let scbn = parse_scbn(get("scbn")).unwrap_or_else(|| {
            errors.push(format!("`scbn`: unknown mode `{}`", get("scbn")));
            ScbnMode::Off
        });
        let normalization = match get("normalization") {
            "per_pair_half" => ContrastiveNorm::PerPairHalf,
            "per_feature_dim" => ContrastiveNorm::PerFeatureDim,
            other => {
                errors.push(format!("`normalization`: unknown value `{other}`"));
                ContrastiveNorm::PerPairHalf
            }
        };
        let mut contrastive_stages = [false; 3];
        if get("contrastive_stages") != "none" {
            match list::<usize>(get("contrastive_stages")) {
                Some(v) if v.iter().all(|&k| k < 3) => v.iter().for_each(|&k| contrastive_stages[k] = true),
                _ => errors.push(format!("`contrastive_stages`: expected stage indices in 0..3, got `{}`", get("contrastive_stages"))),
            }
        }
        let d_channels = match list::<usize>(get("d_channels")) {
            Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
            _ => {
                errors.push(format!("`d_channels`: expected three widths, got `{}`", get("d_channels")));
                [1, 1, 1]
            }
        };
        if batch_size == 0 {
            errors.push("`batch_size` must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&intra_ratio) {
            errors.push("`intra_ratio` must lie in [0, 1]".to_string());
        }
        let loss = LossConfig {
            alpha,
            epsilon,
            contrastive_stages,
            contrastive_weight,
            adversarial_weight,
            normalization,
        };
        if let Err(e) = loss.validate() {
            errors.push(e.to_string());
        }
        let gan = GanConfig {
            z_dim,
            // fixed by the encoder checkpoint when training starts
            text_dim: 1,
            g_channels,
            d_channels,
            feat_dim,
            scbn,
            stages,
        };
        if let Err(e) = gan.validate() {
            errors.push(e.to_string());
        }
        if !errors.is_empty() {
            return Err(CliError::Config(errors));
        }
        let train = TrainConfig {
            gan,
            loss,
            batch_size,
            intra_ratio,
            lr_g,
            lr_d,
            unfreeze_encoder,
            seed,
        };
        Ok(RunConfig {
            data: PathBuf::from(get("data")),
            encoder: PathBuf::from(get("encoder")),
            out: PathBuf::from(get("out")),
            train,
            epochs,
            train_scenes,
            checkpoint_every,
            sample_every,
            values,
        })
    }

    /// Canonical `key = value` text of every key, sorted.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 over the keys that shape the training trajectory.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| !UNHASHED.contains(&k.as_str())) {
            h.update(format!("{k}={v}\n"));
        }
        h.finalize().into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
