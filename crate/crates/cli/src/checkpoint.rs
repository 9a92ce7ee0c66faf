//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SDGANCKP" | version u32 | config hash [32]
//! meta:       count u32, then (key str, value str)
//! params:     count u32, then (name str, group u8, trainable u8, ndim u32, dims u64.., values f32..)
//! optimizers: count u32, then (name str, step u64, lr beta1 beta2 eps f64,
//!             count u32, then (param str, len u64, m f32.., v f32..))
//! rng:        flag u8, then seed [32], stream u64, word position u128
//! step u64
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sdgan_core::nn::{Adam, AdamConfig, Group, Moments, ParamStore};

use crate::error::{CliError, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"SDGANCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub group: Group,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub meta: BTreeMap<String, String>,
    pub params: Vec<TensorRecord>,
    pub optimizers: BTreeMap<String, Adam>,
    pub rng: Option<RngState>,
    pub step: u64,
}

const GROUPS: [Group; 5] = [Group::TextEncoder, Group::ImageEncoder, Group::Generator, Group::Discriminator, Group::Oracle];

fn group_code(g: Group) -> u8 {
    GROUPS.iter().position(|&x| x == g).expect("listed group") as u8
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32]) -> Self {
        Checkpoint {
            config_hash,
            meta: BTreeMap::new(),
            params: Vec::new(),
            optimizers: BTreeMap::new(),
            rng: None,
            step: 0,
        }
    }

    /// Records every parameter of `store`, in store order.
    pub fn with_store(mut self, store: &ParamStore) -> Self {
        self.params = store
            .iter()
            .map(|(_, p)| TensorRecord {
                name: p.name.clone(),
                group: p.group,
                trainable: p.trainable,
                shape: p.shape.clone(),
                data: p.data.clone(),
            })
            .collect();
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Checkpoint(format!("missing metadata `{key}`")))
    }

    /// Writes recorded values into every parameter of `store`; each must be
    /// present with the same shape.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let by_name: BTreeMap<&str, &TensorRecord> = self.params.iter().map(|r| (r.name.as_str(), r)).collect();
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let r = by_name
                .get(name.as_str())
                .ok_or_else(|| CliError::Checkpoint(format!("parameter `{name}` missing")))?;
            let id = store.id(&name).expect("listed name");
            if store.get(id).shape != r.shape {
                return Err(CliError::Checkpoint(format!(
                    "parameter `{name}`: shape {:?} in checkpoint, {:?} expected",
                    r.shape,
                    store.get(id).shape
                )));
            }
            store.set(&name, &r.data)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.0.extend_from_slice(&self.config_hash);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name);
            w.0.push(group_code(p.group));
            w.0.push(p.trainable as u8);
            w.u32(p.shape.len() as u32);
            for &d in &p.shape {
                w.u64(d as u64);
            }
            w.f32s(&p.data);
        }
        w.u32(self.optimizers.len() as u32);
        for (name, opt) in &self.optimizers {
            w.str(name);
            w.u64(opt.step);
            for x in [opt.config.lr, opt.config.beta1, opt.config.beta2, opt.config.eps] {
                w.0.extend_from_slice(&x.to_le_bytes());
            }
            w.u32(opt.state.len() as u32);
            for (param, m) in &opt.state {
                w.str(param);
                w.u64(m.m.len() as u64);
                w.f32s(&m.m);
                w.f32s(&m.v);
            }
        }
        match &self.rng {
            None => w.0.push(0),
            Some(r) => {
                w.0.push(1);
                w.0.extend_from_slice(&r.seed);
                w.u64(r.stream);
                w.0.extend_from_slice(&r.word_pos.to_le_bytes());
            }
        }
        w.u64(self.step);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CliError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Checkpoint(format!("format version {version}, this build reads {VERSION}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            meta.insert(k, r.str()?);
        }
        let mut params = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let g = r.u8()? as usize;
            let group = *GROUPS.get(g).ok_or_else(|| CliError::Checkpoint(format!("`{name}`: bad group code {g}")))?;
            let trainable = r.u8()? != 0;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| CliError::Checkpoint("shape overflow".into()))?;
            let data = r.f32s(n)?;
            params.push(TensorRecord {
                name,
                group,
                trainable,
                shape,
                data,
            });
        }
        let mut optimizers = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let step = r.u64()?;
            let mut c = [0.0; 4];
            for x in &mut c {
                *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
            let mut opt = Adam::new(AdamConfig {
                lr: c[0],
                beta1: c[1],
                beta2: c[2],
                eps: c[3],
            });
            opt.step = step;
            for _ in 0..r.u32()? {
                let param = r.str()?;
                let n = r.u64()? as usize;
                let m = r.f32s(n)?;
                let v = r.f32s(n)?;
                opt.state.insert(param, Moments { m, v });
            }
            optimizers.insert(name, opt);
        }
        let rng = match r.u8()? {
            0 => None,
            1 => Some(RngState {
                seed: r.take(32)?.try_into().expect("32 bytes"),
                stream: r.u64()?,
                word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")),
            }),
            f => return Err(CliError::Checkpoint(format!("bad rng flag {f}"))),
        };
        let step = r.u64()?;
        if r.pos != bytes.len() {
            return Err(CliError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_hash,
            meta,
            params,
            optimizers,
            rng,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        std::fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CliError::Checkpoint(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::Checkpoint("invalid UTF-8 string".into()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| CliError::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("a.w", &[2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.0], Group::Generator, true).unwrap();
        store.add("a.mean", &[2], vec![0.5, 0.25], Group::Generator, false).unwrap();
        let mut ck = Checkpoint::new([7; 32]).with_store(&store);
        ck.meta.insert("kind".into(), "test".into());
        let mut opt = Adam::new(AdamConfig::default());
        opt.step = 3;
        opt.state.insert("a.w".into(), Moments { m: vec![0.1; 4], v: vec![0.2; 4] });
        ck.optimizers.insert("g".into(), opt);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u32();
        ck.rng = Some(RngState::capture(&rng));
        ck.step = 42;
        ck
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        rng.next_u64();
        let mut copy = RngState::capture(&rng).restore();
        assert_eq!(rng.next_u64(), copy.next_u64());
    }

    #[test]
    fn version_and_truncation_are_errors() {
        let mut bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        bytes[8] = 2;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.starts_with("checkpoint error: format version 2"), "{err}");
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let ck = sample();
        let mut store = ParamStore::new();
        store.add("a.w", &[2, 2], vec![0.0; 4], Group::Generator, true).unwrap();
        ck.load_into(&mut store).unwrap();
        assert_eq!(store.get(store.id("a.w").unwrap()).data, ck.params[0].data);
        store.add("b", &[1], vec![0.0], Group::Generator, true).unwrap();
        assert!(ck.load_into(&mut store).is_err());
        let mut wrong = ParamStore::new();
        wrong.add("a.w", &[4], vec![0.0; 4], Group::Generator, true).unwrap();
        assert!(ck.load_into(&mut wrong).is_err());
    }
}
