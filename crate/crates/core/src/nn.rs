//! Parameter storage, forward context, basic layers and the Adam optimizer.
//!
//! Parameters are stored as `f32` (the checkpoint precision) and promoted to
//! `f64` when bound onto a [`Graph`]. Optimizer updates are computed in `f64`
//! and rounded back, so a save/load cycle is lossless.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Ownership group used to freeze or train sub-networks independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    TextEncoder,
    ImageEncoder,
    Generator,
    Discriminator,
    Oracle,
}

impl Group {
    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of groups that receive gradients in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const NONE: GroupSet = GroupSet(0);

    pub fn of(groups: &[Group]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub group: Group,
    /// Running statistics and other buffers are stored but never optimized.
    pub trainable: bool,
}

impl Param {
    pub fn tensor(&self) -> Tensor {
        Tensor::from_f32(&self.shape, &self.data).expect("param shape is consistent")
    }
}

/// Named, ordered parameter collection shared by every model in a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f32>, group: Group, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid("param_store", alloc::format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid("param_store", alloc::format!("{name}: shape/data mismatch")));
        }
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            group,
            trainable,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, group: Group, rng: &mut impl Rng) -> Result<ParamId> {
        let data = init.sample(shape, rng);
        self.add(name, shape, data, group, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32, group: Group) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n], group, false)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Replaces the values of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, data: &[f32]) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let p = &mut self.params[id.0];
        if p.data.len() != data.len() {
            return Err(Error::shape("param_store", &p.shape, &[data.len()]));
        }
        p.data.copy_from_slice(data);
        Ok(())
    }

    /// Copies every parameter of `other` whose name exists here.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (_, p) in other.iter() {
            if self.id(&p.name).is_some() {
                self.set(&p.name, &p.data)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn num_values(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.data.len()).sum()
    }
}

/// Parameter initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f32),
    Normal(f32),
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    LeCun(f32),
}

impl Init {
    pub fn sample(self, shape: &[usize], rng: &mut impl Rng) -> Vec<f32> {
        let n: usize = shape.iter().product();
        let fan_in: usize = if shape.len() > 1 { shape[1..].iter().product() } else { 1 };
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); std * z as f32 }).collect(),
            Init::LeCun(gain) => {
                let std = gain / libm::sqrtf(fan_in as f32);
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        std * z as f32
                    })
                    .collect()
            }
        }
    }
}

/// One forward pass: the tape plus lazily bound parameters.
///
/// Every use of a parameter within a context resolves to the same tape node,
/// which is what makes weight sharing between Siamese branches structural.
pub struct Ctx<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: GroupSet,
    train: bool,
    stats: BTreeMap<ParamId, Vec<f32>>,
}

impl<'a> Ctx<'a> {
    /// `train` selects batch statistics (and running-stat updates) in normalization layers.
    pub fn new(store: &'a ParamStore, trainable: GroupSet, train: bool) -> Self {
        Ctx {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
            train,
            stats: BTreeMap::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape node for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let t = p.tensor();
        let v = if p.trainable && self.trainable.contains(p.group) {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Node already bound for `id`, if any.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Current value of a buffer, including updates made earlier in this pass.
    pub fn buffer(&self, id: ParamId) -> Vec<f32> {
        self.stats.get(&id).cloned().unwrap_or_else(|| self.store.get(id).data.clone())
    }

    pub fn set_buffer(&mut self, id: ParamId, data: Vec<f32>) {
        self.stats.insert(id, data);
    }

    /// Buffer updates to apply to the store after the pass.
    pub fn take_buffer_updates(&mut self) -> BTreeMap<ParamId, Vec<f32>> {
        core::mem::take(&mut self.stats)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.graph.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }
}

/// Writes buffer updates gathered by a [`Ctx`] into the store.
pub fn apply_buffer_updates(store: &mut ParamStore, updates: BTreeMap<ParamId, Vec<f32>>) {
    for (id, data) in updates {
        store.get_mut(id).data = data;
    }
}

/// Fully connected layer `y = x·W + b` with `W` of shape `[in×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, init: Init, group: Group, rng: &mut impl Rng) -> Result<Self> {
        // fan-in of a [in×out] matrix is its first axis
        let data = match init {
            Init::LeCun(gain) => Init::Normal(gain / libm::sqrtf(inputs as f32)).sample(&[inputs, outputs], rng),
            other => other.sample(&[inputs, outputs], rng),
        };
        let weight = store.add(&alloc::format!("{name}.w"), &[inputs, outputs], data, group, true)?;
        let bias = store.add(&alloc::format!("{name}.b"), &[outputs], vec![0.0; outputs], group, true)?;
        Ok(Linear {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        let y = ctx.graph.matmul(x, w)?;
        ctx.graph.add(y, b)
    }
}

/// Square-kernel convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        size: usize,
        stride: usize,
        pad: usize,
        init: Init,
        group: Group,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kernel = store.init(&alloc::format!("{name}.k"), &[outputs, inputs, size, size], init, group, rng)?;
        let bias = store.add(&alloc::format!("{name}.b"), &[outputs], vec![0.0; outputs], group, true)?;
        Ok(Conv {
            kernel,
            bias,
            stride,
            pad,
        })
    }

    /// 3×3, stride 1, padding 1.
    pub fn same3(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, init: Init, group: Group, rng: &mut impl Rng) -> Result<Self> {
        Self::new(store, name, inputs, outputs, 3, 1, 1, init, group, rng)
    }

    /// 4×4, stride 2, padding 1: halves the resolution.
    pub fn down4(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, init: Init, group: Group, rng: &mut impl Rng) -> Result<Self> {
        Self::new(store, name, inputs, outputs, 4, 2, 1, init, group, rng)
    }

    pub fn pointwise(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, init: Init, group: Group, rng: &mut impl Rng) -> Result<Self> {
        Self::new(store, name, inputs, outputs, 1, 1, 0, init, group, rng)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (k, b) = (ctx.param(self.kernel), ctx.param(self.bias));
        ctx.graph.conv2d(x, k, Some(b), self.stride, self.pad)
    }
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam with `f32` state; updates are computed in `f64` and rounded.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter in `grads`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.data.len()],
                v: vec![0.0; p.data.len()],
            });
            for k in 0..p.data.len() {
                let m = c.beta1 * st.m[k] as f64 + (1.0 - c.beta1) * g[k];
                let v = c.beta2 * st.v[k] as f64 + (1.0 - c.beta2) * g[k] * g[k];
                st.m[k] = m as f32;
                st.v[k] = v as f32;
                let mhat = st.m[k] as f64 / bc1;
                let vhat = st.v[k] as f64 / bc2;
                let delta = c.lr * mhat / (libm::sqrt(vhat) + c.eps);
                p.data[k] = (p.data[k] as f64 - delta) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shared_binding_is_one_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, Init::LeCun(1.0), Group::Generator, &mut rng).unwrap();
        let mut ctx = Ctx::new(&store, GroupSet::of(&[Group::Generator]), true);
        let x = ctx.constant(Tensor::ones(&[4, 3]));
        let _ = lin.forward(&mut ctx, x).unwrap();
        let first = ctx.bound(lin.weight).unwrap();
        let _ = lin.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.param(lin.weight), first);
    }

    #[test]
    fn frozen_groups_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = Linear::new(&mut store, "a", 3, 3, Init::LeCun(1.0), Group::Generator, &mut rng).unwrap();
        let b = Linear::new(&mut store, "b", 3, 1, Init::LeCun(1.0), Group::Discriminator, &mut rng).unwrap();
        let mut ctx = Ctx::new(&store, GroupSet::of(&[Group::Generator]), true);
        let x = ctx.constant(Tensor::ones(&[2, 3]));
        let h = a.forward(&mut ctx, x).unwrap();
        let y = b.forward(&mut ctx, h).unwrap();
        let l = ctx.graph.sum(y).unwrap();
        ctx.backward(l).unwrap();
        let ids: Vec<ParamId> = ctx.grads().into_iter().map(|(id, _)| id).collect();
        assert_eq!(ids, vec![a.weight, a.bias]);
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.init("p", &[5], Init::Normal(1.0), Group::Generator, &mut rng).unwrap();
        let before = store.clone();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() });
        adam.update(&mut store, &[(id, vec![0.3, -1.0, 2.0, 0.0, 5.0])]);
        assert_eq!(store, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", &[2], vec![1.0, 1.0], Group::Generator, true).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..AdamConfig::default() });
        adam.update(&mut store, &[(id, vec![3.0, -0.5])]);
        let d = &store.get(id).data;
        assert!((d[0] - 0.99).abs() < 1e-6 && (d[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.buffer("x", &[1], 0.0, Group::Generator).unwrap();
        assert!(store.buffer("x", &[1], 0.0, Group::Generator).is_err());
    }
}
