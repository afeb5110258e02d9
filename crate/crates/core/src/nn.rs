//! Parameter storage and the layer building blocks shared by the generator
//! and discriminator.
//!
//! Parameters live in a [`ParamStore`] owned by the training loop; model
//! structs hold only [`ParamId`] handles plus hyperparameters. Each training
//! step opens a fresh [`Graph`], and a [`NetCtx`] binds store entries into it
//! as leaves (once per step, cached), collecting the (param, node) pairs the
//! optimizer needs to route gradients back.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const WEIGHT_INIT_STD: f64 = 0.02;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Optimized by the trainer.
    Param,
    /// State carried across steps (BatchNorm running stats); checkpointed
    /// but never optimized.
    Buffer,
}

struct Entry<T: Scalar> {
    name: String,
    kind: EntryKind,
    value: Tensor<T>,
}

/// Named tensor table for one network.
pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), EntryKind::Param, value)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), EntryKind::Buffer, value)
    }

    fn insert(&mut self, name: String, kind: EntryKind, value: Tensor<T>) -> ParamId {
        assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate entry name {name}"
        );
        self.entries.push(Entry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> EntryKind {
        self.entries[id.0].kind
    }

    /// Ids of optimizable parameters, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].kind == EntryKind::Param)
            .map(ParamId)
            .collect()
    }

    /// Ids of every entry (params and buffers), in registration order.
    pub fn all_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).map(ParamId).collect()
    }

    /// Disjoint mutable access to two entries (BatchNorm running stats).
    pub fn two_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        assert_ne!(a.0, b.0);
        let [ea, eb] = self
            .entries
            .get_disjoint_mut([a.0, b.0])
            .expect("disjoint indices");
        (&mut ea.value, &mut eb.value)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// How the generator realizes its noise input `z`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum NoiseMode {
    /// Deterministic generator.
    None,
    /// Multiplicative Bernoulli masks in the decoder blocks, applied at both
    /// training and inference time.
    Dropout { rate: f64 },
}

impl NoiseMode {
    pub fn validate(&self) -> Result<()> {
        if let NoiseMode::Dropout { rate } = self {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::InvalidArg(format!(
                    "dropout noise rate must be in [0,1), got {rate}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-forward-pass context: binds one network's store into one graph.
pub struct NetCtx<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    /// When false, parameters are bound as constants: no weight gradients are
    /// computed and the optimizer receives no bindings.
    pub trainable: bool,
    /// BatchNorm statistics mode: batch stats + running update vs running.
    pub bn_train: bool,
    pub noise: NoiseMode,
    pub rng: &'a mut ChaCha8Rng,
    bindings: Vec<Option<Var>>,
}

impl<'a, T: Scalar> NetCtx<'a, T> {
    pub fn new(
        store: &'a mut ParamStore<T>,
        trainable: bool,
        bn_train: bool,
        noise: NoiseMode,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        let n = store.len();
        NetCtx {
            store,
            trainable,
            bn_train,
            noise,
            rng,
            bindings: vec![None; n],
        }
    }

    /// The graph leaf for a store entry, bound on first use and cached so a
    /// parameter reused across calls in one step accumulates into one node.
    pub fn var(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.bindings[id.0] {
            return v;
        }
        let requires = self.trainable && self.store.kind(id) == EntryKind::Param;
        let v = g.leaf(self.store.get(id).clone(), requires);
        self.bindings[id.0] = Some(v);
        v
    }

    /// (param, node) pairs bound this pass, for gradient routing.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bindings
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                v.and_then(|var| {
                    (self.store.kind(ParamId(i)) == EntryKind::Param).then_some((ParamId(i), var))
                })
            })
            .collect()
    }
}

/// Gaussian-initialized tensor, drawn in f64 for cross-precision parity.
pub fn init_normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
    let dist = Normal::new(mean, std).expect("valid normal");
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("positive extents")
}

pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.param(
            format!("{name}.weight"),
            init_normal(rng, &[out_ch, in_ch, kernel, kernel], 0.0, WEIGHT_INIT_STD),
        );
        let bias = store.param(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Conv2d { weight, bias, stride, padding }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut NetCtx<T>, x: Var) -> Result<Var> {
        let w = ctx.var(g, self.weight);
        let b = ctx.var(g, self.bias);
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.param(
            format!("{name}.weight"),
            init_normal(rng, &[in_ch, out_ch, kernel, kernel], 0.0, WEIGHT_INIT_STD),
        );
        let bias = store.param(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        ConvTranspose2d { weight, bias, stride, padding }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut NetCtx<T>, x: Var) -> Result<Var> {
        let w = ctx.var(g, self.weight);
        let b = ctx.var(g, self.bias);
        g.conv2d_transpose(x, w, b, self.stride, self.padding)
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gamma = store.param(
            format!("{name}.gamma"),
            init_normal(rng, &[channels], 1.0, WEIGHT_INIT_STD),
        );
        let beta = store.param(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let running_mean = store.buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.buffer(
            format!("{name}.running_var"),
            Tensor::full(&[channels], T::one()),
        );
        BatchNorm2d { gamma, beta, running_mean, running_var }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut NetCtx<T>, x: Var) -> Result<Var> {
        let gamma = ctx.var(g, self.gamma);
        let beta = ctx.var(g, self.beta);
        let train = ctx.bn_train;
        let (rm, rv) = ctx.store.two_mut(self.running_mean, self.running_var);
        g.batchnorm2d(
            x,
            gamma,
            beta,
            rm,
            rv,
            train,
            T::from_f64(BN_MOMENTUM),
            T::from_f64(BN_EPS),
        )
    }
}

/// The Convolution-BatchNorm-LeakyReLU unit both networks are made of.
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, padding, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut NetCtx<T>, x: Var) -> Result<Var> {
        let x = self.conv.forward(g, ctx, x)?;
        let x = self.bn.forward(g, ctx, x)?;
        g.leaky_relu(x, T::from_f64(LEAKY_SLOPE))
    }
}
