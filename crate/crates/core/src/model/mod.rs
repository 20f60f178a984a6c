//! The mirrored U-Net generator and discriminator.
//!
//! Parameters live in a flat [`ParamStore`]; layers hold [`ParamId`]s into
//! it. A forward pass goes through a [`Forward`] context that registers each
//! parameter on the tape and remembers the bindings, so gradients can be
//! copied back and BatchNorm running statistics committed afterwards.

mod layers;
mod msfrb;
mod plan;
mod unet;

pub use layers::{BatchNorm, Conv, ConvBnRelu, DoubleConv, LayerSpec};
pub use msfrb::{attention_forward, MsfrbBlock};
pub use plan::{ChannelPlan, STAGES};
pub use unet::{Discriminator, Generator, SegNet};

use rand::Rng;
use thiserror::Error;

use crate::tensor::{BnMode, ChannelStats, Tape, Tensor, TensorError, Var};

/// Input height and width must be multiples of this.
pub const SPATIAL_DIVISOR: usize = 1 << (STAGES - 1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid channel plan: {0}")]
    Config(String),
    #[error("input {dim} = {value} must be divisible by {divisor}")]
    Spatial {
        dim: &'static str,
        value: usize,
        divisor: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named tensors of one network. Trainable tensors have `requires_grad`
/// set; BatchNorm running statistics are stored alongside as frozen buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Element count of all trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad).map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// All trainable values flattened in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad)
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// All trainable gradients flattened in store order (zeros when absent).
    pub fn flat_grads(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad)
            .flat_map(|t| match &t.grad {
                Some(g) => g.clone(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    /// Adds the tape gradients of every parameter bound in `record`.
    pub fn accumulate_grads(&mut self, tape: &Tape, record: &ForwardRecord) {
        for &(id, var) in &record.bindings {
            let (Some(g), t) = (tape.grad(var), self.get_mut(id)) else {
                continue;
            };
            if !t.requires_grad {
                continue;
            }
            let acc = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }

    /// Replaces the value of tensor `name`, keeping its gradient flag.
    pub fn set(&mut self, name: &str, value: Tensor) -> std::result::Result<(), String> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| format!("unknown tensor {name}"))?;
        let old = &self.tensors[idx];
        if old.shape() != value.shape() {
            return Err(format!(
                "tensor {name}: shape {:?} differs from expected {:?}",
                value.shape(),
                old.shape()
            ));
        }
        let requires_grad = old.requires_grad;
        self.tensors[idx] = if requires_grad { value.with_grad() } else { value };
        Ok(())
    }
}

/// How a forward pass treats parameters and BatchNorm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassConfig {
    pub bn_mode: BnMode,
    /// Record parameters as trainable leaves; otherwise as constants.
    pub trainable: bool,
    /// Replace the learned attention vector by this constant.
    pub attention_override: Option<f64>,
}

impl PassConfig {
    pub fn train() -> Self {
        Self {
            bn_mode: BnMode::Train,
            trainable: true,
            attention_override: None,
        }
    }

    /// Batch statistics, parameters frozen (gradient still flows to inputs).
    pub fn frozen() -> Self {
        Self {
            trainable: false,
            ..Self::train()
        }
    }

    pub fn eval() -> Self {
        Self {
            bn_mode: BnMode::Eval,
            trainable: false,
            attention_override: None,
        }
    }
}

/// Bookkeeping produced by one forward pass.
#[derive(Debug, Default)]
pub struct ForwardRecord {
    pub bindings: Vec<(ParamId, Var)>,
    pub bn_batch_stats: Vec<(BatchNorm, ChannelStats)>,
    /// Number of MSFRB blocks executed, for instrumentation.
    pub msfrb_calls: usize,
}

pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    pub config: PassConfig,
    pub record: ForwardRecord,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, config: PassConfig) -> Self {
        Self {
            tape,
            store,
            config,
            record: ForwardRecord::default(),
        }
    }

    pub(crate) fn param(&mut self, id: ParamId) -> Var {
        let t = self.store.get(id);
        let v = if self.config.trainable && t.requires_grad {
            self.tape.param(t)
        } else {
            self.tape.constant(t.clone())
        };
        self.record.bindings.push((id, v));
        v
    }

    pub(crate) fn stats(&self, bn: &BatchNorm) -> ChannelStats {
        ChannelStats {
            mean: self.store.get(bn.running_mean).data().to_vec(),
            var: self.store.get(bn.running_var).data().to_vec(),
        }
    }
}

/// Common surface of [`Generator`] and [`Discriminator`].
pub trait Network {
    fn plan(&self) -> &ChannelPlan;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Element count of all trainable tensors (conv weights and biases,
    /// BatchNorm gamma and beta).
    fn count_parameters(&self) -> usize {
        self.store().trainable_count()
    }

    fn zero_grad(&mut self) {
        self.store_mut().zero_grad();
    }

    /// Adds the tape gradients of every bound parameter into the store.
    fn accumulate_grads(&mut self, tape: &Tape, record: &ForwardRecord) {
        self.store_mut().accumulate_grads(tape, record);
    }

    /// Folds the batch statistics of a training pass into the running stats.
    fn commit_bn_stats(&mut self, record: &ForwardRecord) {
        let store = self.store_mut();
        for (bn, batch) in &record.bn_batch_stats {
            let mut running = ChannelStats {
                mean: store.get(bn.running_mean).data().to_vec(),
                var: store.get(bn.running_var).data().to_vec(),
            };
            running.update(batch);
            store.get_mut(bn.running_mean).data_mut().copy_from_slice(&running.mean);
            store.get_mut(bn.running_var).data_mut().copy_from_slice(&running.var);
        }
    }
}

/// He-uniform weights with bound `sqrt(6 / fan_in)`.
pub(crate) fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("positive shape")
}
