use rand::Rng;

use super::{he_uniform, Forward, ParamId, ParamStore, Result};
use crate::tensor::{Tensor, Var};

/// One entry of a network's layer manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(rng, &shape, in_channels * kernel * kernel).with_grad(),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(&[out_channels]).expect("positive").with_grad(),
        );
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, ctx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        Ok(ctx.tape.conv2d(x, w, b, self.stride, self.pad)?)
    }

    pub fn spec(&self, name: &str) -> LayerSpec {
        LayerSpec {
            name: name.to_string(),
            kind: "conv",
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let c = [channels];
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&c, 1.0).expect("positive").with_grad()),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&c).expect("positive").with_grad()),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&c).expect("positive")),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&c, 1.0).expect("positive")),
        }
    }

    pub fn forward(&self, ctx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let running = ctx.stats(self);
        let (y, batch) = ctx.tape.batchnorm2d(x, gamma, beta, &running, ctx.config.bn_mode)?;
        if let Some(batch) = batch {
            ctx.record.bn_batch_stats.push((*self, batch));
        }
        Ok(y)
    }
}

/// Convolution, BatchNorm, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), in_channels, out_channels, kernel),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
        }
    }

    pub fn forward(&self, ctx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.tape.relu(y)?)
    }
}

/// Two [`ConvBnRelu`] rounds: the per-stage template of both U-Nets.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConv {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl DoubleConv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        Self {
            first: ConvBnRelu::new(store, rng, &format!("{name}.0"), in_channels, out_channels, kernel),
            second: ConvBnRelu::new(store, rng, &format!("{name}.1"), out_channels, out_channels, kernel),
        }
    }

    pub fn forward(&self, ctx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        self.second.forward(ctx, y)
    }

    pub fn specs(&self, name: &str) -> Vec<LayerSpec> {
        [&self.first, &self.second]
            .iter()
            .enumerate()
            .map(|(i, l)| LayerSpec {
                kind: "conv_bn_relu",
                ..l.conv.spec(&format!("{name}.{i}"))
            })
            .collect()
    }
}
