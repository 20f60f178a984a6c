//! Multi-scale features refine block and its parameter-free channel attention.

use rand::Rng;

use super::layers::{Conv, DoubleConv, LayerSpec};
use super::{ChannelPlan, Forward, ModelError, ParamStore, Result};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// `branch · sigmoid(GAP(branch))`, one weight per sample and channel.
pub fn attention_forward(tape: &mut Tape, branch: Var) -> std::result::Result<Var, TensorError> {
    let pooled = tape.global_avg_pool(branch)?;
    let weights = tape.sigmoid(pooled)?;
    tape.channel_scale(branch, weights)
}

/// Decoder block for stage `s` (5 down to 2). Maps `(x_s^u, x_s^d, x_1^d)`
/// to `x_{s-1}^u` at twice the spatial resolution with `C_{s-1}` channels.
///
/// Main road: `[conv_1d(pool(x_1^d)), conv_u(x_s^u), x_s^d]` through two
/// conv-BN-ReLU rounds. Branch road: the channel-group sums of `conv_u(x_s^u)`
/// and `x_s^d`, concatenated and optionally reweighted by attention. The two
/// roads are added and upsampled.
#[derive(Debug, Clone, PartialEq)]
pub struct MsfrbBlock {
    pub stage: usize,
    pub conv_u: Conv,
    pub conv_1d: Conv,
    /// Mean-pool factor `2^(s-1)` bringing `x_1^d` to stage resolution.
    pub pool: usize,
    pub main: DoubleConv,
    pub squeeze_k: usize,
    pub am_enabled: bool,
}

impl MsfrbBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, plan: &ChannelPlan, stage: usize) -> Self {
        let cs = plan.channels(stage);
        let c_prev = plan.channels(stage - 1);
        let c1 = plan.channels(1);
        let name = format!("dec{stage}");
        Self {
            stage,
            conv_u: Conv::new(store, rng, &format!("{name}.conv_u"), cs, cs, 1),
            conv_1d: Conv::new(store, rng, &format!("{name}.conv_1d"), c1, cs, 1),
            pool: 1 << (stage - 1),
            main: DoubleConv::new(store, rng, &format!("{name}.main"), 3 * cs, c_prev, plan.conv_kernel),
            squeeze_k: plan.squeeze_k,
            am_enabled: plan.enable_am,
        }
    }

    pub fn forward(&self, ctx: &mut Forward<'_>, x_s_u: Var, x_s_d: Var, x_1_d: Var) -> Result<Var> {
        ctx.record.msfrb_calls += 1;
        let u_shape = ctx.tape.shape(x_s_u).to_vec();
        if u_shape != ctx.tape.shape(x_s_d) {
            return Err(ModelError::Config(format!(
                "stage {}: decoder input {:?} and skip {:?} differ",
                self.stage,
                u_shape,
                ctx.tape.shape(x_s_d)
            )));
        }

        let xu = self.conv_u.forward(ctx, x_s_u)?;
        let pooled = if self.pool > 1 {
            ctx.tape.avg_pool(x_1_d, self.pool)?
        } else {
            x_1_d
        };
        let x1 = self.conv_1d.forward(ctx, pooled)?;
        let fused = ctx.tape.concat_channels(&[x1, xu, x_s_d])?;
        let main = self.main.forward(ctx, fused)?;

        let ru = ctx.tape.channel_group_sum(xu, self.squeeze_k)?;
        let rd = ctx.tape.channel_group_sum(x_s_d, self.squeeze_k)?;
        let mut branch = ctx.tape.concat_channels(&[ru, rd])?;
        if self.am_enabled {
            branch = match ctx.config.attention_override {
                Some(v) => {
                    let c = ctx.tape.shape(branch)[1];
                    let a = ctx.tape.constant(Tensor::full(&[c], v)?);
                    ctx.tape.channel_scale(branch, a)?
                }
                None => attention_forward(ctx.tape, branch)?,
            };
        }

        let (mc, bc) = (ctx.tape.shape(main)[1], ctx.tape.shape(branch)[1]);
        if mc != bc {
            return Err(ModelError::Config(format!(
                "stage {}: branch road has {bc} channels but main road has {mc}; check squeeze_k",
                self.stage
            )));
        }
        let merged = ctx.tape.add(main, branch)?;
        Ok(ctx.tape.upsample_nearest2x(merged)?)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let name = format!("dec{}", self.stage);
        let mut specs = vec![
            self.conv_u.spec(&format!("{name}.conv_u")),
            LayerSpec {
                kind: "pool_conv",
                ..self.conv_1d.spec(&format!("{name}.conv_1d"))
            },
        ];
        specs.extend(self.main.specs(&format!("{name}.main")));
        specs.push(LayerSpec {
            name: format!("{name}.branch"),
            kind: if self.am_enabled { "group_sum_attention" } else { "group_sum" },
            in_channels: 2 * self.conv_u.out_channels,
            out_channels: 2 * self.conv_u.out_channels / self.squeeze_k,
            kernel: 0,
        });
        specs
    }
}
