use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, DoubleConv, LayerSpec};
use super::msfrb::MsfrbBlock;
use super::{ChannelPlan, Forward, ModelError, Network, ParamStore, PassConfig, Result, SPATIAL_DIVISOR, STAGES};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Classic decoder level: upsample, conv to `C_s`, concat skip, two rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct UpBlock {
    level: usize,
    up: Conv,
    stage: DoubleConv,
}

#[derive(Debug, Clone, PartialEq)]
enum Decoder {
    /// Stages 5..=2.
    Msfrb(Vec<MsfrbBlock>),
    /// Levels 4..=1.
    Plain(Vec<UpBlock>),
}

/// Five-stage encoder, four-level decoder, 1×1 sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    plan: ChannelPlan,
    store: ParamStore,
    encoder: Vec<DoubleConv>,
    decoder: Decoder,
    head: Conv,
}

impl SegNet {
    pub fn build(plan: ChannelPlan, seed: u64) -> Result<Self> {
        plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let k = plan.conv_kernel;

        let mut encoder = Vec::with_capacity(STAGES);
        let mut cin = plan.input_channels;
        for s in 1..=STAGES {
            let c = plan.channels(s);
            encoder.push(DoubleConv::new(&mut store, &mut rng, &format!("enc{s}"), cin, c, k));
            cin = c;
        }

        let decoder = if plan.enable_msfrb {
            Decoder::Msfrb(
                (2..=STAGES)
                    .rev()
                    .map(|s| MsfrbBlock::new(&mut store, &mut rng, &plan, s))
                    .collect(),
            )
        } else {
            Decoder::Plain(
                (1..STAGES)
                    .rev()
                    .map(|level| {
                        let c = plan.channels(level);
                        let name = format!("dec{level}");
                        UpBlock {
                            level,
                            up: Conv::new(&mut store, &mut rng, &format!("{name}.up"), plan.channels(level + 1), c, k),
                            stage: DoubleConv::new(&mut store, &mut rng, &format!("{name}.stage"), 2 * c, c, k),
                        }
                    })
                    .collect(),
            )
        };

        let head = Conv::new(&mut store, &mut rng, "head", plan.channels(1), 1, 1);
        Ok(Self {
            plan,
            store,
            encoder,
            decoder,
            head,
        })
    }

    /// Runs the network on an `N×input_channels×H×W` tensor already on the
    /// tape and returns the `N×1×H×W` probability map.
    pub fn forward(&self, ctx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.value(x).dims4("unet")?;
        if c != self.plan.input_channels {
            return Err(TensorError::ShapeMismatch {
                op: "unet",
                dim: "C",
                expected: self.plan.input_channels,
                found: c,
            }
            .into());
        }
        check_spatial(h, w)?;

        let mut skips = Vec::with_capacity(STAGES);
        let mut cur = x;
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                cur = ctx.tape.maxpool2x(cur)?;
            }
            cur = stage.forward(ctx, cur)?;
            skips.push(cur);
        }

        let mut up = skips[STAGES - 1];
        match &self.decoder {
            Decoder::Msfrb(blocks) => {
                for block in blocks {
                    up = block.forward(ctx, up, skips[block.stage - 1], skips[0])?;
                }
            }
            Decoder::Plain(blocks) => {
                for block in blocks {
                    let u = ctx.tape.upsample_nearest2x(up)?;
                    let u = block.up.forward(ctx, u)?;
                    let cat = ctx.tape.concat_channels(&[u, skips[block.level - 1]])?;
                    up = block.stage.forward(ctx, cat)?;
                }
            }
        }
        let logits = self.head.forward(ctx, up)?;
        Ok(ctx.tape.sigmoid(logits)?)
    }

    /// Ordered list of the layers, for structural comparisons.
    pub fn layer_manifest(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                specs.push(LayerSpec {
                    name: format!("pool{i}"),
                    kind: "maxpool",
                    in_channels: self.plan.channels(i),
                    out_channels: self.plan.channels(i),
                    kernel: 2,
                });
            }
            specs.extend(stage.specs(&format!("enc{}", i + 1)));
        }
        match &self.decoder {
            Decoder::Msfrb(blocks) => specs.extend(blocks.iter().flat_map(MsfrbBlock::specs)),
            Decoder::Plain(blocks) => {
                for b in blocks {
                    let name = format!("dec{}", b.level);
                    specs.push(b.up.spec(&format!("{name}.up")));
                    specs.extend(b.stage.specs(&format!("{name}.stage")));
                }
            }
        }
        specs.push(self.head.spec("head"));
        specs
    }

    pub fn msfrb_blocks(&self) -> &[MsfrbBlock] {
        match &self.decoder {
            Decoder::Msfrb(b) => b,
            Decoder::Plain(_) => &[],
        }
    }

    /// Single forward pass in eval mode, off-tape.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let mut ctx = Forward::new(&mut tape, &self.store, PassConfig::eval());
        let y = self.forward(&mut ctx, x)?;
        Ok(tape.value(y).clone())
    }
}

pub(crate) fn check_spatial(h: usize, w: usize) -> Result<()> {
    for (dim, value) in [("H", h), ("W", w)] {
        if value % SPATIAL_DIVISOR != 0 {
            return Err(ModelError::Spatial {
                dim,
                value,
                divisor: SPATIAL_DIVISOR,
            });
        }
    }
    Ok(())
}

/// Fundus image in, vessel probability map out.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator(SegNet);

impl Generator {
    /// Weights He-uniform from `seed`, biases zero, BatchNorm identity.
    pub fn build(plan: ChannelPlan, seed: u64) -> Result<Self> {
        SegNet::build(plan, seed).map(Self)
    }

    pub fn forward(&self, ctx: &mut Forward<'_>, image: Var) -> Result<Var> {
        self.0.forward(ctx, image)
    }

    pub fn net(&self) -> &SegNet {
        &self.0
    }

    pub fn layer_manifest(&self) -> Vec<LayerSpec> {
        self.0.layer_manifest()
    }

    /// Eval-mode probability map for an `N×3×H×W` image batch.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        self.0.infer(image)
    }
}

/// Per-pixel real/fake map for a (fundus, vessel map) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator(SegNet);

impl Discriminator {
    pub fn build(plan: ChannelPlan, seed: u64) -> Result<Self> {
        if plan.enable_msfrb || plan.enable_am {
            return Err(ModelError::Config(
                "the discriminator is a plain U-Net: disable MSFRB and attention".into(),
            ));
        }
        SegNet::build(plan, seed).map(Self)
    }

    /// `image` is `N×3×H×W`, `vmap` is `N×1×H×W`; they are concatenated
    /// channel-wise before the U-Net.
    pub fn forward(&self, ctx: &mut Forward<'_>, image: Var, vmap: Var) -> Result<Var> {
        let [n, _, h, w] = ctx.tape.value(image).dims4("discriminator")?;
        let [vn, vc, vh, vw] = ctx.tape.value(vmap).dims4("discriminator")?;
        for (dim, expected, found) in [("N", n, vn), ("C", 1, vc), ("H", h, vh), ("W", w, vw)] {
            if expected != found {
                return Err(TensorError::ShapeMismatch {
                    op: "discriminator",
                    dim,
                    expected,
                    found,
                }
                .into());
            }
        }
        let x = ctx.tape.concat_channels(&[image, vmap])?;
        self.0.forward(ctx, x)
    }

    pub fn net(&self) -> &SegNet {
        &self.0
    }

    pub fn layer_manifest(&self) -> Vec<LayerSpec> {
        self.0.layer_manifest()
    }
}

macro_rules! network_impl {
    ($t:ty) => {
        impl Network for $t {
            fn plan(&self) -> &ChannelPlan {
                &self.0.plan
            }
            fn store(&self) -> &ParamStore {
                &self.0.store
            }
            fn store_mut(&mut self) -> &mut ParamStore {
                &mut self.0.store
            }
        }
    };
}

network_impl!(Generator);
network_impl!(Discriminator);
