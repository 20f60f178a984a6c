use super::{Result, TrainError};
use crate::model::{Discriminator, Forward, ForwardRecord, Generator, PassConfig, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Weights of the adversarial, BCE and MAE terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.08,
            beta: 1.1,
            gamma: 0.5,
        }
    }
}

/// Which generator loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub gan: bool,
    pub bce: bool,
    pub mae: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self {
            gan: true,
            bce: true,
            mae: true,
        }
    }
}

impl LossFlags {
    pub fn any(&self) -> bool {
        self.gan || self.bce || self.mae
    }
}

fn discriminate(
    tape: &mut Tape,
    d: &Discriminator,
    config: PassConfig,
    fundus: Var,
    vmap: Var,
) -> Result<(Var, ForwardRecord)> {
    let store: &ParamStore = crate::model::Network::store(d);
    let mut ctx = Forward::new(tape, store, config);
    let out = d.forward(&mut ctx, fundus, vmap)?;
    Ok((out, ctx.record))
}

/// `BCE(D(f, v), 1) + BCE(D(f, fake), 0)`, each averaged over pixels.
///
/// `fake` must not carry gradient back into the generator. Returns the loss
/// and the records of the real and fake passes, in that order.
pub fn d_loss(
    tape: &mut Tape,
    d: &Discriminator,
    config: PassConfig,
    fundus: Var,
    vessel: Var,
    fake: Var,
    clamp_eps: f64,
) -> Result<(Var, Vec<ForwardRecord>)> {
    if tape.requires_grad(fake) {
        return Err(TrainError::Config(
            "the fake map must be detached from the generator before the discriminator step".into(),
        ));
    }
    let (real_out, real_rec) = discriminate(tape, d, config, fundus, vessel)?;
    let (fake_out, fake_rec) = discriminate(tape, d, config, fundus, fake)?;
    let shape = tape.shape(real_out).to_vec();
    let ones = tape.constant(Tensor::full(&shape, 1.0)?);
    let zeros = tape.constant(Tensor::zeros(&shape)?);
    let real = tape.bce_loss(real_out, ones, clamp_eps)?;
    let fake = tape.bce_loss(fake_out, zeros, clamp_eps)?;
    Ok((tape.add(real, fake)?, vec![real_rec, fake_rec]))
}

/// Everything produced by one generator objective evaluation.
#[derive(Debug)]
pub struct GLoss {
    pub loss: Var,
    /// Generator output `N×1×H×W`.
    pub pred: Var,
    /// Unweighted term values `[adversarial, bce, mae]`, `None` when off.
    pub terms: [Option<f64>; 3],
    pub g_record: ForwardRecord,
    pub d_records: Vec<ForwardRecord>,
}

/// `α·BCE(D(f, G(f)), 1) + β·BCE(G(f), v) + γ·MAE(G(f), v)` with disabled
/// terms dropped. The adversarial term is the non-saturating
/// `−log D(f, G(f))`. The discriminator runs frozen and is skipped
/// entirely when the adversarial term is off.
#[allow(clippy::too_many_arguments)]
pub fn g_loss(
    tape: &mut Tape,
    g: &Generator,
    g_config: PassConfig,
    d: &Discriminator,
    fundus: Var,
    vessel: Var,
    weights: LossWeights,
    flags: LossFlags,
    clamp_eps: f64,
) -> Result<GLoss> {
    if !flags.any() {
        return Err(TrainError::Config("all loss terms are disabled; there is no objective".into()));
    }
    let g_store: &ParamStore = crate::model::Network::store(g);
    let mut ctx = Forward::new(tape, g_store, g_config);
    let pred = g.forward(&mut ctx, fundus)?;
    let g_record = ctx.record;

    let mut parts = Vec::new();
    let mut terms = [None; 3];
    let mut d_records = Vec::new();
    if flags.gan {
        let (d_out, rec) = discriminate(tape, d, PassConfig::frozen(), fundus, pred)?;
        d_records.push(rec);
        let ones = tape.constant(Tensor::full(tape.shape(d_out), 1.0)?);
        let adv = tape.bce_loss(d_out, ones, clamp_eps)?;
        terms[0] = Some(tape.value(adv).data()[0]);
        parts.push(tape.scale(adv, weights.alpha)?);
    }
    if flags.bce {
        let bce = tape.bce_loss(pred, vessel, clamp_eps)?;
        terms[1] = Some(tape.value(bce).data()[0]);
        parts.push(tape.scale(bce, weights.beta)?);
    }
    if flags.mae {
        let mae = tape.mae_loss(pred, vessel)?;
        terms[2] = Some(tape.value(mae).data()[0]);
        parts.push(tape.scale(mae, weights.gamma)?);
    }
    let mut loss = parts[0];
    for &p in &parts[1..] {
        loss = tape.add(loss, p)?;
    }
    Ok(GLoss {
        loss,
        pred,
        terms,
        g_record,
        d_records,
    })
}
