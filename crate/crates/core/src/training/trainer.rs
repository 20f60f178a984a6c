use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{collate, d_loss, g_loss, round_batches, BatchSample, Result, TrainConfig, TrainError};
use crate::data::{Dihedral, Sample};
use crate::eval::{evaluate, format_metric, MetricsReport};
use crate::model::{Discriminator, Forward, Generator, Network, PassConfig};
use crate::tensor::{AdamState, Tape};

/// Losses of one `train_step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// `None` when the adversarial term is off and D was not trained.
    pub d_loss: Option<f64>,
    pub g_loss: f64,
    /// Unweighted BCE of the generator output on this batch.
    pub bce: f64,
}

/// Owns both networks and their optimizers.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub g: Generator,
    pub d: Discriminator,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub config: TrainConfig,
    /// Discriminator forward passes so far.
    pub d_evaluations: usize,
    pub g_steps: usize,
}

impl Trainer {
    pub fn new(g: Generator, d: Discriminator, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            g,
            d,
            adam_g: AdamState::new(config.lr),
            adam_d: AdamState::new(config.lr),
            config,
            d_evaluations: 0,
            g_steps: 0,
        })
    }

    /// One discriminator update on `batch`. The generator runs frozen and
    /// its output is detached.
    pub fn d_phase(&mut self, batch: &BatchSample) -> Result<f64> {
        self.d.zero_grad();
        let mut tape = Tape::new();
        let fundus = tape.constant(batch.fundus.clone());
        let vessel = tape.constant(batch.vessel.clone());
        let fake = {
            let mut ctx = Forward::new(&mut tape, self.g.store(), PassConfig::frozen());
            self.g.forward(&mut ctx, fundus)?
        };
        let fake = tape.detach(fake);
        let (loss, records) = d_loss(
            &mut tape,
            &self.d,
            PassConfig::train(),
            fundus,
            vessel,
            fake,
            self.config.clamp_eps,
        )?;
        self.d_evaluations += records.len();
        let value = tape.value(loss).data()[0];
        tape.backward(loss)?;
        for rec in &records {
            self.d.accumulate_grads(&tape, rec);
        }
        self.adam_d.step(self.d.store_mut().tensors_mut())?;
        for rec in &records {
            self.d.commit_bn_stats(rec);
        }
        self.d.zero_grad();
        Ok(value)
    }

    /// One generator update on `batch`; D is evaluated frozen. Returns the
    /// loss and the unweighted batch BCE.
    pub fn g_phase(&mut self, batch: &BatchSample) -> Result<(f64, f64)> {
        self.g.zero_grad();
        let mut tape = Tape::new();
        let fundus = tape.constant(batch.fundus.clone());
        let vessel = tape.constant(batch.vessel.clone());
        let out = g_loss(
            &mut tape,
            &self.g,
            PassConfig::train(),
            &self.d,
            fundus,
            vessel,
            self.config.weights,
            self.config.flags,
            self.config.clamp_eps,
        )?;
        self.d_evaluations += out.d_records.len();
        let value = tape.value(out.loss).data()[0];
        let bce = match out.terms[1] {
            Some(b) => b,
            None => {
                let b = tape.bce_loss(out.pred, vessel, self.config.clamp_eps)?;
                tape.value(b).data()[0]
            }
        };
        tape.backward(out.loss)?;
        self.g.accumulate_grads(&tape, &out.g_record);
        self.adam_g.step(self.g.store_mut().tensors_mut())?;
        self.g.commit_bn_stats(&out.g_record);
        self.g.zero_grad();
        self.g_steps += 1;
        Ok((value, bce))
    }

    /// One D update (skipped without the adversarial term), then one G update.
    pub fn train_step(&mut self, batch: &BatchSample) -> Result<StepReport> {
        let d_loss = if self.config.flags.gan {
            Some(self.d_phase(batch)?)
        } else {
            None
        };
        let (g_loss, bce) = self.g_phase(batch)?;
        Ok(StepReport { d_loss, g_loss, bce })
    }

    /// Runs one round over `samples` in the seeded order for `round`.
    pub fn run_round(&mut self, samples: &[Sample], round: usize) -> Result<Vec<StepReport>> {
        let pool: Vec<Sample> = if self.config.augment {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(0xA5A5 + round as u64));
            samples
                .iter()
                .map(|s| Dihedral::ALL[rng.random_range(0..8)].apply(s))
                .collect()
        } else {
            samples.to_vec()
        };
        let mut reports = Vec::new();
        for idx in round_batches(pool.len(), self.config.batch_size, self.config.seed, round) {
            let members: Vec<&Sample> = idx.iter().map(|&i| &pool[i]).collect();
            reports.push(self.train_step(&collate(&members)?)?);
        }
        Ok(reports)
    }
}

/// Mean generator BCE over `samples` in fixed consecutive batches, with
/// batch statistics and nothing updated.
pub fn training_bce(g: &Generator, samples: &[Sample], batch_size: usize, clamp_eps: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut pixels = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let members: Vec<&Sample> = chunk.iter().collect();
        let batch = collate(&members)?;
        let mut tape = Tape::new();
        let fundus = tape.constant(batch.fundus.clone());
        let vessel = tape.constant(batch.vessel.clone());
        let mut ctx = Forward::new(&mut tape, g.store(), PassConfig::frozen());
        let pred = g.forward(&mut ctx, fundus)?;
        let bce = tape.bce_loss(pred, vessel, clamp_eps)?;
        let n = batch.vessel.numel();
        total += tape.value(bce).data()[0] * n as f64;
        pixels += n;
    }
    Ok(total / pixels as f64)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub d_loss: Option<f64>,
    pub g_loss: f64,
    pub report: MetricsReport,
}

impl fmt::Display for RoundLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "round={} d_loss={} g_loss={} se={} sp={} acc={} auc={}",
            self.round,
            format_metric(self.d_loss),
            format_metric(Some(self.g_loss)),
            format_metric(self.report.se),
            format_metric(self.report.sp),
            format_metric(self.report.acc),
            format_metric(self.report.auc)
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<RoundLog>,
    /// Mean of the last `average_last` round reports.
    pub final_report: MetricsReport,
}

/// Trains for `config.rounds` rounds, calling `on_round` after each.
pub fn train(
    g: Generator,
    d: Discriminator,
    dataset: &[Sample],
    config: TrainConfig,
    mut on_round: impl FnMut(&RoundLog),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(TrainError::Config("the dataset is empty".into()));
    }
    let (train_set, held_out) = if config.holdout && dataset.len() >= 2 {
        dataset.split_at(dataset.len() - 1)
    } else {
        (dataset, dataset)
    };
    let mut trainer = Trainer::new(g, d, config)?;
    let mut history = Vec::with_capacity(trainer.config.rounds);
    for round in 1..=trainer.config.rounds {
        let steps = trainer.run_round(train_set, round)?;
        let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
        let d_losses: Option<Vec<f64>> = steps.iter().map(|s| s.d_loss).collect();
        let log = RoundLog {
            round,
            d_loss: d_losses.map(mean),
            g_loss: mean(steps.iter().map(|s| s.g_loss).collect()),
            report: evaluate(&trainer.g, held_out, true)?.report,
        };
        on_round(&log);
        history.push(log);
    }
    let last = &history[history.len() - trainer.config.average_last..];
    let final_report = MetricsReport::mean(&last.iter().map(|l| l.report).collect::<Vec<_>>());
    Ok(TrainOutcome {
        trainer,
        history,
        final_report,
    })
}
