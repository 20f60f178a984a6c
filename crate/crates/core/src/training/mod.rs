//! The composite objective and the alternating D/G optimization schedule.

mod loss;
mod trainer;

pub use loss::{d_loss, g_loss, GLoss, LossFlags, LossWeights};
pub use trainer::{train, training_bce, RoundLog, StepReport, TrainOutcome, Trainer};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Sample;
use crate::eval::EvalError;
use crate::model::ModelError;
use crate::tensor::{Tensor, TensorError, BCE_CLAMP_EPS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub rounds: usize,
    /// The final report averages this many trailing rounds.
    pub average_last: usize,
    pub seed: u64,
    pub clamp_eps: f64,
    pub weights: LossWeights,
    pub flags: LossFlags,
    /// Replace each sample by a seeded random dihedral variant every round.
    pub augment: bool,
    /// Hold the last image out of training and report round metrics on it.
    /// Without it, round metrics are computed on the training set.
    pub holdout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 2,
            rounds: 10,
            average_last: 5,
            seed: 0,
            clamp_eps: BCE_CLAMP_EPS,
            weights: LossWeights::default(),
            flags: LossFlags::default(),
            augment: false,
            holdout: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.rounds == 0 {
            problems.push("rounds must be at least 1".to_string());
        }
        if self.average_last == 0 || self.average_last > self.rounds {
            problems.push(format!(
                "average_last must be in 1..={}, got {}",
                self.rounds, self.average_last
            ));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            problems.push(format!("clamp_eps must be in (0, 0.5), got {}", self.clamp_eps));
        }
        let w = &self.weights;
        if [w.alpha, w.beta, w.gamma].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            problems.push("loss weights must be finite and nonnegative".to_string());
        }
        if !self.flags.any() {
            problems.push("all loss terms are disabled; there is no objective".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }
}

/// A stacked batch: fundus `N×3×H×W`, vessel `N×1×H×W`, mask `N·H·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample {
    pub fundus: Tensor,
    pub vessel: Tensor,
    pub mask: Vec<bool>,
}

/// Stacks same-sized samples into one batch.
pub fn collate(samples: &[&Sample]) -> Result<BatchSample> {
    let first = samples
        .first()
        .ok_or_else(|| TrainError::Config("empty batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut fundus = Vec::with_capacity(samples.len() * 3 * w * h);
    let mut vessel = Vec::with_capacity(samples.len() * w * h);
    let mut mask = Vec::with_capacity(samples.len() * w * h);
    for s in samples {
        if (s.width(), s.height()) != (w, h) {
            return Err(TrainError::Config(format!(
                "batch mixes {w}x{h} and {}x{} samples",
                s.width(),
                s.height()
            )));
        }
        fundus.extend_from_slice(s.image.data());
        vessel.extend_from_slice(s.gt.data());
        mask.extend_from_slice(s.mask.data());
    }
    let n = samples.len();
    Ok(BatchSample {
        fundus: Tensor::new(&[n, 3, h, w], fundus)?,
        vessel: Tensor::new(&[n, 1, h, w], vessel)?,
        mask,
    })
}

/// Seeded batch order for one round.
pub(crate) fn round_batches(len: usize, batch_size: usize, seed: u64, round: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
