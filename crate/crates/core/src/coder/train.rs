use log::debug;
use serde::{Deserialize, Serialize};

use super::{ActivationDataset, SparseCoder};
use crate::error::{invalid, Error, Result};
use crate::numerics::{AdamConfig, AdamState, Matrix, SplitMix64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean squared error per element on each step's batch.
    pub losses: Vec<f64>,
}

/// Minimizes the mean squared error between coder outputs and targets with
/// Adam on random minibatches.
pub fn train_coder(
    mut coder: SparseCoder,
    data: &ActivationDataset,
    tc: &CoderTrainConfig,
) -> Result<(SparseCoder, TrainLog)> {
    if data.is_empty() || tc.batch_size == 0 {
        return Err(invalid("empty dataset or zero batch size"));
    }
    let d = coder.d_model();
    if data.inputs.cols() != d || data.targets.cols() != d {
        return Err(invalid("dataset width does not match coder"));
    }
    let adam = AdamConfig::with_lr(tc.lr);
    let mut states: Vec<AdamState> = coder
        .tensors()
        .iter()
        .map(|t| AdamState::new(t.rows(), t.cols(), adam))
        .collect();
    let mut rng = SplitMix64::derive(tc.seed, "coder-batches");
    let mut log = TrainLog::default();
    let scale = 1.0 / (tc.batch_size * d) as f64;
    let mut xb = Matrix::zeros(tc.batch_size, d);
    let mut tb = Matrix::zeros(tc.batch_size, d);
    for step in 0..tc.steps {
        for b in 0..tc.batch_size {
            let r = rng.below(data.len());
            xb.row_mut(b).copy_from_slice(data.inputs.row(r));
            tb.row_mut(b).copy_from_slice(data.targets.row(r));
        }
        let mut grads = coder.zeros_like();
        let loss = coder.loss_and_grad(&xb, &tb, &mut grads, scale)? * scale;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                detail: format!("coder loss {loss}"),
            });
        }
        for ((p, g), st) in coder
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut states)
        {
            st.update(p, g, 1.0)?;
        }
        if step % 500 == 0 {
            debug!("coder step {step}: mse {loss:.6}");
        }
        log.losses.push(loss);
    }
    Ok((coder, log))
}
