use log::info;
use serde::{Deserialize, Serialize};

use super::ce::{per_token_ce, CeScope};
use super::checkpoint::LmCheckpoint;
use super::corpus::Corpus;
use super::model::{LmConfig, ToyLm};
use crate::error::{invalid, Error, Result};
use crate::numerics::{AdamConfig, AdamState, SplitMix64};

/// Fractions of the training run at which checkpoints are kept, in addition
/// to the initial weights.
pub const CHECKPOINT_FRACTIONS: [f64; 7] = [0.01, 0.05, 0.10, 0.15, 0.25, 0.50, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 100,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

fn lr_scale(step: usize, tc: &LmTrainConfig) -> f64 {
    if step < tc.warmup_steps {
        return (step + 1) as f64 / tc.warmup_steps as f64;
    }
    let span = (tc.steps - tc.warmup_steps).max(1) as f64;
    let progress = (step - tc.warmup_steps) as f64 / span;
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn eval_ce(model: &ToyLm, eval: &[Vec<u32>]) -> Result<f64> {
    Ok(per_token_ce(model, eval, CeScope::AllTokens)?.overall)
}

/// Trains from a fresh initialization and returns the initial checkpoint
/// followed by one checkpoint per entry of [`CHECKPOINT_FRACTIONS`].
///
/// Batches are random windows of `config.seq_len` tokens drawn from corpus
/// sequences. `eval` is the fixed held-out set every checkpoint is scored on.
pub fn train_lm(
    config: &LmConfig,
    corpus: &Corpus,
    eval: &[Vec<u32>],
    tc: &LmTrainConfig,
) -> Result<Vec<LmCheckpoint>> {
    config.validate()?;
    if corpus.vocab_size > config.vocab_size {
        return Err(invalid("corpus vocabulary exceeds model vocabulary"));
    }
    if corpus.num_sequences() == 0 || tc.batch_size == 0 {
        return Err(invalid("empty corpus or zero batch size"));
    }
    let window = config.seq_len.min(corpus.sequence_length);
    let mut model = ToyLm::<f32>::init(config.clone(), tc.seed)?;
    let mut ckpts = vec![LmCheckpoint {
        ce_on_eval: eval_ce(&model, eval)?,
        model: model.clone(),
        tokens_seen: 0,
    }];
    if tc.steps == 0 {
        return Ok(ckpts);
    }
    let save_at: Vec<usize> = CHECKPOINT_FRACTIONS
        .iter()
        .map(|f| ((f * tc.steps as f64).round() as usize).clamp(1, tc.steps))
        .collect();
    let adam = AdamConfig::with_lr(tc.lr);
    let mut states: Vec<AdamState> = model
        .tensors()
        .iter()
        .map(|t| AdamState::new(t.rows(), t.cols(), adam))
        .collect();
    let mut rng = SplitMix64::derive(tc.seed, "lm-batches");
    let per_step = (tc.batch_size * (window - 1)) as f64;
    let mut tokens_seen = 0u64;
    for step in 0..tc.steps {
        let mut grads = model.zeros_like();
        let mut loss = 0.0;
        for _ in 0..tc.batch_size {
            let s = rng.below(corpus.num_sequences());
            let off = rng.below(corpus.sequence_length - window + 1);
            let seq = &corpus.sequence(s)[off..off + window];
            loss += model.loss_and_grad(seq, &mut grads, 1.0 / per_step)?;
        }
        loss /= per_step;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                detail: format!("loss {loss}"),
            });
        }
        let norm = grads
            .tensors()
            .iter()
            .map(|g| g.sum_sq())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        if tc.grad_clip > 0.0 && norm > tc.grad_clip {
            let s = tc.grad_clip / norm;
            grads.tensors_mut().into_iter().for_each(|g| g.scale(s));
        }
        let scale = lr_scale(step, tc);
        for ((p, g), st) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut states)
        {
            st.update(p, g, scale)?;
        }
        tokens_seen += (tc.batch_size * window) as u64;
        let done = step + 1;
        for _ in save_at.iter().filter(|&&s| s == done) {
            let ce = eval_ce(&model, eval)?;
            info!("step {done}: train loss {loss:.4}, eval ce {ce:.4}");
            ckpts.push(LmCheckpoint {
                model: model.clone(),
                tokens_seen,
                ce_on_eval: ce,
            });
        }
    }
    Ok(ckpts)
}
