use log::warn;

use super::model::{token_ce, ToyLm};
use crate::error::Result;
use crate::numerics::Matrix;

/// Anything that maps a token sequence to per-position logits.
pub trait LogitsRunner {
    fn logits(&self, tokens: &[u32]) -> Result<Matrix>;
}

impl LogitsRunner for ToyLm<f32> {
    fn logits(&self, tokens: &[u32]) -> Result<Matrix> {
        self.forward(tokens)
    }
}

impl<F: Fn(&[u32]) -> Result<Matrix>> LogitsRunner for F {
    fn logits(&self, tokens: &[u32]) -> Result<Matrix> {
        self(tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeScope {
    /// Every next-token prediction in the prompt.
    AllTokens,
    /// Only the prediction of the prompt's final token from the rest.
    LastToken,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CeReport {
    /// Mean CE per prompt; `None` for prompts too short to score.
    pub per_prompt: Vec<Option<f64>>,
    pub token_counts: Vec<usize>,
    /// Token-weighted mean over scored prompts.
    pub overall: f64,
    pub skipped: usize,
}

/// Mean next-token cross entropy (nats) for each prompt.
pub fn per_token_ce(
    runner: &dyn LogitsRunner,
    prompts: &[Vec<u32>],
    scope: CeScope,
) -> Result<CeReport> {
    let mut per_prompt = Vec::with_capacity(prompts.len());
    let mut token_counts = Vec::with_capacity(prompts.len());
    let mut total = 0.0;
    let mut count = 0usize;
    let mut skipped = 0;
    for (i, p) in prompts.iter().enumerate() {
        if p.len() < 2 {
            warn!("prompt {i} has {} tokens and is skipped", p.len());
            per_prompt.push(None);
            token_counts.push(0);
            skipped += 1;
            continue;
        }
        let context = &p[..p.len() - 1];
        let logits = runner.logits(context)?;
        let positions: Vec<usize> = match scope {
            CeScope::AllTokens => (0..context.len()).collect(),
            CeScope::LastToken => vec![context.len() - 1],
        };
        let sum: f64 = positions
            .iter()
            .map(|&t| token_ce(logits.row(t), p[t + 1]))
            .sum();
        per_prompt.push(Some(sum / positions.len() as f64));
        token_counts.push(positions.len());
        total += sum;
        count += positions.len();
    }
    Ok(CeReport {
        per_prompt,
        token_counts,
        overall: if count == 0 {
            f64::NAN
        } else {
            total / count as f64
        },
        skipped,
    })
}
