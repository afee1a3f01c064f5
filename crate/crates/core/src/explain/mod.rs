//! Token-rule explanations of latents and their scoring.

mod io;
mod rules;
mod score;

use std::ops::Range;

use crate::coder::SparseLatents;
use crate::error::{invalid, Result};

pub use io::{
    bins_csv, explanations_jsonl, parse_explanations, parse_scorecards, scorecards_csv,
    SCORECARD_HEADER,
};
pub use rules::{
    explain_latent, rows_by_token, ExplainConfig, ExplainOutcome, Explanation, RuleMatch, TokenRule,
};
pub use score::{
    bin_by_score, build_fuzz_examples, detection_score, fuzz_score, sample_detection_sites,
    sensitivity_specificity, DecoyMode, FlipJudge, FuzzExample, Judge, RuleJudge, ScoreBin,
    ScoreCard, SensSpec,
};

/// Token positions of equal-length sequences, addressed by a flat row index
/// (`sequence * seq_len + position`), matching the activation dumps.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteIndex {
    tokens: Vec<u32>,
    seq_len: usize,
}

impl SiteIndex {
    pub fn new(tokens: Vec<u32>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || !tokens.len().is_multiple_of(seq_len) {
            return Err(invalid(
                "token count is not a multiple of the sequence length",
            ));
        }
        Ok(Self { tokens, seq_len })
    }

    pub fn from_sequences(seqs: &[&[u32]]) -> Result<Self> {
        let len = seqs.first().map_or(0, |s| s.len());
        if seqs.iter().any(|s| s.len() != len) {
            return Err(invalid("sequences differ in length"));
        }
        Self::new(seqs.concat(), len)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn current(&self, row: usize) -> u32 {
        self.tokens[row]
    }

    pub fn position(&self, row: usize) -> usize {
        row % self.seq_len
    }

    pub fn previous(&self, row: usize) -> Option<u32> {
        (self.position(row) > 0).then(|| self.tokens[row - 1])
    }

    /// Tokens from the start of the row's sequence up to and including it.
    pub fn context(&self, row: usize) -> &[u32] {
        &self.tokens[row - self.position(row)..=row]
    }

    /// Rows of the window of at most `width` tokens ending at `row`, within
    /// its sequence.
    pub fn window(&self, row: usize, width: usize) -> Range<usize> {
        let start = row - self.position(row).min(width.saturating_sub(1));
        start..row + 1
    }
}

/// Sparse latent activations, one entry per site row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub n_latents: usize,
    pub rows: Vec<SparseLatents>,
}

impl LatentTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn value(&self, row: usize, latent: u32) -> f32 {
        let r = &self.rows[row];
        r.binary_search_by_key(&latent, |e| e.0)
            .map_or(0.0, |i| r[i].1)
    }

    /// For each latent, its `(row, value)` activations in row order.
    pub fn by_latent(&self) -> Vec<Vec<(u32, f32)>> {
        let mut out = vec![Vec::new(); self.n_latents];
        for (r, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                out[j as usize].push((r as u32, v));
            }
        }
        out
    }
}
