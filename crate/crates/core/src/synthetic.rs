//! Planted-feature suite: every latent fires on exactly one token, its
//! explanation states that rule, and a heterogeneous noisy oracle makes
//! explanation quality vary across latents by construction.

use serde::{Deserialize, Serialize};

use crate::coder::SparseLatents;
use crate::error::{invalid, Result};
use crate::explain::{bin_by_score, Explanation, LatentTable, ScoreBin, SiteIndex, TokenRule};
use crate::numerics::stats::spearman;
use crate::numerics::SplitMix64;
use crate::simulator::{score_all, value_pools, NoiseConfig, NoisyOracle, ScoringConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub n_latents: usize,
    /// Tokens beyond the first `n_latents` fire nothing.
    pub vocab_size: usize,
    pub sequences: usize,
    pub seq_len: usize,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_latents: 200,
            vocab_size: 300,
            sequences: 1000,
            seq_len: 64,
            noise: NoiseConfig {
                sensitivity: 0.3,
                specificity: 0.5,
                jitter: 0.2,
                heterogeneous: true,
            },
            seed: 0,
        }
    }
}

pub struct Suite {
    pub sites: SiteIndex,
    pub table: LatentTable,
    pub explanations: Vec<Explanation>,
    pub predictor: NoisyOracle,
}

pub fn build_suite(cfg: &SuiteConfig) -> Result<Suite> {
    if cfg.n_latents == 0 || cfg.n_latents > cfg.vocab_size {
        return Err(invalid("the suite needs 1..=vocab_size latents"));
    }
    let mut rng = SplitMix64::derive(cfg.seed, "synthetic-suite");
    let tokens: Vec<u32> = (0..cfg.sequences * cfg.seq_len)
        .map(|_| rng.below(cfg.vocab_size) as u32)
        .collect();
    let rows: Vec<SparseLatents> = tokens
        .iter()
        .map(|&t| {
            if (t as usize) < cfg.n_latents {
                vec![(t, (0.5 + (0.5 * rng.normal()).exp()) as f32)]
            } else {
                Vec::new()
            }
        })
        .collect();
    let table = LatentTable {
        n_latents: cfg.n_latents,
        rows,
    };
    let explanations = (0..cfg.n_latents as u32)
        .map(|j| {
            let rule = TokenRule {
                current: vec![j],
                previous: None,
            };
            Explanation {
                latent: j,
                text: rule.render(),
                rule,
                contexts: Vec::new(),
            }
        })
        .collect();
    let predictor = NoisyOracle::new(cfg.noise.clone(), value_pools(&table), cfg.seed)?;
    Ok(Suite {
        sites: SiteIndex::new(tokens, cfg.seq_len)?,
        table,
        explanations,
        predictor,
    })
}

/// Score bins and the Spearman correlations of bin score against bin
/// sensitivity and specificity.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityLink {
    pub bins: Vec<ScoreBin>,
    pub rho_sensitivity: f64,
    pub rho_specificity: f64,
}

fn link(points: &[(f64, Option<f64>, Option<f64>)], n_bins: usize) -> Result<QualityLink> {
    let bins = bin_by_score(points, n_bins)?;
    let score: Vec<f64> = bins.iter().map(|b| b.mean_score).collect();
    let sens: Vec<f64> = bins
        .iter()
        .map(|b| b.mean_sensitivity.unwrap_or(f64::NAN))
        .collect();
    let spec: Vec<f64> = bins
        .iter()
        .map(|b| b.mean_specificity.unwrap_or(f64::NAN))
        .collect();
    Ok(QualityLink {
        rho_sensitivity: spearman(&score, &sens)?,
        rho_specificity: spearman(&score, &spec)?,
        bins,
    })
}

/// Scores every latent with the suite's predictor as judge, then links
/// detection and fuzzing scores to the predictor's measured rates.
pub fn score_quality_link(
    suite: &Suite,
    cfg: &ScoringConfig,
    seed: u64,
) -> Result<(QualityLink, QualityLink)> {
    let cards = score_all(
        &suite.explanations,
        &suite.sites,
        &suite.table,
        &suite.predictor,
        cfg,
        seed,
    )?;
    let det: Vec<_> = cards
        .iter()
        .map(|c| (c.detection, c.sensitivity, c.specificity))
        .collect();
    let fuzz: Vec<_> = cards
        .iter()
        .filter(|c| c.fuzz.is_finite())
        .map(|c| (c.fuzz, c.sensitivity, c.specificity))
        .collect();
    Ok((link(&det, cfg.bins)?, link(&fuzz, cfg.bins)?))
}
