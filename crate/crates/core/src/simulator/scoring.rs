//! Scoring explanations with a predictor standing in for the judge.

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Ctx, Predictor, PredictorJudge};
use crate::error::Result;
use crate::explain::{
    build_fuzz_examples, detection_score, fuzz_score, sample_detection_sites,
    sensitivity_specificity, DecoyMode, Explanation, LatentTable, ScoreCard, SiteIndex,
};
use crate::numerics::rng::hash_words;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    /// Correct examples per latent; as many decoys are drawn.
    pub fuzz_examples: usize,
    pub window: usize,
    pub decoy: DecoyMode,
    /// Predictions above this count as calling the latent active.
    pub threshold: f64,
    pub bins: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            n_pos: 100,
            n_neg: 100,
            fuzz_examples: 50,
            window: 8,
            decoy: DecoyMode::Inactive,
            threshold: 4.5,
            bins: 10,
        }
    }
}

/// Detection and fuzzing scores of one explanation, plus the predictor's
/// sensitivity and specificity on a second, independent site sample.
///
/// `active` lists the rows where the latent is active, sorted. Returns
/// `None` when the latent is active everywhere or nowhere. A fuzzing score
/// that cannot be computed is NaN.
pub fn score_latent(
    expl: &Explanation,
    active: &[u32],
    sites: &SiteIndex,
    table: &LatentTable,
    predictor: &dyn Predictor,
    cfg: &ScoringConfig,
    seed: u64,
) -> Result<Option<ScoreCard>> {
    let n_pos = cfg.n_pos.min(active.len());
    let n_neg = cfg.n_neg.min(table.len() - active.len());
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let judge = PredictorJudge {
        predictor,
        table,
        threshold: cfg.threshold,
    };
    let s = hash_words(&[seed, expl.latent as u64]);
    let (pos, neg) = sample_detection_sites(active, table.len(), n_pos, n_neg, s)?;
    let detection = detection_score(expl, &pos, &neg, sites, &judge)?;
    let fuzz = build_fuzz_examples(
        active,
        sites,
        cfg.fuzz_examples.min(active.len()),
        cfg.window,
        cfg.decoy,
        s,
    )
    .and_then(|ex| fuzz_score(expl, &ex, sites, &judge))
    .unwrap_or_else(|e| {
        warn!("latent {}: no fuzzing score ({e})", expl.latent);
        f64::NAN
    });
    let (pos, neg) =
        sample_detection_sites(active, table.len(), n_pos, n_neg, hash_words(&[s, 1]))?;
    let rows: Vec<usize> = pos.into_iter().chain(neg).collect();
    let mut preds = Vec::with_capacity(rows.len());
    for &r in &rows {
        let ctx = Ctx {
            tokens: sites.context(r),
            truth: &table.rows[r],
            key: r as u64,
        };
        preds.push(predictor.predict(expl.latent, &ctx)?.unwrap_or(0.0));
    }
    let truth: Vec<f32> = rows.iter().map(|&r| table.value(r, expl.latent)).collect();
    let ss = sensitivity_specificity(&preds, &truth, cfg.threshold)?;
    Ok(Some(ScoreCard {
        latent: expl.latent,
        detection,
        fuzz,
        sensitivity: ss.sensitivity,
        specificity: ss.specificity,
        n_pos: ss.n_pos,
        n_neg: ss.n_neg,
    }))
}

/// Scorecards for every explanation that can be scored.
pub fn score_all(
    explanations: &[Explanation],
    sites: &SiteIndex,
    table: &LatentTable,
    predictor: &dyn Predictor,
    cfg: &ScoringConfig,
    seed: u64,
) -> Result<Vec<ScoreCard>> {
    let by_latent = table.by_latent();
    let mut cards = Vec::with_capacity(explanations.len());
    for e in explanations {
        let active: Vec<u32> = by_latent[e.latent as usize].iter().map(|a| a.0).collect();
        match score_latent(e, &active, sites, table, predictor, cfg, seed)? {
            Some(c) => cards.push(c),
            None => warn!("latent {}: cannot sample detection sites", e.latent),
        }
    }
    Ok(cards)
}
