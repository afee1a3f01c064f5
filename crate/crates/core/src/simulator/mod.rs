//! Predicting latent activations on a context's last token from the
//! latent's explanation alone.

mod llm;
mod scoring;
mod table;

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::coder::topk_clamped;
use crate::error::{invalid, Error, Result};
use crate::explain::{Explanation, Judge, LatentTable, RuleMatch, SiteIndex};
use crate::numerics::rng::unit_from_key;

pub use llm::{
    parse_rating_response, render_context, HttpTransport, LlmClient, LlmConfig, LlmPredictor,
    ReplayTransport, Transport, PROMPT_TEMPLATE,
};
pub use scoring::{score_all, score_latent, ScoringConfig};
pub use table::PredictionTable;

/// Probabilities of the integer ratings 0..=9.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingDistribution {
    probs: [f64; 10],
}

impl RatingDistribution {
    pub fn new(probs: [f64; 10]) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(invalid(format!(
                "rating probabilities must be non-negative and sum to 1, got {total}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn point(r: usize) -> Self {
        let mut probs = [0.0; 10];
        probs[r.min(9)] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64; 10] {
        &self.probs
    }

    pub fn mixture(&self, other: &Self, lambda: f64) -> Result<Self> {
        let mut probs = [0.0; 10];
        for (i, p) in probs.iter_mut().enumerate() {
            *p = lambda * self.probs[i] + (1.0 - lambda) * other.probs[i];
        }
        Self::new(probs)
    }
}

/// Expected rating `Σ r · p(r)`.
pub fn expected_rating(dist: &RatingDistribution) -> f64 {
    dist.probs
        .iter()
        .enumerate()
        .map(|(r, p)| r as f64 * p)
        .sum()
}

/// One context to predict on: tokens ending at the scored token, the true
/// post-TopK latents there, and a stable key for seeded noise.
#[derive(Clone, Copy, Debug)]
pub struct Ctx<'a> {
    pub tokens: &'a [u32],
    pub truth: &'a [(u32, f32)],
    pub key: u64,
}

impl Ctx<'_> {
    pub fn current(&self) -> u32 {
        *self.tokens.last().expect("non-empty context")
    }

    pub fn previous(&self) -> Option<u32> {
        (self.tokens.len() >= 2).then(|| self.tokens[self.tokens.len() - 2])
    }

    pub fn true_value(&self, latent: u32) -> f32 {
        self.truth
            .binary_search_by_key(&latent, |e| e.0)
            .map_or(0.0, |i| self.truth[i].1)
    }
}

pub trait Predictor {
    /// Raw non-negative prediction; `None` when none could be obtained.
    fn predict(&self, latent: u32, ctx: &Ctx) -> Result<Option<f64>>;
}

/// Returns the true activation.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, latent: u32, ctx: &Ctx) -> Result<Option<f64>> {
        Ok(Some(ctx.true_value(latent) as f64))
    }
}

/// Never predicts activity.
pub struct NullPredictor;

impl Predictor for NullPredictor {
    fn predict(&self, _: u32, _: &Ctx) -> Result<Option<f64>> {
        Ok(Some(0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sensitivity: f64,
    pub specificity: f64,
    /// Nonzero predictions are scaled by a factor uniform in
    /// `[1 - jitter, 1 + jitter)`.
    #[serde(default)]
    pub jitter: f64,
    /// Spread each latent's rates between the configured floor and 1.
    #[serde(default)]
    pub heterogeneous: bool,
}

/// The oracle degraded to a chosen sensitivity and specificity.
///
/// A truly active latent is zeroed with probability `1 - sensitivity`; an
/// inactive one receives, with probability `1 - specificity`, a value drawn
/// from that latent's own nonzero activations (or from all latents' nonzero
/// activations if it has none). With `heterogeneous`, latent `j` gets a
/// quality `q_j` uniform in [0, 1) and rates `s + (1 - s) q_j`.
pub struct NoisyOracle {
    cfg: NoiseConfig,
    pools: Vec<Vec<f32>>,
    pooled: Vec<f32>,
    seed: u64,
}

/// Each latent's nonzero activation values, in row order.
pub fn value_pools(table: &LatentTable) -> Vec<Vec<f32>> {
    table
        .by_latent()
        .into_iter()
        .map(|v| v.into_iter().map(|(_, x)| x).collect())
        .collect()
}

impl NoisyOracle {
    pub fn new(cfg: NoiseConfig, pools: Vec<Vec<f32>>, seed: u64) -> Result<Self> {
        let ok = |x: f64| (0.0..=1.0).contains(&x);
        if !ok(cfg.sensitivity) || !ok(cfg.specificity) || !ok(cfg.jitter) {
            return Err(invalid("noisy-oracle parameters must lie in [0, 1]"));
        }
        let pooled = pools.iter().flatten().copied().collect();
        Ok(Self {
            cfg,
            pools,
            pooled,
            seed,
        })
    }

    pub fn quality(&self, latent: u32) -> f64 {
        if self.cfg.heterogeneous {
            unit_from_key(&[self.seed, latent as u64, 0x9])
        } else {
            0.0
        }
    }

    /// `(sensitivity, specificity)` targeted for `latent`.
    pub fn rates(&self, latent: u32) -> (f64, f64) {
        let q = self.quality(latent);
        let lift = |base: f64| base + (1.0 - base) * q;
        (lift(self.cfg.sensitivity), lift(self.cfg.specificity))
    }
}

impl Predictor for NoisyOracle {
    fn predict(&self, latent: u32, ctx: &Ctx) -> Result<Option<f64>> {
        let (sens, spec) = self.rates(latent);
        let key = |tag: u64| unit_from_key(&[self.seed, latent as u64, ctx.key, tag]);
        let truth = ctx.true_value(latent) as f64;
        let value = if truth > 0.0 {
            if key(1) < sens {
                truth
            } else {
                0.0
            }
        } else if key(1) < 1.0 - spec {
            let own = self.pools.get(latent as usize).filter(|p| !p.is_empty());
            match own.or((!self.pooled.is_empty()).then_some(&self.pooled)) {
                Some(pool) => {
                    pool[((key(2) * pool.len() as f64) as usize).min(pool.len() - 1)] as f64
                }
                None => 0.0,
            }
        } else {
            0.0
        };
        let jitter = 1.0 + self.cfg.jitter * (2.0 * key(3) - 1.0);
        Ok(Some(value * jitter))
    }
}

/// Rates the rule match: 9 for a full match, 2 when only the current token
/// matches, 0 otherwise, plus uniform jitter in `[0, jitter)`.
pub struct RulePredictor {
    rules: HashMap<u32, Explanation>,
    jitter: f64,
    seed: u64,
}

impl RulePredictor {
    pub fn new(explanations: &[Explanation], jitter: f64, seed: u64) -> Self {
        Self {
            rules: explanations.iter().map(|e| (e.latent, e.clone())).collect(),
            jitter,
            seed,
        }
    }
}

impl Predictor for RulePredictor {
    fn predict(&self, latent: u32, ctx: &Ctx) -> Result<Option<f64>> {
        let e = self
            .rules
            .get(&latent)
            .ok_or_else(|| Error::Configuration(format!("no explanation for latent {latent}")))?;
        let base = match e.rule.evaluate(ctx.current(), ctx.previous()) {
            RuleMatch::Full => 9.0,
            RuleMatch::CurrentOnly => 2.0,
            RuleMatch::None => 0.0,
        };
        Ok(Some(
            base + self.jitter * unit_from_key(&[self.seed, latent as u64, ctx.key, 4]),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PredictorConfig {
    Oracle,
    Null,
    NoisyOracle(NoiseConfig),
    Rule {
        #[serde(default)]
        jitter: f64,
    },
    Llm(LlmConfig),
}

impl PredictorConfig {
    pub fn label(&self) -> String {
        match self {
            Self::Oracle => "oracle".into(),
            Self::Null => "null".into(),
            Self::NoisyOracle(c) => format!(
                "noisy-oracle(sens={};spec={};jitter={}{})",
                c.sensitivity,
                c.specificity,
                c.jitter,
                if c.heterogeneous { ";het" } else { "" }
            ),
            Self::Rule { jitter } => format!("rule(jitter={jitter})"),
            Self::Llm(c) => format!("llm({})", c.model),
        }
    }
}

/// Instantiates the configured predictor. `pools` feeds the noisy oracle's
/// false positives (see [`value_pools`]).
pub fn build_predictor(
    cfg: &PredictorConfig,
    explanations: &[Explanation],
    pools: &[Vec<f32>],
    seed: u64,
) -> Result<Box<dyn Predictor>> {
    Ok(match cfg {
        PredictorConfig::Oracle => Box::new(OraclePredictor),
        PredictorConfig::Null => Box::new(NullPredictor),
        PredictorConfig::NoisyOracle(c) => {
            Box::new(NoisyOracle::new(c.clone(), pools.to_vec(), seed)?)
        }
        PredictorConfig::Rule { jitter } => {
            Box::new(RulePredictor::new(explanations, *jitter, seed))
        }
        PredictorConfig::Llm(c) => {
            Box::new(LlmPredictor::new(LlmClient::new(c.clone())?, explanations))
        }
    })
}

/// Raw predictions, `[context][i]` for latent `latents[i]`.
pub fn raw_predictions(
    pred: &dyn Predictor,
    latents: &[u32],
    ctxs: &[Ctx],
) -> Result<Vec<Vec<Option<f64>>>> {
    ctxs.iter()
        .map(|c| latents.iter().map(|&j| pred.predict(j, c)).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    /// Dense post-TopK predicted latents per context.
    pub latents: Vec<Vec<f32>>,
    pub missing: usize,
}

/// Predicts every live latent on every context, optionally transforms
/// (calibrates) the raw values, and keeps the top `k` per context. Missing
/// predictions take no part in the TopK competition.
pub fn simulate_layer(
    pred: &dyn Predictor,
    live: &[u32],
    n_latents: usize,
    ctxs: &[Ctx],
    k: usize,
    transform: Option<&dyn Fn(u32, f64) -> f64>,
) -> Result<Simulation> {
    let mut out = Vec::with_capacity(ctxs.len());
    let mut missing = 0;
    for c in ctxs {
        let mut v = vec![0f32; n_latents];
        for &j in live {
            match pred.predict(j, c)? {
                Some(x) => v[j as usize] = transform.map_or(x, |t| t(j, x)) as f32,
                None => missing += 1,
            }
        }
        topk_clamped(&mut v, k)?;
        out.push(v);
    }
    if missing > 0 {
        warn!("{missing} predictions missing; excluded from TopK");
    }
    Ok(Simulation {
        latents: out,
        missing,
    })
}

/// Judges activity by asking a predictor whether it predicts a value above
/// `threshold`.
pub struct PredictorJudge<'a> {
    pub predictor: &'a dyn Predictor,
    pub table: &'a LatentTable,
    pub threshold: f64,
}

impl Judge for PredictorJudge<'_> {
    fn detect(&self, expl: &Explanation, sites: &SiteIndex, row: usize) -> Result<bool> {
        let ctx = Ctx {
            tokens: sites.context(row),
            truth: &self.table.rows[row],
            key: row as u64,
        };
        Ok(self
            .predictor
            .predict(expl.latent, &ctx)?
            .is_some_and(|x| x > self.threshold))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::TokenRule;
    use crate::numerics::SplitMix64;

    #[test]
    fn expected_rating_examples() {
        assert_eq!(expected_rating(&RatingDistribution::point(0)), 0.0);
        let uniform = RatingDistribution::new([0.1; 10]).unwrap();
        assert!((expected_rating(&uniform) - 4.5).abs() < 1e-12);
        let mut p = [0.0; 10];
        p[3] = 0.5;
        p[7] = 0.5;
        assert_eq!(expected_rating(&RatingDistribution::new(p).unwrap()), 5.0);
        assert!(RatingDistribution::new([0.2; 10]).is_err());
    }

    #[test]
    fn expected_rating_is_linear_in_mixtures() {
        let a = RatingDistribution::new([0.1; 10]).unwrap();
        let b = RatingDistribution::point(8);
        for lambda in [0.0, 0.5, 1.0] {
            let m = a.mixture(&b, lambda).unwrap();
            let want = lambda * expected_rating(&a) + (1.0 - lambda) * expected_rating(&b);
            assert!((expected_rating(&m) - want).abs() < 1e-12);
        }
    }

    fn table(rows: usize, n: usize, k: usize, seed: u64) -> LatentTable {
        let mut rng = SplitMix64::new(seed);
        LatentTable {
            n_latents: n,
            rows: (0..rows)
                .map(|_| {
                    let mut idx = rng.sample_indices(n, k);
                    idx.sort_unstable();
                    idx.into_iter()
                        .map(|j| (j as u32, 0.5 + rng.next_f64() as f32))
                        .collect()
                })
                .collect(),
        }
    }

    fn ctxs<'a>(t: &'a LatentTable, toks: &'a [u32]) -> Vec<Ctx<'a>> {
        t.rows
            .iter()
            .enumerate()
            .map(|(i, r)| Ctx {
                tokens: &toks[i..i + 1],
                truth: r,
                key: i as u64,
            })
            .collect()
    }

    #[test]
    fn oracle_and_null_layers() {
        let t = table(20, 40, 4, 1);
        let toks = vec![0u32; 20];
        let cs = ctxs(&t, &toks);
        let live: Vec<u32> = (0..40).collect();
        let sim = simulate_layer(&OraclePredictor, &live, 40, &cs, 4, None).unwrap();
        for (row, dense) in t.rows.iter().zip(&sim.latents) {
            assert_eq!(&crate::coder::to_sparse(dense), row);
        }
        let sim = simulate_layer(&NullPredictor, &live, 40, &cs, 4, None).unwrap();
        assert!(sim.latents.iter().flatten().all(|v| *v == 0.0));
    }

    fn noisy(sensitivity: f64, specificity: f64, t: &LatentTable) -> NoisyOracle {
        let cfg = NoiseConfig {
            sensitivity,
            specificity,
            jitter: 0.0,
            heterogeneous: false,
        };
        NoisyOracle::new(cfg, value_pools(t), 3).unwrap()
    }

    #[test]
    fn noisy_oracle_hits_its_configured_rates() {
        let t = table(400, 64, 8, 4);
        let toks = vec![0u32; 400];
        let pred = noisy(0.7, 0.99, &t);
        let (mut preds, mut truth) = (Vec::new(), Vec::new());
        for c in ctxs(&t, &toks) {
            for j in 0..64 {
                preds.push(pred.predict(j, &c).unwrap().unwrap());
                truth.push(c.true_value(j));
            }
        }
        let ss = crate::explain::sensitivity_specificity(&preds, &truth, 0.0).unwrap();
        let within =
            |x: f64, p: f64, n: usize| (x - p).abs() <= 2.5758 * (p * (1.0 - p) / n as f64).sqrt();
        assert!(within(ss.sensitivity.unwrap(), 0.7, ss.n_pos), "{ss:?}");
        assert!(within(ss.specificity.unwrap(), 0.99, ss.n_neg), "{ss:?}");
    }

    #[test]
    fn raw_active_count_matches_the_rate_arithmetic() {
        let (n, k, rows) = (512, 32, 500);
        let t = table(rows, n, k, 5);
        let toks = vec![0u32; rows];
        let pred = noisy(1.0, 0.99, &t);
        let mut active = 0;
        for c in ctxs(&t, &toks) {
            for j in 0..n as u32 {
                active += (pred.predict(j, &c).unwrap().unwrap() > 0.0) as usize;
            }
        }
        let mean = active as f64 / rows as f64;
        let expected = 32.0 + 0.01 * 480.0;
        let half = 2.5758 * (480.0 * 0.01 * 0.99 / rows as f64).sqrt();
        assert!(
            (mean - expected).abs() <= half,
            "{mean} vs {expected} ± {half}"
        );
    }

    #[test]
    fn perfect_noisy_oracle_is_the_oracle() {
        let t = table(30, 16, 3, 2);
        let toks = vec![0u32; 30];
        let noisy = NoisyOracle::new(
            NoiseConfig {
                sensitivity: 1.0,
                specificity: 1.0,
                jitter: 0.0,
                heterogeneous: false,
            },
            value_pools(&t),
            5,
        )
        .unwrap();
        for c in ctxs(&t, &toks) {
            for j in 0..16 {
                assert_eq!(
                    noisy.predict(j, &c).unwrap(),
                    OraclePredictor.predict(j, &c).unwrap()
                );
            }
        }
    }

    #[test]
    fn simulated_layers_respect_k() {
        let t = table(50, 64, 8, 3);
        let toks = vec![0u32; 50];
        let noisy = NoisyOracle::new(
            NoiseConfig {
                sensitivity: 0.8,
                specificity: 0.7,
                jitter: 0.2,
                heterogeneous: true,
            },
            value_pools(&t),
            9,
        )
        .unwrap();
        let live: Vec<u32> = (0..64).collect();
        let sim = simulate_layer(&noisy, &live, 64, &ctxs(&t, &toks), 8, None).unwrap();
        assert!(sim
            .latents
            .iter()
            .all(|v| v.iter().filter(|x| **x != 0.0).count() <= 8));
    }

    #[test]
    fn rule_predictor_ratings() {
        let e = Explanation {
            latent: 2,
            rule: TokenRule {
                current: vec![5],
                previous: Some(vec![9]),
            },
            text: String::new(),
            contexts: vec![],
        };
        let p = RulePredictor::new(&[e], 0.0, 0);
        let rate = |toks: &[u32]| {
            p.predict(
                2,
                &Ctx {
                    tokens: toks,
                    truth: &[],
                    key: 0,
                },
            )
            .unwrap()
            .unwrap()
        };
        assert_eq!(rate(&[9, 5]), 9.0);
        assert_eq!(rate(&[1, 5]), 2.0);
        assert_eq!(rate(&[9, 4]), 0.0);
        let missing = p.predict(
            3,
            &Ctx {
                tokens: &[1],
                truth: &[],
                key: 0,
            },
        );
        assert!(matches!(missing, Err(Error::Configuration(_))));
    }

    #[test]
    fn predictor_config_roundtrip() {
        let cfgs = vec![
            PredictorConfig::Oracle,
            PredictorConfig::NoisyOracle(NoiseConfig {
                sensitivity: 0.7,
                specificity: 0.99,
                jitter: 0.0,
                heterogeneous: true,
            }),
            PredictorConfig::Rule { jitter: 0.5 },
        ];
        for c in cfgs {
            let s = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<PredictorConfig>(&s).unwrap(), c);
        }
    }
}
