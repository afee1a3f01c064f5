use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::rules::Explanation;
use super::SiteIndex;
use crate::error::{invalid, Result};
use crate::numerics::rng::{hash_words, unit_from_key};
use crate::numerics::SplitMix64;

/// Makes active/inactive calls from an explanation alone.
pub trait Judge {
    /// Whether the explanation says its latent is active at `row`.
    fn detect(&self, expl: &Explanation, sites: &SiteIndex, row: usize) -> Result<bool>;

    /// Whether the highlighted tokens match the explanation: at least half
    /// of them must be called active.
    fn fuzz(&self, expl: &Explanation, sites: &SiteIndex, ex: &FuzzExample) -> Result<bool> {
        let mut hits = 0;
        for &r in &ex.highlighted {
            hits += self.detect(expl, sites, r)? as usize;
        }
        Ok(2 * hits >= ex.highlighted.len())
    }
}

impl<J: Judge + ?Sized> Judge for &J {
    fn detect(&self, expl: &Explanation, sites: &SiteIndex, row: usize) -> Result<bool> {
        (**self).detect(expl, sites, row)
    }

    fn fuzz(&self, expl: &Explanation, sites: &SiteIndex, ex: &FuzzExample) -> Result<bool> {
        (**self).fuzz(expl, sites, ex)
    }
}

/// Evaluates the explanation's rule exactly.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleJudge;

impl Judge for RuleJudge {
    fn detect(&self, expl: &Explanation, sites: &SiteIndex, row: usize) -> Result<bool> {
        Ok(expl.rule.matches(sites.current(row), sites.previous(row)))
    }
}

/// Flips another judge's answers with a fixed probability, using noise keyed
/// on (seed, latent, item) so repeated queries agree.
#[derive(Clone, Debug)]
pub struct FlipJudge<J> {
    pub inner: J,
    pub flip: f64,
    pub seed: u64,
}

impl<J: Judge> Judge for FlipJudge<J> {
    fn detect(&self, expl: &Explanation, sites: &SiteIndex, row: usize) -> Result<bool> {
        let a = self.inner.detect(expl, sites, row)?;
        Ok(a ^ (unit_from_key(&[self.seed, expl.latent as u64, row as u64, 1]) < self.flip))
    }

    fn fuzz(&self, expl: &Explanation, sites: &SiteIndex, ex: &FuzzExample) -> Result<bool> {
        let a = self.inner.fuzz(expl, sites, ex)?;
        Ok(a ^ (unit_from_key(&[self.seed, expl.latent as u64, ex.id, 2]) < self.flip))
    }
}

fn balanced_accuracy(tp: usize, p: usize, tn: usize, n: usize) -> f64 {
    0.5 * (tp as f64 / p as f64 + tn as f64 / n as f64)
}

/// Samples `n_pos` rows where the latent is active and `n_neg` where it is
/// not. `active` must be sorted.
pub fn sample_detection_sites(
    active: &[u32],
    n_rows: usize,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_inactive = n_rows - active.len();
    if active.len() < n_pos || n_inactive < n_neg {
        return Err(invalid(format!(
            "need {n_pos} active and {n_neg} inactive sites, have {} and {n_inactive}",
            active.len()
        )));
    }
    let mut rng = SplitMix64::new(hash_words(&[seed, 0x5157]));
    let pos = rng
        .sample_indices(active.len(), n_pos)
        .into_iter()
        .map(|i| active[i] as usize)
        .collect();
    let is_active = |r: usize| active.binary_search(&(r as u32)).is_ok();
    let neg = if n_inactive < 4 * n_neg {
        let inactive: Vec<usize> = (0..n_rows).filter(|&r| !is_active(r)).collect();
        rng.sample_indices(inactive.len(), n_neg)
            .into_iter()
            .map(|i| inactive[i])
            .collect()
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n_neg);
        while out.len() < n_neg {
            let r = rng.below(n_rows);
            if !is_active(r) && seen.insert(r) {
                out.push(r);
            }
        }
        out
    };
    Ok((pos, neg))
}

/// Balanced accuracy of the judge's calls on active (`pos`) and inactive
/// (`neg`) sites.
pub fn detection_score(
    expl: &Explanation,
    pos: &[usize],
    neg: &[usize],
    sites: &SiteIndex,
    judge: &dyn Judge,
) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(invalid(
            "detection scoring needs positive and negative sites",
        ));
    }
    let mut tp = 0;
    for &r in pos {
        tp += judge.detect(expl, sites, r)? as usize;
    }
    let mut tn = 0;
    for &r in neg {
        tn += !judge.detect(expl, sites, r)? as usize;
    }
    Ok(balanced_accuracy(tp, pos.len(), tn, neg.len()))
}

/// Where incorrect highlights are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoyMode {
    /// On tokens where the latent is inactive.
    Inactive,
    /// On uniformly random tokens of the window.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuzzExample {
    pub id: u64,
    pub start: usize,
    pub end: usize,
    pub highlighted: Vec<usize>,
    /// Whether the highlights sit on the latent's active tokens.
    pub correct: bool,
}

/// Windows ending on activating tokens, half highlighted on the latent's
/// active tokens and half on decoys.
pub fn build_fuzz_examples(
    active: &[u32],
    sites: &SiteIndex,
    n_each: usize,
    window: usize,
    mode: DecoyMode,
    seed: u64,
) -> Result<Vec<FuzzExample>> {
    if active.len() < n_each || window == 0 {
        return Err(invalid(format!(
            "need {n_each} activating sites for fuzzing, have {}",
            active.len()
        )));
    }
    let mut rng = SplitMix64::new(hash_words(&[seed, 0xF022]));
    let active_in = |start: usize, end: usize| -> Vec<usize> {
        let lo = active.partition_point(|&r| (r as usize) < start);
        let hi = active.partition_point(|&r| (r as usize) < end);
        active[lo..hi].iter().map(|&r| r as usize).collect()
    };
    let mut out = Vec::with_capacity(2 * n_each);
    for i in rng.sample_indices(active.len(), n_each) {
        let w = sites.window(active[i] as usize, window);
        out.push(FuzzExample {
            id: out.len() as u64,
            highlighted: active_in(w.start, w.end),
            start: w.start,
            end: w.end,
            correct: true,
        });
    }
    for i in rng.sample_indices(active.len(), n_each) {
        let w = sites.window(active[i] as usize, window);
        let on = active_in(w.start, w.end);
        let candidates: Vec<usize> = match mode {
            DecoyMode::Inactive => w.clone().filter(|r| on.binary_search(r).is_err()).collect(),
            DecoyMode::Uniform => w.clone().collect(),
        };
        if candidates.is_empty() {
            continue;
        }
        let mut highlighted: Vec<usize> = rng
            .sample_indices(candidates.len(), on.len().min(candidates.len()))
            .into_iter()
            .map(|j| candidates[j])
            .collect();
        highlighted.sort_unstable();
        out.push(FuzzExample {
            id: out.len() as u64,
            start: w.start,
            end: w.end,
            highlighted,
            correct: false,
        });
    }
    Ok(out)
}

/// Balanced accuracy of the judge at telling correct highlights from decoys.
pub fn fuzz_score(
    expl: &Explanation,
    examples: &[FuzzExample],
    sites: &SiteIndex,
    judge: &dyn Judge,
) -> Result<f64> {
    let (mut p, mut n, mut tp, mut tn) = (0, 0, 0, 0);
    for ex in examples {
        let said = judge.fuzz(expl, sites, ex)?;
        if ex.correct {
            p += 1;
            tp += said as usize;
        } else {
            n += 1;
            tn += !said as usize;
        }
    }
    if p == 0 || n == 0 {
        return Err(invalid("fuzz scoring needs correct and incorrect examples"));
    }
    Ok(balanced_accuracy(tp, p, tn, n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensSpec {
    /// `None` when there are no active sites.
    pub sensitivity: Option<f64>,
    /// `None` when there are no inactive sites.
    pub specificity: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Rates of `prediction > threshold` against `truth > 0`.
pub fn sensitivity_specificity(
    predictions: &[f64],
    truth: &[f32],
    threshold: f64,
) -> Result<SensSpec> {
    if predictions.len() != truth.len() {
        return Err(invalid("predictions and truth differ in length"));
    }
    let (mut tp, mut n_pos, mut tn, mut n_neg) = (0, 0, 0, 0);
    for (p, t) in predictions.iter().zip(truth) {
        let said = *p > threshold;
        if *t > 0.0 {
            n_pos += 1;
            tp += said as usize;
        } else {
            n_neg += 1;
            tn += !said as usize;
        }
    }
    Ok(SensSpec {
        sensitivity: (n_pos > 0).then(|| tp as f64 / n_pos as f64),
        specificity: (n_neg > 0).then(|| tn as f64 / n_neg as f64),
        n_pos,
        n_neg,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub latent: u32,
    pub detection: f64,
    pub fuzz: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBin {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_score: f64,
    pub mean_sensitivity: Option<f64>,
    pub mean_specificity: Option<f64>,
}

/// Groups `(score, sensitivity, specificity)` triples into equal-width score
/// bins over [0, 1]. Empty bins are omitted.
pub fn bin_by_score(
    points: &[(f64, Option<f64>, Option<f64>)],
    n_bins: usize,
) -> Result<Vec<ScoreBin>> {
    if n_bins == 0 {
        return Err(invalid("n_bins must be positive"));
    }
    if points.iter().any(|p| !(0.0..=1.0).contains(&p.0)) {
        return Err(invalid("scores must lie in [0, 1]"));
    }
    let mut groups: Vec<Vec<&(f64, Option<f64>, Option<f64>)>> = vec![Vec::new(); n_bins];
    for p in points {
        let b = ((p.0 * n_bins as f64) as usize).min(n_bins - 1);
        groups[b].push(p);
    }
    let mean_of = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    Ok(groups
        .into_iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(b, g)| ScoreBin {
            bin: b,
            lo: b as f64 / n_bins as f64,
            hi: (b + 1) as f64 / n_bins as f64,
            count: g.len(),
            mean_score: g.iter().map(|p| p.0).sum::<f64>() / g.len() as f64,
            mean_sensitivity: mean_of(g.iter().filter_map(|p| p.1).collect()),
            mean_specificity: mean_of(g.iter().filter_map(|p| p.2).collect()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::rules::TokenRule;

    struct CoinJudge(u64);

    impl Judge for CoinJudge {
        fn detect(&self, expl: &Explanation, _: &SiteIndex, row: usize) -> Result<bool> {
            Ok(unit_from_key(&[self.0, expl.latent as u64, row as u64]) < 0.5)
        }
    }

    fn setup(seed: u64) -> (SiteIndex, Explanation, Vec<u32>) {
        let mut rng = SplitMix64::new(seed);
        let toks: Vec<u32> = (0..200 * 16).map(|_| rng.below(12) as u32).collect();
        let sites = SiteIndex::new(toks, 16).unwrap();
        let rule = TokenRule {
            current: vec![3],
            previous: None,
        };
        let active = (0..sites.len() as u32)
            .filter(|&r| sites.current(r as usize) == 3)
            .collect();
        let expl = Explanation {
            latent: 7,
            text: rule.render(),
            rule,
            contexts: vec![],
        };
        (sites, expl, active)
    }

    #[test]
    fn exact_rule_scores_one() {
        let (sites, expl, active) = setup(1);
        let (pos, neg) = sample_detection_sites(&active, sites.len(), 100, 100, 3).unwrap();
        assert_eq!(
            detection_score(&expl, &pos, &neg, &sites, &RuleJudge).unwrap(),
            1.0
        );
        let ex = build_fuzz_examples(&active, &sites, 100, 8, DecoyMode::Inactive, 4).unwrap();
        assert_eq!(fuzz_score(&expl, &ex, &sites, &RuleJudge).unwrap(), 1.0);
    }

    #[test]
    fn insufficient_sites_are_rejected() {
        let (sites, _, active) = setup(2);
        assert!(sample_detection_sites(&active[..50], sites.len(), 100, 100, 0).is_err());
        assert!(
            build_fuzz_examples(&active[..50], &sites, 100, 8, DecoyMode::Inactive, 0).is_err()
        );
    }

    #[test]
    fn random_judge_is_at_chance() {
        let (sites, expl, active) = setup(3);
        let (pos, neg) = sample_detection_sites(&active, sites.len(), 100, 100, 5).unwrap();
        let s = detection_score(&expl, &pos, &neg, &sites, &CoinJudge(9)).unwrap();
        // Balanced accuracy of 200 fair coins: sd = sqrt(0.25/200) ≈ 0.035.
        assert!((s - 0.5).abs() < 3.0 * 0.0354, "{s}");
    }

    #[test]
    fn flip_noise_lowers_detection_to_one_minus_p() {
        let (sites, expl, active) = setup(4);
        for (p, seed) in [(0.1, 11u64), (0.2, 12)] {
            let mut total = 0.0;
            let trials = 40;
            for t in 0..trials {
                let (pos, neg) = sample_detection_sites(&active, sites.len(), 100, 100, t).unwrap();
                let judge = FlipJudge {
                    inner: RuleJudge,
                    flip: p,
                    seed: seed * 1000 + t,
                };
                total += detection_score(&expl, &pos, &neg, &sites, &judge).unwrap();
            }
            let mean = total / trials as f64;
            let sd = (p * (1.0 - p) / 200.0 / trials as f64).sqrt();
            assert!((mean - (1.0 - p)).abs() < 3.0 * sd, "p={p}: {mean}");
        }
    }

    #[test]
    fn flip_noise_lowers_fuzzing_to_one_minus_p() {
        let (sites, expl, active) = setup(6);
        let p = 0.2;
        let trials = 40;
        let mut total = 0.0;
        let mut n = 0;
        for t in 0..trials {
            let ex = build_fuzz_examples(&active, &sites, 50, 8, DecoyMode::Inactive, t).unwrap();
            n += ex.len();
            let judge = FlipJudge {
                inner: RuleJudge,
                flip: p,
                seed: 500 + t,
            };
            total += fuzz_score(&expl, &ex, &sites, &judge).unwrap();
        }
        let mean = total / trials as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((mean - (1.0 - p)).abs() < 3.0 * sd, "{mean}");
    }

    fn choose(n: usize, k: usize) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    /// P(at least half of `h` highlights drawn from `w` tokens land on the
    /// `a` active ones).
    fn majority_chance(w: usize, a: usize, h: usize) -> f64 {
        (0..=h.min(a))
            .filter(|x| 2 * x >= h)
            .map(|x| choose(a, x) * choose(w - a, h - x) / choose(w, h))
            .sum()
    }

    #[test]
    fn uniform_decoys_score_as_their_overlap_predicts() {
        let (sites, expl, active) = setup(7);
        let (mut expected, mut var, mut observed, mut n) = (0.0, 0.0, 0.0, 0);
        for t in 0..20 {
            let ex = build_fuzz_examples(&active, &sites, 50, 8, DecoyMode::Uniform, t).unwrap();
            for e in ex.iter().filter(|e| !e.correct) {
                let a = (e.start..e.end).filter(|&r| sites.current(r) == 3).count();
                let q = majority_chance(e.end - e.start, a, e.highlighted.len());
                expected += q;
                var += q * (1.0 - q);
                observed += RuleJudge.fuzz(&expl, &sites, e).unwrap() as u8 as f64;
                n += 1;
            }
        }
        assert!(
            expected / n as f64 > 0.1,
            "decoys should often overlap the active tokens"
        );
        assert!(
            (observed - expected).abs() < 3.0 * var.sqrt(),
            "{observed} vs {expected}"
        );
    }

    #[test]
    fn sens_spec_edge_cases() {
        let truth = [1.0f32, 0.0, 2.0, 0.0];
        let oracle: Vec<f64> = truth.iter().map(|&t| t as f64).collect();
        let s = sensitivity_specificity(&oracle, &truth, 0.0).unwrap();
        assert_eq!((s.sensitivity, s.specificity), (Some(1.0), Some(1.0)));
        let s = sensitivity_specificity(&[0.0; 4], &truth, 0.0).unwrap();
        assert_eq!((s.sensitivity, s.specificity), (Some(0.0), Some(1.0)));
        let s = sensitivity_specificity(&[0.0; 2], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(s.sensitivity, None);
    }

    #[test]
    fn bins() {
        let pts = vec![(0.55, Some(1.0), Some(1.0)); 5];
        let b = bin_by_score(&pts, 10).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!((b[0].bin, b[0].count), (5, 5));
        let b = bin_by_score(&[(1.0, None, Some(0.5)), (0.0, Some(0.2), None)], 4).unwrap();
        assert_eq!(b.iter().map(|x| x.bin).collect::<Vec<_>>(), vec![0, 3]);
        assert_eq!(b[1].mean_sensitivity, None);
        assert!(bin_by_score(&[(1.5, None, None)], 4).is_err());
    }
}
