use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::SiteIndex;
use crate::error::{invalid, Result};
use crate::numerics::rng::unit_from_key;

/// Predicate over the current token and, optionally, the one before it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRule {
    /// Sorted, non-empty.
    pub current: Vec<u32>,
    /// Sorted; `None` means no condition on the previous token.
    pub previous: Option<Vec<u32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleMatch {
    Full,
    /// The current token matches but the previous-token condition does not.
    CurrentOnly,
    None,
}

impl TokenRule {
    pub fn evaluate(&self, current: u32, previous: Option<u32>) -> RuleMatch {
        if self.current.binary_search(&current).is_err() {
            return RuleMatch::None;
        }
        match &self.previous {
            None => RuleMatch::Full,
            Some(p) => match previous {
                Some(t) if p.binary_search(&t).is_ok() => RuleMatch::Full,
                _ => RuleMatch::CurrentOnly,
            },
        }
    }

    pub fn matches(&self, current: u32, previous: Option<u32>) -> bool {
        self.evaluate(current, previous) == RuleMatch::Full
    }

    /// Compact form, e.g. `cur=3,17;prev=9`.
    pub fn to_compact(&self) -> String {
        let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        let mut s = format!("cur={}", join(&self.current));
        if let Some(p) = &self.previous {
            let _ = write!(s, ";prev={}", join(p));
        }
        s
    }

    pub fn parse_compact(s: &str) -> Result<Self> {
        let list = |v: &str| -> Result<Vec<u32>> {
            let mut out = v
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<u32>()
                        .map_err(|e| invalid(format!("bad token {t:?} in rule: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            out.sort_unstable();
            out.dedup();
            Ok(out)
        };
        let mut current = None;
        let mut previous = None;
        for part in s.split(';') {
            match part.split_once('=') {
                Some(("cur", v)) => current = Some(list(v)?),
                Some(("prev", v)) => previous = Some(list(v)?),
                _ => return Err(invalid(format!("malformed rule {s:?}"))),
            }
        }
        let current =
            current.ok_or_else(|| invalid(format!("rule {s:?} has no current-token set")))?;
        Ok(Self { current, previous })
    }

    pub fn render(&self) -> String {
        let list = |v: &[u32]| -> String {
            match v {
                [one] => format!("the token {one}"),
                _ => format!(
                    "any of the tokens {}",
                    v.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
                ),
            }
        };
        let mut s = format!("Active on {}", list(&self.current));
        if let Some(p) = &self.previous {
            let _ = write!(
                s,
                " when the previous token is {}",
                list(p).trim_start_matches("the token ")
            );
        }
        s.push('.');
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub latent: u32,
    pub rule: TokenRule,
    pub text: String,
    /// Rows of the top-activating examples the rule was derived from.
    pub contexts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExplainOutcome {
    Explained(Explanation),
    Dead { latent: u32, activations: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub min_examples: usize,
    pub coverage: f64,
    pub top_examples: usize,
    /// Held-out precision gain required to add a previous-token condition.
    pub min_precision_gain: f64,
    /// Rows kept out of rule construction and used to judge precision.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            min_examples: 20,
            coverage: 0.8,
            top_examples: 200,
            min_precision_gain: 0.05,
            holdout_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Smallest set of keys (by descending frequency, ties to the lower key)
/// whose counts reach `coverage` of `total`.
fn covering_set(counts: &BTreeMap<u32, usize>, total: usize, coverage: f64) -> Vec<u32> {
    let mut by_freq: Vec<(u32, usize)> = counts.iter().map(|(k, v)| (*k, *v)).collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut set = Vec::new();
    let mut covered = 0;
    for (tok, c) in by_freq {
        if covered as f64 >= coverage * total as f64 {
            break;
        }
        set.push(tok);
        covered += c;
    }
    set.sort_unstable();
    set
}

/// Derives a rule for one latent from its activations.
///
/// `activations` are the latent's `(row, value)` pairs in row order;
/// `by_token[t]` lists all rows whose current token is `t`.
pub fn explain_latent(
    latent: u32,
    activations: &[(u32, f32)],
    sites: &SiteIndex,
    by_token: &[Vec<u32>],
    cfg: &ExplainConfig,
) -> Result<ExplainOutcome> {
    if !(0.0..=1.0).contains(&cfg.coverage) || !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(invalid("coverage and holdout_fraction must be fractions"));
    }
    if activations.len() < cfg.min_examples {
        return Ok(ExplainOutcome::Dead {
            latent,
            activations: activations.len(),
        });
    }
    let held_out = |row: u32| unit_from_key(&[cfg.seed, row as u64]) < cfg.holdout_fraction;
    let mut train: Vec<(u32, f32)> = activations
        .iter()
        .copied()
        .filter(|(r, _)| !held_out(*r))
        .collect();
    if train.is_empty() {
        train = activations.to_vec();
    }
    train.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    train.truncate(cfg.top_examples);

    let mut cur_counts = BTreeMap::new();
    for (r, _) in &train {
        *cur_counts.entry(sites.current(*r as usize)).or_insert(0) += 1;
    }
    let current = covering_set(&cur_counts, train.len(), cfg.coverage);

    let mut prev_counts = BTreeMap::new();
    let mut matching = 0;
    for (r, _) in &train {
        let r = *r as usize;
        if current.binary_search(&sites.current(r)).is_ok() {
            matching += 1;
            if let Some(p) = sites.previous(r) {
                *prev_counts.entry(p).or_insert(0) += 1;
            }
        }
    }
    let base = TokenRule {
        current: current.clone(),
        previous: None,
    };
    let mut rule = base.clone();
    if !prev_counts.is_empty() {
        let cond = TokenRule {
            current,
            previous: Some(covering_set(&prev_counts, matching, cfg.coverage)),
        };
        let active: Vec<u32> = activations.iter().map(|a| a.0).collect();
        let precision = |rule: &TokenRule| {
            let (mut hit, mut total) = (0usize, 0usize);
            for &t in &rule.current {
                for &r in by_token.get(t as usize).map_or(&[][..], |v| v) {
                    if held_out(r) && rule.matches(t, sites.previous(r as usize)) {
                        total += 1;
                        hit += active.binary_search(&r).is_ok() as usize;
                    }
                }
            }
            if total == 0 {
                0.0
            } else {
                hit as f64 / total as f64
            }
        };
        if precision(&cond) - precision(&base) >= cfg.min_precision_gain {
            rule = cond;
        }
    }
    Ok(ExplainOutcome::Explained(Explanation {
        latent,
        text: rule.render(),
        rule,
        contexts: train.iter().map(|a| a.0).collect(),
    }))
}

/// Rows grouped by their current token.
pub fn rows_by_token(sites: &SiteIndex, vocab: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); vocab];
    for (r, &t) in sites.tokens().iter().enumerate() {
        if (t as usize) < vocab {
            out[t as usize].push(r as u32);
        }
    }
    out
}
