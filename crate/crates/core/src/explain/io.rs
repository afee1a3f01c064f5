use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::rules::{ExplainOutcome, Explanation, TokenRule};
use super::score::{ScoreBin, ScoreCard};
use crate::error::{invalid, Result};

#[derive(Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Explained {
        latent: u32,
        rule: String,
        text: String,
        contexts: Vec<u32>,
    },
    Dead {
        latent: u32,
        activations: usize,
    },
}

/// One JSON record per line, in input order.
pub fn explanations_jsonl(outcomes: &[ExplainOutcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        let rec = match o {
            ExplainOutcome::Explained(e) => Record::Explained {
                latent: e.latent,
                rule: e.rule.to_compact(),
                text: e.text.clone(),
                contexts: e.contexts.clone(),
            },
            ExplainOutcome::Dead {
                latent,
                activations,
            } => Record::Dead {
                latent: *latent,
                activations: *activations,
            },
        };
        s.push_str(&serde_json::to_string(&rec).expect("serializable"));
        s.push('\n');
    }
    s
}

pub fn parse_explanations(text: &str) -> Result<Vec<ExplainOutcome>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            Ok(match serde_json::from_str::<Record>(l)? {
                Record::Explained {
                    latent,
                    rule,
                    text,
                    contexts,
                } => ExplainOutcome::Explained(Explanation {
                    latent,
                    rule: TokenRule::parse_compact(&rule)?,
                    text,
                    contexts,
                }),
                Record::Dead {
                    latent,
                    activations,
                } => ExplainOutcome::Dead {
                    latent,
                    activations,
                },
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub const SCORECARD_HEADER: &str = "latent,detection,fuzz,sensitivity,specificity,n_pos,n_neg";

pub fn scorecards_csv(cards: &[ScoreCard]) -> String {
    let mut s = format!("{SCORECARD_HEADER}\n");
    for c in cards {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{},{},{},{}",
            c.latent,
            c.detection,
            c.fuzz,
            opt(c.sensitivity),
            opt(c.specificity),
            c.n_pos,
            c.n_neg
        );
    }
    s
}

pub fn parse_scorecards(text: &str) -> Result<Vec<ScoreCard>> {
    let mut lines = text.lines();
    if lines.next() != Some(SCORECARD_HEADER) {
        return Err(invalid("scorecard CSV has an unexpected header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(invalid(format!(
                    "scorecard row {l:?} has {} fields",
                    f.len()
                )));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| invalid(format!("bad number {s:?}: {e}")))
            };
            let optnum = |s: &str| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s).map(Some)
                }
            };
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| invalid(format!("bad count {s:?}: {e}")))
            };
            Ok(ScoreCard {
                latent: int(f[0])? as u32,
                detection: num(f[1])?,
                fuzz: num(f[2])?,
                sensitivity: optnum(f[3])?,
                specificity: optnum(f[4])?,
                n_pos: int(f[5])?,
                n_neg: int(f[6])?,
            })
        })
        .collect()
}

pub fn bins_csv(bins: &[ScoreBin]) -> String {
    let mut s = String::from("bin,lo,hi,count,mean_score,mean_sensitivity,mean_specificity\n");
    for b in bins {
        let _ = writeln!(
            s,
            "{},{:.3},{:.3},{},{:.6},{},{}",
            b.bin,
            b.lo,
            b.hi,
            b.count,
            b.mean_score,
            opt(b.mean_sensitivity),
            opt(b.mean_specificity)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explanations_roundtrip() {
        let rule = TokenRule {
            current: vec![1, 4],
            previous: Some(vec![2]),
        };
        let outs = vec![
            ExplainOutcome::Explained(Explanation {
                latent: 0,
                text: rule.render(),
                rule,
                contexts: vec![5, 9],
            }),
            ExplainOutcome::Dead {
                latent: 1,
                activations: 3,
            },
        ];
        let text = explanations_jsonl(&outs);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_explanations(&text).unwrap(), outs);
    }

    #[test]
    fn scorecards_roundtrip() {
        let cards = vec![ScoreCard {
            latent: 3,
            detection: 0.75,
            fuzz: 0.5,
            sensitivity: None,
            specificity: Some(0.25),
            n_pos: 100,
            n_neg: 100,
        }];
        let csv = scorecards_csv(&cards);
        assert!(csv.starts_with(SCORECARD_HEADER));
        assert_eq!(parse_scorecards(&csv).unwrap(), cards);
        assert_eq!(scorecards_csv(&[]), format!("{SCORECARD_HEADER}\n"));
    }
}
