//! Rule-generated token corpus.
//!
//! Tokens are drawn from a Zipf base distribution except where a rule
//! triggers: a rule looks at the current token (and optionally the one before
//! it) and, with its firing probability, emits the next token from its own
//! distribution. Every emitted token records which rule produced it, which is
//! the ground truth that explanations are checked against.

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::format::{self, Magic};
use crate::numerics::rng::{Categorical, SplitMix64};

const CORPUS_MAGIC: &Magic = b"SRCO";
const CORPUS_VERSION: u32 = 1;
const NO_RULE: u16 = u16::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub current: u32,
    pub previous: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub trigger: Trigger,
    /// (token, weight); weights are normalized at generation time.
    pub emissions: Vec<(u32, f64)>,
    /// Chance the rule fires when its trigger matches.
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub sequence_length: usize,
    pub num_sequences: usize,
    pub seed: u64,
    /// Exponent of the Zipf base distribution over token ids.
    pub zipf_exponent: f64,
    pub rules: Vec<Rule>,
}

impl CorpusSpec {
    /// A spec with `num_rules` randomly drawn rules. Rules with a previous-token
    /// condition are ordered first so they take precedence.
    pub fn with_random_rules(
        vocab_size: usize,
        sequence_length: usize,
        num_sequences: usize,
        num_rules: usize,
        seed: u64,
    ) -> Self {
        let mut rng = SplitMix64::derive(seed, "corpus-rules");
        let trigger_pool = (vocab_size / 2).max(1);
        let mut currents = rng.sample_indices(trigger_pool, num_rules.min(trigger_pool));
        currents.sort_unstable();
        let mut rules = Vec::new();
        for cur in currents {
            let previous = if rng.bernoulli(0.5) {
                Some(rng.below((vocab_size / 4).max(1)) as u32)
            } else {
                None
            };
            let n_emit = 1 + rng.below(3);
            let emissions = (0..n_emit)
                .map(|_| (rng.below(vocab_size) as u32, 0.2 + rng.next_f64()))
                .collect();
            rules.push(Rule {
                trigger: Trigger {
                    current: cur as u32,
                    previous,
                },
                emissions,
                probability: 0.9,
            });
        }
        rules.sort_by_key(|r| r.trigger.previous.is_none());
        Self {
            vocab_size,
            sequence_length,
            num_sequences,
            seed,
            zipf_exponent: 1.0,
            rules,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.vocab_size > u16::MAX as usize {
            return Err(invalid(format!(
                "vocab_size {} out of range",
                self.vocab_size
            )));
        }
        if self.sequence_length < 2 {
            return Err(invalid("sequence_length must be at least 2"));
        }
        if self.rules.len() >= NO_RULE as usize {
            return Err(invalid("too many rules"));
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(invalid("zipf_exponent must be non-negative"));
        }
        for (i, r) in self.rules.iter().enumerate() {
            let v = self.vocab_size as u32;
            if r.trigger.current >= v
                || r.trigger.previous.is_some_and(|p| p >= v)
                || r.emissions.iter().any(|(t, _)| *t >= v)
            {
                return Err(invalid(format!(
                    "rule {i} references a token outside the vocabulary"
                )));
            }
            if r.emissions.is_empty() || r.emissions.iter().any(|(_, w)| !(*w > 0.0)) {
                return Err(invalid(format!(
                    "rule {i} has an empty or non-positive emission distribution"
                )));
            }
            if !(0.0..=1.0).contains(&r.probability) {
                return Err(invalid(format!("rule {i} probability outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn base_distribution(&self) -> Vec<f64> {
        let w: Vec<f64> = (0..self.vocab_size)
            .map(|i| 1.0 / ((i + 1) as f64).powf(self.zipf_exponent))
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    /// First rule whose trigger matches the given history.
    pub fn matching_rule(&self, current: u32, previous: Option<u32>) -> Option<usize> {
        self.rules.iter().position(|r| {
            r.trigger.current == current
                && match r.trigger.previous {
                    None => true,
                    Some(p) => previous == Some(p),
                }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab_size: usize,
    pub sequence_length: usize,
    /// Flattened sequences, `num_sequences * sequence_length` tokens.
    pub tokens: Vec<u32>,
    /// Rule that emitted each token, if any.
    pub firings: Vec<Option<u16>>,
}

impl Corpus {
    pub fn num_sequences(&self) -> usize {
        self.tokens.len() / self.sequence_length
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.sequence_length..(i + 1) * self.sequence_length]
    }

    pub fn firings_of(&self, i: usize) -> &[Option<u16>] {
        &self.firings[i * self.sequence_length..(i + 1) * self.sequence_length]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_atomic(path, |w| {
            format::write_header(w, CORPUS_MAGIC, CORPUS_VERSION)?;
            w.write_u32::<LittleEndian>(self.vocab_size as u32)?;
            w.write_u32::<LittleEndian>(self.sequence_length as u32)?;
            w.write_u32::<LittleEndian>(self.num_sequences() as u32)?;
            for &t in &self.tokens {
                w.write_u32::<LittleEndian>(t)?;
            }
            for f in &self.firings {
                w.write_u16::<LittleEndian>(f.unwrap_or(NO_RULE))?;
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        format::read_file(path, CORPUS_MAGIC, |r, version| {
            if version != CORPUS_VERSION {
                return Err(format!("unsupported corpus version {version}"));
            }
            let vocab_size = format::u32_field(r, "vocab_size")?;
            let sequence_length = format::u32_field(r, "sequence_length")?;
            let n = format::u32_field(r, "num_sequences")?;
            let total = n * sequence_length;
            let mut tokens = vec![0u32; total];
            r.read_u32_into::<LittleEndian>(&mut tokens)
                .map_err(|e| format!("reading tokens: {e}"))?;
            let mut raw = vec![0u16; total];
            r.read_u16_into::<LittleEndian>(&mut raw)
                .map_err(|e| format!("reading firings: {e}"))?;
            if tokens.iter().any(|&t| t as usize >= vocab_size) {
                return Err("token outside vocabulary".into());
            }
            Ok(Corpus {
                vocab_size,
                sequence_length,
                tokens,
                firings: raw
                    .into_iter()
                    .map(|f| (f != NO_RULE).then_some(f))
                    .collect(),
            })
        })
    }
}

/// Generates the corpus; a pure function of the spec (including its seed).
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let base = Categorical::new(&spec.base_distribution()).expect("valid base distribution");
    let emit: Vec<Categorical> = spec
        .rules
        .iter()
        .map(|r| {
            let w: Vec<f64> = r.emissions.iter().map(|(_, w)| *w).collect();
            Categorical::new(&w).expect("validated emissions")
        })
        .collect();
    let mut rng = SplitMix64::derive(spec.seed, "corpus-tokens");
    let total = spec.num_sequences * spec.sequence_length;
    let mut tokens = Vec::with_capacity(total);
    let mut firings = Vec::with_capacity(total);
    for _ in 0..spec.num_sequences {
        let start = tokens.len();
        for t in 0..spec.sequence_length {
            let fired = if t == 0 {
                None
            } else {
                let cur = tokens[start + t - 1];
                let prev = (t >= 2).then(|| tokens[start + t - 2]);
                spec.matching_rule(cur, prev)
                    .filter(|&ri| rng.bernoulli(spec.rules[ri].probability))
            };
            match fired {
                Some(ri) => {
                    let e = emit[ri].sample(&mut rng);
                    tokens.push(spec.rules[ri].emissions[e].0);
                    firings.push(Some(ri as u16));
                }
                None => {
                    tokens.push(base.sample(&mut rng) as u32);
                    firings.push(None);
                }
            }
        }
    }
    Ok(Corpus {
        vocab_size: spec.vocab_size,
        sequence_length: spec.sequence_length,
        tokens,
        firings,
    })
}
