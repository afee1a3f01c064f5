use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srlab_core::calibration::Estimator;
use srlab_core::coder::CoderTrainConfig;
use srlab_core::explain::ExplainConfig;
use srlab_core::lm::{LmConfig, LmTrainConfig};
use srlab_core::patch::{BootstrapConfig, CalibrationMode, Selection, Target, DEFAULT_FRACTIONS};
use srlab_core::simulator::{PredictorConfig, ScoringConfig};

use crate::error::{PipelineError, Result};

/// A whole experiment. Seed fields inside stage sections are ignored; every
/// stage derives its seed from the global one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub lm: LmConfig,
    #[serde(default)]
    pub lm_train: LmTrainConfig,
    pub acts: ActsConfig,
    pub coder: CoderConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    #[serde(default)]
    pub score: ScoringConfig,
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub calibrate: CalibrateConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub sequences: usize,
    pub rules: usize,
    #[serde(default = "one")]
    pub zipf_exponent: f64,
    /// Trailing sequences held out from training; evaluation prompts and the
    /// per-checkpoint CE come from these.
    pub held_out: usize,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActsConfig {
    /// Training sequences whose every position is dumped.
    pub sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoderConfig {
    pub n_latents: usize,
    pub k: usize,
    /// Also train an autoencoder on the residual stream.
    #[serde(default)]
    pub sae: bool,
    #[serde(default)]
    pub train: CoderTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub predictor: PredictorConfig,
    /// Dump positions predicted on for calibration.
    pub contexts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub estimator: Estimator,
    /// Grid resolution of the stored maps; omitted for lossless storage.
    pub resolution: Option<usize>,
    /// Share of the simulated contexts kept out of fitting for the report.
    pub holdout_fraction: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::Linear,
            resolution: None,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub prompts: usize,
    pub fractions: Vec<f64>,
    pub selections: Vec<Selection>,
    /// Defaults to the simulation predictor alone.
    pub predictors: Vec<PredictorConfig>,
    pub calibrations: Vec<CalibrationMode>,
    pub targets: Vec<Target>,
    pub bootstrap: BootstrapConfig,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            prompts: 1000,
            fractions: DEFAULT_FRACTIONS.to_vec(),
            selections: vec![Selection::TopScoring, Selection::Sampling],
            predictors: Vec::new(),
            calibrations: vec![CalibrationMode::None, CalibrationMode::FittedLargeSample],
            targets: vec![Target::TranscoderMlp],
            bootstrap: BootstrapConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.lm.validate()?;
        if self.corpus.held_out == 0 || self.corpus.held_out >= self.corpus.sequences {
            return bad("corpus.held_out must be between 1 and sequences - 1".into());
        }
        if self.acts.sequences == 0
            || self.acts.sequences > self.corpus.sequences - self.corpus.held_out
        {
            return bad(
                "acts.sequences must be between 1 and the number of training sequences".into(),
            );
        }
        if self.coder.k == 0 || self.coder.k > self.coder.n_latents {
            return bad(format!(
                "coder.k = {} must be in 1..=n_latents",
                self.coder.k
            ));
        }
        if self.simulate.contexts == 0 {
            return bad("simulate.contexts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.calibrate.holdout_fraction) {
            return bad("calibrate.holdout_fraction must be in [0, 1)".into());
        }
        if self
            .evaluate
            .fractions
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
        {
            return bad("evaluate.fractions must lie in [0, 1]".into());
        }
        if self.evaluate.targets.contains(&Target::SaeResid) && !self.coder.sae {
            return bad("evaluate target sae-resid needs coder.sae = true".into());
        }
        Ok(())
    }

    /// Predictors evaluated, falling back to the simulation predictor.
    pub fn eval_predictors(&self) -> Vec<PredictorConfig> {
        if self.evaluate.predictors.is_empty() {
            vec![self.simulate.predictor.clone()]
        } else {
            self.evaluate.predictors.clone()
        }
    }
}
