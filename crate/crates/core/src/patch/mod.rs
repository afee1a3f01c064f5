//! Substituting simulated latents into the model and measuring the change
//! in next-token cross entropy on the last token of each prompt.

mod report;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationSet, Estimator};
use crate::coder::{to_dense, topk_clamped, SparseCoder, SparseLatents};
use crate::error::{invalid, Error, Result};
use crate::explain::{Explanation, LatentTable, ScoreCard, SiteIndex};
use crate::lm::{token_ce, LmCheckpoint, PrefixState, ToyLm};
use crate::numerics::rng::hash_words;
use crate::numerics::stats::mean;
use crate::numerics::{bootstrap_median_ci, MedianCi, SplitMix64};
use crate::simulator::{build_predictor, Ctx, Predictor, PredictorConfig};

pub use report::{
    baselines_csv, parse_baselines_csv, parse_reports_csv, reports_csv, reports_svg, Bar,
    BASELINE_HEADER, REPORT_HEADER,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    TopScoring,
    Sampling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    None,
    /// Maps fitted on predictions over a separate context sample against the
    /// full activation dump.
    FittedLargeSample,
    /// Maps fitted on the evaluation prompts' own predictions and latents.
    EmpiricalOverPrompts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// Transcoder replacing the hook layer's MLP output.
    TranscoderMlp,
    /// Autoencoder replacing the residual stream after the hook layer.
    SaeResid,
}

macro_rules! kebab_display {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = serde_json::to_value(self).expect("unit enum");
                f.write_str(s.as_str().expect("string tag"))
            }
        }
    )*};
}
kebab_display!(Selection, CalibrationMode, Target);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstitutionPlan {
    pub fraction: f64,
    pub selection: Selection,
    pub predictor: PredictorConfig,
    pub calibration: CalibrationMode,
    pub target: Target,
}

impl SubstitutionPlan {
    /// Label shared by the plans that differ only in fraction.
    pub fn series(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.target,
            self.selection,
            self.predictor.label(),
            self.calibration
        )
    }

    pub fn id(&self) -> String {
        format!("{}/f={}", self.series(), self.fraction)
    }
}

/// Latents to substitute among `live`, returned in ascending order.
pub fn select_latents(
    fraction: f64,
    selection: Selection,
    scorecards: Option<&[ScoreCard]>,
    live: &[u32],
    seed: u64,
) -> Result<Vec<u32>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(format!("fraction {fraction} outside [0, 1]")));
    }
    let count = (fraction * live.len() as f64).round() as usize;
    let mut chosen: Vec<u32> = match selection {
        Selection::TopScoring => {
            let cards = scorecards.ok_or_else(|| {
                Error::Configuration("top-scoring selection needs scorecards".into())
            })?;
            let score: HashMap<u32, f64> = cards.iter().map(|c| (c.latent, c.detection)).collect();
            let mut ranked = Vec::with_capacity(live.len());
            for &j in live {
                let s = score.get(&j).ok_or_else(|| {
                    Error::Configuration(format!("no scorecard for live latent {j}"))
                })?;
                ranked.push((j, *s));
            }
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.into_iter().take(count).map(|(j, _)| j).collect()
        }
        Selection::Sampling => {
            let mut rng = SplitMix64::derive(seed, "select-latents");
            rng.sample_indices(live.len(), count)
                .into_iter()
                .map(|i| live[i])
                .collect()
        }
    };
    chosen.sort_unstable();
    Ok(chosen)
}

/// `sensitivity * k + (1 - specificity) * (n - k)`: the mean number of
/// latents a predictor with these rates calls active before TopK.
pub fn expected_active_count(
    n: usize,
    k: usize,
    sensitivity: f64,
    specificity: f64,
) -> Result<f64> {
    let ok = |x: f64| (0.0..=1.0).contains(&x);
    if !ok(sensitivity) || !ok(specificity) {
        return Err(invalid("sensitivity and specificity must lie in [0, 1]"));
    }
    if k > n {
        return Err(invalid(format!("k = {k} exceeds n = {n}")));
    }
    Ok(sensitivity * k as f64 + (1.0 - specificity) * (n - k) as f64)
}

/// One prompt, run once through the clean model, with everything needed to
/// evaluate substitutions at its last context position.
pub struct PreparedPrompt {
    /// Index in the caller's prompt list.
    pub index: usize,
    pub context: Vec<u32>,
    pub target: u32,
    /// Coder input at the last position.
    pub x: Vec<f32>,
    /// True post-TopK latents there.
    pub latents: SparseLatents,
    pub clean_ce: f64,
    state: PrefixState<f32>,
}

impl PreparedPrompt {
    pub fn ctx(&self) -> Ctx<'_> {
        Ctx {
            tokens: &self.context,
            truth: &self.latents,
            key: hash_words(&[0x5eed_e7a1, self.index as u64]),
        }
    }
}

fn prompt_problem(model: &ToyLm, p: &[u32]) -> Option<String> {
    let c = &model.config;
    if p.len() < 2 {
        Some(format!("{} tokens", p.len()))
    } else if p.len() - 1 > c.seq_len {
        Some(format!("context of {} exceeds {}", p.len() - 1, c.seq_len))
    } else if let Some(t) = p.iter().find(|&&t| t as usize >= c.vocab_size) {
        Some(format!("token {t} outside the vocabulary"))
    } else {
        None
    }
}

/// Prepares every usable prompt; the rest are skipped with a warning.
pub fn prepare_prompts(
    model: &ToyLm,
    coder: &SparseCoder,
    target: Target,
    prompts: &[Vec<u32>],
) -> Result<(Vec<PreparedPrompt>, usize)> {
    let mut out = Vec::with_capacity(prompts.len());
    let mut skipped = 0;
    for (index, p) in prompts.iter().enumerate() {
        if let Some(why) = prompt_problem(model, p) {
            warn!("prompt {index} skipped: {why}");
            skipped += 1;
            continue;
        }
        let (context, tgt) = (p[..p.len() - 1].to_vec(), p[p.len() - 1]);
        let (state, logits) = model.prefix_state(&context)?;
        let x = match target {
            Target::TranscoderMlp => state.mlp_in.clone(),
            Target::SaeResid => state.resid.clone(),
        };
        let latents = coder.encode(&x)?;
        out.push(PreparedPrompt {
            index,
            context,
            target: tgt,
            latents,
            x,
            clean_ce: token_ce(&logits, tgt),
            state,
        });
    }
    Ok((out, skipped))
}

/// Splices coder outputs into the model at the hook layer.
#[derive(Clone, Copy)]
pub struct Patcher<'a> {
    pub model: &'a ToyLm,
    pub coder: &'a SparseCoder,
    pub target: Target,
}

impl Patcher<'_> {
    /// CE when the hooked quantity (MLP output, or the residual for the
    /// autoencoder) at the last position is replaced by `y`.
    pub fn ce_with_output(&self, p: &PreparedPrompt, y: &[f32]) -> f64 {
        let resid: Vec<f32> = match self.target {
            Target::TranscoderMlp => p
                .state
                .resid_mid
                .iter()
                .zip(y)
                .map(|(a, b)| a + b)
                .collect(),
            Target::SaeResid => y.to_vec(),
        };
        token_ce(&self.model.logits_from_resid(&p.state, &resid), p.target)
    }

    pub fn ce_with_latents(&self, p: &PreparedPrompt, latents: &[f32]) -> Result<f64> {
        let y = self.coder.decode(latents, &p.x)?;
        Ok(self.ce_with_output(p, &y))
    }

    pub fn ce_substituted(&self, p: &PreparedPrompt) -> Result<f64> {
        self.ce_with_latents(p, &to_dense(&p.latents, self.coder.n_latents()))
    }

    pub fn ce_skip_only(&self, p: &PreparedPrompt) -> Result<f64> {
        let y = self.coder.skip_only(&p.x)?;
        Ok(self.ce_with_output(p, &y))
    }

    /// Merges predicted values for `selected` into the true latents, applies
    /// one TopK, and evaluates. Missing predictions count as zero.
    pub fn ce_merged(
        &self,
        p: &PreparedPrompt,
        selected: &[u32],
        predictor: &dyn Predictor,
        calibration: Option<&CalibrationSet>,
    ) -> Result<(f64, usize)> {
        let mut merged = to_dense(&p.latents, self.coder.n_latents());
        let ctx = p.ctx();
        let mut missing = 0;
        for &j in selected {
            merged[j as usize] = match predictor.predict(j, &ctx)? {
                Some(v) => calibration.map_or(v, |c| c.apply(j, v)) as f32,
                None => {
                    missing += 1;
                    0.0
                }
            };
        }
        topk_clamped(&mut merged, self.coder.k)?;
        Ok((self.ce_with_latents(p, &merged)?, missing))
    }
}

/// Mean signed change and the median absolute change with its bootstrap
/// interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaStats {
    pub mean_delta: f64,
    pub mean_abs: f64,
    pub median_abs: MedianCi,
}

pub fn delta_stats(
    patched: &[f64],
    reference: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<DeltaStats> {
    if patched.len() != reference.len() {
        return Err(invalid("patched and reference CE lengths differ"));
    }
    let deltas: Vec<f64> = patched.iter().zip(reference).map(|(a, b)| a - b).collect();
    let abs: Vec<f64> = deltas.iter().map(|d| d.abs()).collect();
    Ok(DeltaStats {
        mean_delta: mean(&deltas),
        mean_abs: mean(&abs),
        median_abs: bootstrap_median_ci(&abs, resamples, level, seed)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub name: String,
    pub ce: Vec<f64>,
    pub stats: DeltaStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineTable {
    pub n_prompts: usize,
    pub skipped: usize,
    pub rows: Vec<Baseline>,
}

impl BaselineTable {
    pub fn get(&self, name: &str) -> Option<&Baseline> {
        self.rows.iter().find(|b| b.name == name)
    }
}

/// CE of the reference model and of the standard replacements on the same
/// prompts: the unpatched model, transcoder and autoencoder substitution,
/// the MLP output zeroed, the transcoder with all latents zeroed (skip path
/// only), and every checkpoint.
pub fn run_baselines(
    model: &ToyLm,
    transcoder: &SparseCoder,
    sae: Option<&SparseCoder>,
    checkpoints: &[LmCheckpoint],
    prompts: &[Vec<u32>],
    boot: BootstrapConfig,
    seed: u64,
) -> Result<BaselineTable> {
    let (prepared, skipped) = prepare_prompts(model, transcoder, Target::TranscoderMlp, prompts)?;
    if prepared.is_empty() {
        return Err(invalid("no usable prompts"));
    }
    let tc = Patcher {
        model,
        coder: transcoder,
        target: Target::TranscoderMlp,
    };
    let reference: Vec<f64> = prepared.iter().map(|p| p.clean_ce).collect();
    let mut named: Vec<(String, Vec<f64>)> = vec![("unpatched".into(), reference.clone())];
    named.push((
        "transcoder".into(),
        prepared
            .iter()
            .map(|p| tc.ce_substituted(p))
            .collect::<Result<_>>()?,
    ));
    if let Some(sae) = sae {
        let (sp, _) = prepare_prompts(model, sae, Target::SaeResid, prompts)?;
        let pt = Patcher {
            model,
            coder: sae,
            target: Target::SaeResid,
        };
        named.push((
            "sae".into(),
            sp.iter()
                .map(|p| pt.ce_substituted(p))
                .collect::<Result<_>>()?,
        ));
    }
    let zeros = vec![0f32; model.config.d_model];
    named.push((
        "zero-ablation".into(),
        prepared
            .iter()
            .map(|p| tc.ce_with_output(p, &zeros))
            .collect(),
    ));
    named.push((
        "skip-only".into(),
        prepared
            .iter()
            .map(|p| tc.ce_skip_only(p))
            .collect::<Result<_>>()?,
    ));
    for (i, ck) in checkpoints.iter().enumerate() {
        let ce = prepared
            .iter()
            .map(|p| {
                let (_, logits) = ck.model.prefix_state(&p.context)?;
                Ok(token_ce(&logits, p.target))
            })
            .collect::<Result<Vec<f64>>>()?;
        named.push((format!("checkpoint-{i}@{}", ck.tokens_seen), ce));
    }
    let rows = named
        .into_iter()
        .map(|(name, ce)| {
            let stats = delta_stats(&ce, &reference, boot.resamples, boot.level, seed)?;
            Ok(Baseline { name, ce, stats })
        })
        .collect::<Result<_>>()?;
    Ok(BaselineTable {
        n_prompts: prepared.len(),
        skipped,
        rows,
    })
}

/// Everything a plan needs about one substitution target.
pub struct TargetSetup<'a> {
    pub coder: &'a SparseCoder,
    pub prompts: &'a [PreparedPrompt],
    pub skipped: usize,
    pub explanations: &'a [Explanation],
    pub scorecards: Option<&'a [ScoreCard]>,
    /// Nonzero activation values per latent, for the noisy oracle.
    pub pools: &'a [Vec<f32>],
    /// Sites and true latents of the activation dump.
    pub sites: &'a SiteIndex,
    pub table: &'a LatentTable,
    /// Rows of the dump whose contexts supply predictions for large-sample
    /// calibration.
    pub calibration_rows: &'a [usize],
}

impl TargetSetup<'_> {
    pub fn live(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.explanations.iter().map(|e| e.latent).collect();
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubstitutionReport {
    pub plan: SubstitutionPlan,
    pub seed: u64,
    pub n_prompts: usize,
    pub skipped: usize,
    pub n_selected: usize,
    pub missing: usize,
    pub ce_ref: Vec<f64>,
    pub ce_patched: Vec<f64>,
    pub stats: DeltaStats,
    pub boot: BootstrapConfig,
}

impl SubstitutionReport {
    pub fn mean_ce_ref(&self) -> f64 {
        mean(&self.ce_ref)
    }
}

/// Evaluates plans over prepared prompts, fitting and caching calibration
/// maps per predictor as needed.
pub struct Evaluator<'a> {
    pub model: &'a ToyLm,
    pub transcoder: Option<TargetSetup<'a>>,
    pub sae: Option<TargetSetup<'a>>,
    pub estimator: Estimator,
    pub boot: BootstrapConfig,
    pub seed: u64,
    fitted: RefCell<HashMap<(Target, String), CalibrationSet>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a ToyLm, seed: u64) -> Self {
        Self {
            model,
            transcoder: None,
            sae: None,
            estimator: Estimator::Linear,
            boot: BootstrapConfig::default(),
            seed,
            fitted: RefCell::new(HashMap::new()),
        }
    }

    fn setup(&self, target: Target) -> Result<&TargetSetup<'a>> {
        match target {
            Target::TranscoderMlp => self.transcoder.as_ref(),
            Target::SaeResid => self.sae.as_ref(),
        }
        .ok_or_else(|| Error::Configuration(format!("no coder configured for target {target}")))
    }

    /// Uses `set` for large-sample calibration of `predictor` on `target`.
    pub fn set_calibration(
        &self,
        target: Target,
        predictor: &PredictorConfig,
        set: CalibrationSet,
    ) {
        self.fitted
            .borrow_mut()
            .insert((target, predictor.label()), set);
    }

    fn large_sample_calibration(
        &self,
        target: Target,
        cfg: &PredictorConfig,
        pred: &dyn Predictor,
    ) -> Result<CalibrationSet> {
        let key = (target, cfg.label());
        if let Some(s) = self.fitted.borrow().get(&key) {
            return Ok(s.clone());
        }
        let s = self.setup(target)?;
        if s.calibration_rows.is_empty() {
            return Err(Error::Configuration(
                "large-sample calibration needs calibration rows".into(),
            ));
        }
        let ctxs: Vec<Ctx> = s
            .calibration_rows
            .iter()
            .map(|&r| Ctx {
                tokens: s.sites.context(r),
                truth: &s.table.rows[r],
                key: r as u64,
            })
            .collect();
        let set = fit_from_predictor(pred, &s.live(), &ctxs, s.table, self.estimator)?;
        self.fitted.borrow_mut().insert(key, set.clone());
        Ok(set)
    }

    pub fn evaluate(&self, plan: &SubstitutionPlan) -> Result<SubstitutionReport> {
        let s = self.setup(plan.target)?;
        if s.prompts.is_empty() {
            return Err(invalid("no usable prompts"));
        }
        let live = s.live();
        let selected = select_latents(
            plan.fraction,
            plan.selection,
            s.scorecards,
            &live,
            self.seed,
        )?;
        let predictor = build_predictor(&plan.predictor, s.explanations, s.pools, self.seed)?;
        let calibration = match plan.calibration {
            CalibrationMode::None => None,
            CalibrationMode::FittedLargeSample => Some(self.large_sample_calibration(
                plan.target,
                &plan.predictor,
                predictor.as_ref(),
            )?),
            CalibrationMode::EmpiricalOverPrompts => {
                let ctxs: Vec<Ctx> = s.prompts.iter().map(PreparedPrompt::ctx).collect();
                let table = LatentTable {
                    n_latents: s.coder.n_latents(),
                    rows: s.prompts.iter().map(|p| p.latents.clone()).collect(),
                };
                Some(fit_from_predictor(
                    predictor.as_ref(),
                    &selected,
                    &ctxs,
                    &table,
                    self.estimator,
                )?)
            }
        };
        let patcher = Patcher {
            model: self.model,
            coder: s.coder,
            target: plan.target,
        };
        let mut ce_patched = Vec::with_capacity(s.prompts.len());
        let mut missing = 0;
        for p in s.prompts {
            let (ce, m) =
                patcher.ce_merged(p, &selected, predictor.as_ref(), calibration.as_ref())?;
            ce_patched.push(ce);
            missing += m;
        }
        if missing > 0 {
            warn!("{}: {missing} predictions missing", plan.id());
        }
        let ce_ref: Vec<f64> = s.prompts.iter().map(|p| p.clean_ce).collect();
        let stats = delta_stats(
            &ce_patched,
            &ce_ref,
            self.boot.resamples,
            self.boot.level,
            self.seed,
        )?;
        info!(
            "{}: mean delta {:.4}, median |delta| {:.4} [{:.4}, {:.4}]",
            plan.id(),
            stats.mean_delta,
            stats.median_abs.median,
            stats.median_abs.lo,
            stats.median_abs.hi
        );
        Ok(SubstitutionReport {
            plan: plan.clone(),
            seed: self.seed,
            n_prompts: s.prompts.len(),
            skipped: s.skipped,
            n_selected: selected.len(),
            missing,
            ce_ref,
            ce_patched,
            stats,
            boot: self.boot,
        })
    }
}

/// Fits a map per latent from the predictor's raw outputs on `ctxs`
/// against that latent's column of `truth`.
pub fn fit_from_predictor(
    pred: &dyn Predictor,
    latents: &[u32],
    ctxs: &[Ctx],
    truth: &LatentTable,
    estimator: Estimator,
) -> Result<CalibrationSet> {
    let mut samples: BTreeMap<u32, Vec<f64>> = latents
        .iter()
        .map(|&j| (j, Vec::with_capacity(ctxs.len())))
        .collect();
    for c in ctxs {
        for (&j, s) in samples.iter_mut() {
            if let Some(v) = pred.predict(j, c)? {
                s.push(v);
            }
        }
    }
    CalibrationSet::fit(&samples, truth, estimator)
}

/// Plans over every combination, fractions varying fastest.
pub fn plan_grid(
    fractions: &[f64],
    selections: &[Selection],
    predictors: &[PredictorConfig],
    calibrations: &[CalibrationMode],
    targets: &[Target],
) -> Vec<SubstitutionPlan> {
    let mut out = Vec::new();
    for &target in targets {
        for predictor in predictors {
            for &calibration in calibrations {
                for &selection in selections {
                    for &fraction in fractions {
                        out.push(SubstitutionPlan {
                            fraction,
                            selection,
                            predictor: predictor.clone(),
                            calibration,
                            target,
                        });
                    }
                }
            }
        }
    }
    out
}

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.1, 0.2, 0.5, 1.0];
