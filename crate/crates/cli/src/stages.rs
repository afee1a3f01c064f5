//! The pipeline stages and the runner that caches them through the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use srlab_core::calibration::{
    calibration_report, load_calibration, report_csv, save_calibration, CalibrationSet,
};
use srlab_core::coder::{fvu, train_coder, ActivationDataset, CoderKind, SparseCoder};
use srlab_core::explain::{
    bin_by_score, bins_csv, explain_latent, explanations_jsonl, parse_explanations,
    parse_scorecards, rows_by_token, scorecards_csv, ExplainOutcome, Explanation, LatentTable,
    ScoreCard, SiteIndex,
};
use srlab_core::lm::{
    dump_activations, generate_corpus, train_lm, ActivationDump, Corpus, CorpusSpec, LmCheckpoint,
};
use srlab_core::numerics::rng::{hash_str, hash_words};
use srlab_core::numerics::SplitMix64;
use srlab_core::patch::{
    baselines_csv, parse_baselines_csv, parse_reports_csv, plan_grid, prepare_prompts, reports_csv,
    reports_svg, run_baselines, Evaluator, PreparedPrompt, Target, TargetSetup,
};
use srlab_core::simulator::{
    build_predictor, score_all, value_pools, Ctx, LlmClient, LlmPredictor, PredictionTable,
    Predictor, PredictorConfig,
};

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};
use crate::manifest::{sha256_file, sha256_hex, Manifest, RunStatus, StageRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Stage {
    GenCorpus,
    TrainLm,
    DumpActs,
    TrainCoder,
    Explain,
    Score,
    Simulate,
    Calibrate,
    Evaluate,
    Report,
}

impl Stage {
    /// Stages recorded in the manifest, in execution order.
    pub const PIPELINE: [Stage; 9] = [
        Stage::GenCorpus,
        Stage::TrainLm,
        Stage::DumpActs,
        Stage::TrainCoder,
        Stage::Explain,
        Stage::Score,
        Stage::Simulate,
        Stage::Calibrate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::TrainLm => "train-lm",
            Stage::DumpActs => "dump-acts",
            Stage::TrainCoder => "train-coder",
            Stage::Explain => "explain",
            Stage::Score => "score",
            Stage::Simulate => "simulate",
            Stage::Calibrate => "calibrate",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            GenCorpus => &[],
            TrainLm => &[GenCorpus],
            DumpActs => &[GenCorpus, TrainLm],
            TrainCoder => &[DumpActs],
            Explain => &[GenCorpus, DumpActs, TrainCoder],
            Score | Simulate => &[GenCorpus, DumpActs, TrainCoder, Explain],
            Calibrate => &[DumpActs, TrainCoder, Simulate],
            Evaluate => &[
                GenCorpus, TrainLm, DumpActs, TrainCoder, Explain, Score, Simulate, Calibrate,
            ],
            Report => &[Evaluate],
        }
    }

    /// Seed of this stage under the global seed.
    pub fn seed(self, global: u64) -> u64 {
        hash_words(&[global, hash_str(self.name())])
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const CORPUS: &str = "corpus.srco";
const LM_LOG: &str = "lm/training.csv";
const BASELINES: &str = "evaluate/baselines.csv";
const SUBSTITUTION: &str = "evaluate/substitution.csv";
const PER_PROMPT: &str = "evaluate/per_prompt.csv";
const SIM_SUMMARY: &str = "simulate/summary.csv";

fn checkpoint_path(i: usize) -> String {
    format!("lm/checkpoint-{i}.srlm")
}

fn acts_path(hook: &str) -> String {
    format!("acts/{hook}.srac")
}

/// One trained coder and where its files live.
#[derive(Clone, Copy, Debug)]
struct CoderSlot {
    name: &'static str,
    kind: CoderKind,
    input_hook: &'static str,
    target_hook: &'static str,
}

impl CoderSlot {
    const TRANSCODER: Self = Self {
        name: "transcoder",
        kind: CoderKind::Transcoder,
        input_hook: "mlp_in",
        target_hook: "mlp_out",
    };
    const SAE: Self = Self {
        name: "sae",
        kind: CoderKind::Sae,
        input_hook: "resid",
        target_hook: "resid",
    };

    fn weights(self) -> String {
        match self.kind {
            CoderKind::Transcoder => "coder/transcoder.srtc".into(),
            CoderKind::Sae => "coder/sae.srsa".into(),
        }
    }

    fn file(self, stage: &str, suffix: &str) -> String {
        format!("{stage}/{}{suffix}", self.name)
    }
}

fn slots(cfg: &RunConfig) -> Vec<CoderSlot> {
    let mut v = vec![CoderSlot::TRANSCODER];
    if cfg.coder.sae {
        v.push(CoderSlot::SAE);
    }
    v
}

fn slot_for(target: Target) -> CoderSlot {
    match target {
        Target::TranscoderMlp => CoderSlot::TRANSCODER,
        Target::SaeResid => CoderSlot::SAE,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    srlab_core::format::write_atomic(path, |w| w.write_all(text.as_bytes()))?;
    Ok(())
}

/// Read-only view of the run's artifacts.
struct Artifacts<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
}

impl Artifacts<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn read(&self, rel: &str) -> Result<String> {
        Ok(std::fs::read_to_string(self.path(rel))?)
    }

    fn corpus(&self) -> Result<Corpus> {
        Ok(Corpus::load(&self.path(CORPUS))?)
    }

    fn n_train(&self) -> usize {
        self.cfg.corpus.sequences - self.cfg.corpus.held_out
    }

    fn checkpoints(&self) -> Result<Vec<LmCheckpoint>> {
        let mut out = Vec::new();
        while self.path(&checkpoint_path(out.len())).exists() {
            out.push(LmCheckpoint::load(&self.path(&checkpoint_path(out.len())))?);
        }
        if out.is_empty() {
            return Err(PipelineError::Config(
                "no language model checkpoints".into(),
            ));
        }
        Ok(out)
    }

    fn sites(&self, corpus: &Corpus) -> Result<SiteIndex> {
        let n = self.cfg.acts.sequences * corpus.sequence_length;
        Ok(SiteIndex::new(
            corpus.tokens[..n].to_vec(),
            corpus.sequence_length,
        )?)
    }

    fn dump(&self, hook: &str) -> Result<ActivationDump> {
        Ok(ActivationDump::load(&self.path(&acts_path(hook)))?)
    }

    fn coder(&self, slot: CoderSlot) -> Result<SparseCoder> {
        Ok(SparseCoder::load(&self.path(&slot.weights()), slot.kind)?)
    }

    fn table(&self, slot: CoderSlot, coder: &SparseCoder) -> Result<LatentTable> {
        let x = self.dump(slot.input_hook)?;
        Ok(LatentTable {
            n_latents: coder.n_latents(),
            rows: coder.encode_batch(&x.rows)?,
        })
    }

    fn explanations(&self, slot: CoderSlot) -> Result<Vec<Explanation>> {
        Ok(
            parse_explanations(&self.read(&slot.file("explain", ".jsonl"))?)?
                .into_iter()
                .filter_map(|o| match o {
                    ExplainOutcome::Explained(e) => Some(e),
                    ExplainOutcome::Dead { .. } => None,
                })
                .collect(),
        )
    }

    fn predictions(&self, slot: CoderSlot) -> Result<PredictionTable> {
        Ok(PredictionTable::load(
            &self.path(&slot.file("simulate", ".srpr")),
        )?)
    }

    /// Number of leading prediction rows used for fitting calibration.
    fn n_fit(&self, n_rows: usize) -> usize {
        ((1.0 - self.cfg.calibrate.holdout_fraction) * n_rows as f64).round() as usize
    }
}

fn row_ctx<'a>(sites: &'a SiteIndex, table: &'a LatentTable, row: usize) -> Ctx<'a> {
    Ctx {
        tokens: sites.context(row),
        truth: &table.rows[row],
        key: row as u64,
    }
}

/// Evaluation prompts: random spans of held-out sequences, each ending on
/// the token to be predicted.
pub fn eval_prompts(corpus: &Corpus, cfg: &RunConfig, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = SplitMix64::derive(seed, "eval-prompts");
    let first = cfg.corpus.sequences - cfg.corpus.held_out;
    let len = corpus.sequence_length;
    (0..cfg.evaluate.prompts)
        .map(|_| {
            let s = corpus.sequence(first + rng.below(cfg.corpus.held_out));
            let end = 1 + rng.below(len - 1);
            s[end.saturating_sub(cfg.lm.seq_len)..=end].to_vec()
        })
        .collect()
}

fn gen_corpus(a: &Artifacts, seed: u64) -> Result<Vec<String>> {
    let c = &a.cfg.corpus;
    let mut spec = CorpusSpec::with_random_rules(
        a.cfg.lm.vocab_size,
        a.cfg.lm.seq_len,
        c.sequences,
        c.rules,
        seed,
    );
    spec.zipf_exponent = c.zipf_exponent;
    let corpus = generate_corpus(&spec)?;
    let fired = corpus.firings.iter().filter(|f| f.is_some()).count();
    info!(
        "corpus: {} tokens, {fired} rule emissions",
        corpus.tokens.len()
    );
    corpus.save(&a.path(CORPUS))?;
    Ok(vec![CORPUS.into()])
}

fn train_language_model(a: &Artifacts, seed: u64) -> Result<Vec<String>> {
    let corpus = a.corpus()?;
    let n_train = a.n_train() * corpus.sequence_length;
    let train = Corpus {
        vocab_size: corpus.vocab_size,
        sequence_length: corpus.sequence_length,
        tokens: corpus.tokens[..n_train].to_vec(),
        firings: corpus.firings[..n_train].to_vec(),
    };
    let eval: Vec<Vec<u32>> = (a.n_train()..a.cfg.corpus.sequences)
        .map(|i| corpus.sequence(i).to_vec())
        .collect();
    let mut tc = a.cfg.lm_train.clone();
    tc.seed = seed;
    let cks = train_lm(&a.cfg.lm, &train, &eval, &tc)?;
    let mut outputs = Vec::new();
    let mut log = String::from("checkpoint,tokens_seen,ce_on_eval\n");
    for (i, ck) in cks.iter().enumerate() {
        ck.save(&a.path(&checkpoint_path(i)))?;
        outputs.push(checkpoint_path(i));
        let _ = writeln!(log, "{i},{},{:.6}", ck.tokens_seen, ck.ce_on_eval);
    }
    write_text(&a.path(LM_LOG), &log)?;
    outputs.push(LM_LOG.into());
    Ok(outputs)
}

fn dump_acts(a: &Artifacts) -> Result<Vec<String>> {
    let corpus = a.corpus()?;
    let model = a.checkpoints()?.pop().expect("non-empty").model;
    let seqs: Vec<&[u32]> = (0..a.cfg.acts.sequences)
        .map(|i| corpus.sequence(i))
        .collect();
    let d = dump_activations(&model, &seqs)?;
    let mut outputs = Vec::new();
    for dump in [&d.mlp_in, &d.mlp_out, &d.resid] {
        let rel = acts_path(&dump.hook);
        dump.save(&a.path(&rel))?;
        outputs.push(rel);
    }
    Ok(outputs)
}

fn train_coders(a: &Artifacts, seed: u64) -> Result<Vec<String>> {
    let mut outputs = Vec::new();
    let mut metrics = String::from("coder,steps,final_mse,fvu,dead_latents\n");
    for slot in slots(a.cfg) {
        let x = a.dump(slot.input_hook)?.rows;
        let y = a.dump(slot.target_hook)?.rows;
        let data = ActivationDataset::new(x, y)?;
        let s = hash_words(&[seed, hash_str(slot.name)]);
        let init = SparseCoder::init(
            slot.kind,
            a.cfg.coder.n_latents,
            a.cfg.coder.k,
            &data.targets,
            s,
        )?;
        let mut tc = a.cfg.coder.train.clone();
        tc.seed = s;
        let (coder, log) = train_coder(init, &data, &tc)?;
        let f = fvu(&coder, &data)?;
        let mut alive = vec![false; coder.n_latents()];
        for row in coder.encode_batch(&data.inputs)? {
            for (j, _) in row {
                alive[j as usize] = true;
            }
        }
        let dead = alive.iter().filter(|a| !**a).count();
        info!("{}: fvu {f:.4}, {dead} dead latents", slot.name);
        let tail = &log.losses[log.losses.len().saturating_sub(50)..];
        let mse = if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        };
        let _ = writeln!(metrics, "{},{},{mse:.6},{f:.6},{dead}", slot.name, tc.steps);
        coder.save(&a.path(&slot.weights()))?;
        outputs.push(slot.weights());
    }
    write_text(&a.path("coder/metrics.csv"), &metrics)?;
    outputs.push("coder/metrics.csv".into());
    Ok(outputs)
}

fn explain(a: &Artifacts, seed: u64) -> Result<Vec<String>> {
    let corpus = a.corpus()?;
    let sites = a.sites(&corpus)?;
    let by_token = rows_by_token(&sites, a.cfg.lm.vocab_size);
    let mut ecfg = a.cfg.explain.clone();
    ecfg.seed = seed;
    let mut outputs = Vec::new();
    for slot in slots(a.cfg) {
        let coder = a.coder(slot)?;
        let table = a.table(slot, &coder)?;
        let outcomes = table
            .by_latent()
            .iter()
            .enumerate()
            .map(|(j, acts)| explain_latent(j as u32, acts, &sites, &by_token, &ecfg))
            .collect::<srlab_core::Result<Vec<_>>>()?;
        let live = outcomes
            .iter()
            .filter(|o| matches!(o, ExplainOutcome::Explained(_)))
            .count();
        info!(
            "{}: {live} of {} latents explained",
            slot.name,
            outcomes.len()
        );
        let rel = slot.file("explain", ".jsonl");
        write_text(&a.path(&rel), &explanations_jsonl(&outcomes))?;
        outputs.push(rel);
    }
    Ok(outputs)
}

fn score(a: &Artifacts, seed: u64) -> Result<Vec<String>> {
    let sc = &a.cfg.score;
    let corpus = a.corpus()?;
    let sites = a.sites(&corpus)?;
    let mut outputs = Vec::new();
    for slot in slots(a.cfg) {
        let coder = a.coder(slot)?;
        let table = a.table(slot, &coder)?;
        let expls = a.explanations(slot)?;
        let predictor = build_predictor(
            &a.cfg.simulate.predictor,
            &expls,
            &value_pools(&table),
            seed,
        )?;
        let cards = score_all(&expls, &sites, &table, predictor.as_ref(), sc, seed)?;
        let det: Vec<_> = cards
            .iter()
            .map(|c| (c.detection, c.sensitivity, c.specificity))
            .collect();
        let fz: Vec<_> = cards
            .iter()
            .filter(|c| c.fuzz.is_finite())
            .map(|c| (c.fuzz, c.sensitivity, c.specificity))
            .collect();
        for (rel, text) in [
            (slot.file("score", ".csv"), scorecards_csv(&cards)),
            (
                slot.file("score", "_detection_bins.csv"),
                bins_csv(&bin_by_score(&det, sc.bins)?),
            ),
            (
                slot.file("score", "_fuzz_bins.csv"),
                bins_csv(&bin_by_score(&fz, sc.bins)?),
            ),
        ] {
            write_text(&a.path(&rel), &text)?;
            outputs.push(rel);
        }
    }
    Ok(outputs)
}

fn simulate(a: &Artifacts, seed: u64) -> Result<Vec<String>> {
    let corpus = a.corpus()?;
    let sites = a.sites(&corpus)?;
    let mut outputs = Vec::new();
    let mut summary = String::from(
        "coder,contexts,live_latents,missing,mean_true_active,mean_predicted_active\n",
    );
    for slot in slots(a.cfg) {
        let coder = a.coder(slot)?;
        let table = a.table(slot, &coder)?;
        let expls = a.explanations(slot)?;
        let mut live: Vec<u32> = expls.iter().map(|e| e.latent).collect();
        live.sort_unstable();
        let pools = value_pools(&table);
        let mut rng = SplitMix64::derive(seed, slot.name);
        let rows: Vec<u32> = rng
            .sample_indices(table.len(), a.cfg.simulate.contexts.min(table.len()))
            .into_iter()
            .map(|r| r as u32)
            .collect();
        let ctx = |r: usize| row_ctx(&sites, &table, r);
        let predictor: Box<dyn Predictor> = match &a.cfg.simulate.predictor {
            PredictorConfig::Llm(c) => {
                let p = LlmPredictor::new(LlmClient::new(c.clone())?, &expls);
                let jobs: Vec<(u32, Ctx)> = rows
                    .iter()
                    .flat_map(|&r| live.iter().map(move |&j| (j, ctx(r as usize))))
                    .collect();
                p.prefetch(&jobs);
                Box::new(p)
            }
            other => build_predictor(other, &expls, &pools, seed)?,
        };
        let preds = PredictionTable::collect(predictor.as_ref(), &live, &rows, ctx)?;
        let threshold = a.cfg.score.threshold;
        let mut called = 0usize;
        for i in 0..rows.len() {
            called += (0..live.len())
                .filter(|&li| preds.get(i, li).is_some_and(|v| v > threshold))
                .count();
        }
        let truly: usize = rows.iter().map(|&r| table.rows[r as usize].len()).sum();
        let n = rows.len().max(1) as f64;
        let _ = writeln!(
            summary,
            "{},{},{},{},{:.4},{:.4}",
            slot.name,
            rows.len(),
            live.len(),
            preds.missing(),
            truly as f64 / n,
            called as f64 / n
        );
        let rel = slot.file("simulate", ".srpr");
        preds.save(&a.path(&rel))?;
        outputs.push(rel);
    }
    write_text(&a.path(SIM_SUMMARY), &summary)?;
    outputs.push(SIM_SUMMARY.into());
    Ok(outputs)
}

fn calibrate(a: &Artifacts) -> Result<Vec<String>> {
    let cc = &a.cfg.calibrate;
    let mut outputs = Vec::new();
    for slot in slots(a.cfg) {
        let coder = a.coder(slot)?;
        let table = a.table(slot, &coder)?;
        let preds = a.predictions(slot)?;
        let n_fit = a.n_fit(preds.rows.len());
        let samples: BTreeMap<u32, Vec<f64>> = preds
            .latents
            .iter()
            .enumerate()
            .map(|(li, &j)| (j, preds.column(li, 0..n_fit)))
            .collect();
        let set = CalibrationSet::fit(&samples, &table, cc.estimator)?;
        let mut reports = Vec::new();
        for (li, &j) in preds.latents.iter().enumerate() {
            let held = preds.column(li, n_fit..preds.rows.len());
            if let (Some(map), false) = (set.maps.get(&j), held.is_empty()) {
                reports.push((j, calibration_report(map, &held)?));
            }
        }
        if !reports.is_empty() {
            let mean_ks = reports.iter().map(|r| r.1.ks).sum::<f64>() / reports.len() as f64;
            info!(
                "{}: mean held-out KS {mean_ks:.4} over {} latents",
                slot.name,
                reports.len()
            );
        }
        let rel = slot.file("calibrate", ".srqm");
        save_calibration(&a.path(&rel), &set, cc.resolution)?;
        let rep = slot.file("calibrate", "_report.csv");
        write_text(&a.path(&rep), &report_csv(&reports))?;
        outputs.extend([rel, rep]);
    }
    Ok(outputs)
}

/// Artifacts shared by every evaluation target.
pub struct RunData {
    pub corpus: Corpus,
    /// Sites of the activation dump.
    pub sites: SiteIndex,
    pub checkpoints: Vec<LmCheckpoint>,
    /// Evaluation prompts, each ending on its target token.
    pub prompts: Vec<Vec<u32>>,
}

impl RunData {
    /// Loads a finished run's shared artifacts.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let a = Artifacts {
            cfg,
            out: &cfg.out_dir,
        };
        let corpus = a.corpus()?;
        Ok(Self {
            sites: a.sites(&corpus)?,
            checkpoints: a.checkpoints()?,
            prompts: eval_prompts(&corpus, cfg, Stage::Evaluate.seed(cfg.seed)),
            corpus,
        })
    }

    /// The fully trained model.
    pub fn model(&self) -> &srlab_core::lm::ToyLm {
        &self.checkpoints.last().expect("non-empty").model
    }
}

/// One evaluation target's coder, prompts and per-latent artifacts.
pub struct TargetData {
    pub target: Target,
    pub coder: SparseCoder,
    pub table: LatentTable,
    pub prompts: Vec<PreparedPrompt>,
    pub skipped: usize,
    pub explanations: Vec<Explanation>,
    pub cards: Vec<ScoreCard>,
    pub pools: Vec<Vec<f32>>,
    pub predictions: PredictionTable,
    /// Leading prediction rows used for fitting.
    pub n_fit: usize,
    pub calibration_rows: Vec<usize>,
    pub calibration: CalibrationSet,
}

impl TargetData {
    pub fn load(cfg: &RunConfig, run: &RunData, target: Target) -> Result<Self> {
        let a = Artifacts {
            cfg,
            out: &cfg.out_dir,
        };
        let slot = slot_for(target);
        let coder = a.coder(slot)?;
        let table = a.table(slot, &coder)?;
        let (prompts, skipped) = prepare_prompts(run.model(), &coder, target, &run.prompts)?;
        let predictions = a.predictions(slot)?;
        let n_fit = a.n_fit(predictions.rows.len());
        Ok(Self {
            target,
            pools: value_pools(&table),
            prompts,
            skipped,
            explanations: a.explanations(slot)?,
            cards: parse_scorecards(&a.read(&slot.file("score", ".csv"))?)?,
            calibration_rows: predictions.rows[..n_fit]
                .iter()
                .map(|&r| r as usize)
                .collect(),
            calibration: load_calibration(&a.path(&slot.file("calibrate", ".srqm")))?,
            n_fit,
            predictions,
            coder,
            table,
        })
    }

    pub fn setup<'a>(&'a self, sites: &'a SiteIndex) -> TargetSetup<'a> {
        TargetSetup {
            coder: &self.coder,
            prompts: &self.prompts,
            skipped: self.skipped,
            explanations: &self.explanations,
            scorecards: Some(&self.cards),
            pools: &self.pools,
            sites,
            table: &self.table,
            calibration_rows: &self.calibration_rows,
        }
    }
}

/// Installs `data`'s setups in `ev`, each with its stored calibration for
/// the simulation predictor.
pub fn attach<'a>(
    ev: &mut Evaluator<'a>,
    cfg: &RunConfig,
    run: &'a RunData,
    data: &'a [TargetData],
) {
    for d in data {
        match d.target {
            Target::TranscoderMlp => ev.transcoder = Some(d.setup(&run.sites)),
            Target::SaeResid => ev.sae = Some(d.setup(&run.sites)),
        }
        ev.set_calibration(d.target, &cfg.simulate.predictor, d.calibration.clone());
    }
}

fn evaluate(a: &Artifacts, seed: u64) -> Result<Vec<String>> {
    let ec = &a.cfg.evaluate;
    let run = RunData::load(a.cfg)?;
    let model = run.model();
    let transcoder = a.coder(CoderSlot::TRANSCODER)?;
    let sae = if a.cfg.coder.sae {
        Some(a.coder(CoderSlot::SAE)?)
    } else {
        None
    };
    let baselines = run_baselines(
        model,
        &transcoder,
        sae.as_ref(),
        &run.checkpoints,
        &run.prompts,
        ec.bootstrap,
        seed,
    )?;
    write_text(&a.path(BASELINES), &baselines_csv(&baselines))?;

    let data = ec
        .targets
        .iter()
        .map(|&t| TargetData::load(a.cfg, &run, t))
        .collect::<Result<Vec<_>>>()?;
    let mut ev = Evaluator::new(model, seed);
    ev.estimator = a.cfg.calibrate.estimator;
    ev.boot = ec.bootstrap;
    attach(&mut ev, a.cfg, &run, &data);
    let plans = plan_grid(
        &ec.fractions,
        &ec.selections,
        &a.cfg.eval_predictors(),
        &ec.calibrations,
        &ec.targets,
    );
    let reports = plans
        .iter()
        .map(|p| ev.evaluate(p))
        .collect::<srlab_core::Result<Vec<_>>>()?;
    write_text(&a.path(SUBSTITUTION), &reports_csv(&reports))?;
    let mut per_prompt = String::from("plan_id,prompt,ce_ref,ce_patched\n");
    for r in &reports {
        for (i, (c0, c1)) in r.ce_ref.iter().zip(&r.ce_patched).enumerate() {
            let _ = writeln!(per_prompt, "{},{i},{c0:.6},{c1:.6}", r.plan.id());
        }
    }
    write_text(&a.path(PER_PROMPT), &per_prompt)?;
    Ok(vec![
        BASELINES.into(),
        SUBSTITUTION.into(),
        PER_PROMPT.into(),
    ])
}

/// Baselines drawn as reference lines on the substitution chart.
fn is_reference_line(name: &str) -> bool {
    name == "zero-ablation" || name == "skip-only" || name.starts_with("checkpoint-")
}

fn report(a: &Artifacts) -> Result<Vec<String>> {
    let bars = parse_reports_csv(&a.read(SUBSTITUTION)?)?;
    let baselines = parse_baselines_csv(&a.read(BASELINES)?)?;
    let lines: Vec<(String, f64)> = baselines
        .iter()
        .filter(|b| is_reference_line(&b.0))
        .cloned()
        .collect();
    write_text(
        &a.path("report/substitution.svg"),
        &reports_svg(&bars, &lines),
    )?;

    let mut s = String::from("# Run summary\n\n## Baselines (median |dCE| vs unpatched)\n\n");
    for (name, m) in &baselines {
        let _ = writeln!(s, "- {name}: {m:.4}");
    }
    s.push_str("\n## Substitutions (median |dCE|, confidence interval)\n\n");
    for b in &bars {
        let _ = writeln!(
            s,
            "- {} at {}: {:.4} [{:.4}, {:.4}]",
            b.series, b.fraction, b.median, b.lo, b.hi
        );
    }
    write_text(&a.path("report/summary.md"), &s)?;
    Ok(vec![
        "report/substitution.svg".into(),
        "report/summary.md".into(),
    ])
}

/// Runs stages against an output directory, skipping those whose inputs,
/// configuration and outputs are unchanged since they were recorded.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub manifest: Manifest,
}

impl Pipeline {
    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out)?;
        let manifest = Manifest::load(&out)?;
        Ok(Self { cfg, out, manifest })
    }

    /// Hash of the configuration sections the stage reads.
    pub fn config_hash(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let v = match stage {
            Stage::GenCorpus => serde_json::json!([c.corpus, c.lm.vocab_size, c.lm.seq_len]),
            Stage::TrainLm => serde_json::json!([c.corpus, c.lm, c.lm_train]),
            Stage::DumpActs => serde_json::json!(c.acts),
            Stage::TrainCoder => serde_json::json!(c.coder),
            Stage::Explain => serde_json::json!([c.explain, c.acts, c.coder.sae]),
            Stage::Score => serde_json::json!([c.score, c.simulate.predictor, c.acts, c.coder.sae]),
            Stage::Simulate => {
                serde_json::json!([c.simulate, c.score.threshold, c.acts, c.coder.sae])
            }
            Stage::Calibrate => serde_json::json!([c.calibrate, c.coder.sae]),
            Stage::Evaluate => serde_json::json!([
                c.evaluate,
                c.simulate.predictor,
                c.calibrate,
                c.corpus,
                c.lm
            ]),
            Stage::Report => serde_json::json!(null),
        };
        sha256_hex(v.to_string().as_bytes())
    }

    /// Verifies a recorded stage's outputs and returns them.
    fn verified_outputs(
        &self,
        stage: Stage,
        wanted_by: Stage,
    ) -> Result<&BTreeMap<String, String>> {
        let rec =
            self.manifest
                .stages
                .get(stage.name())
                .ok_or_else(|| PipelineError::Dependency {
                    stage: wanted_by.name().into(),
                    producer: stage.name().into(),
                    artifact: self.out.join(primary_output(stage)),
                })?;
        for (rel, expected) in &rec.outputs {
            let path = self.out.join(rel);
            if !path.exists() {
                return Err(PipelineError::Dependency {
                    stage: wanted_by.name().into(),
                    producer: stage.name().into(),
                    artifact: path,
                });
            }
            let found = sha256_file(&path)?;
            if &found != expected {
                return Err(PipelineError::Stale {
                    path,
                    producer: stage.name().into(),
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(&rec.outputs)
    }

    fn execute(&self, stage: Stage, seed: u64) -> Result<Vec<String>> {
        let a = Artifacts {
            cfg: &self.cfg,
            out: &self.out,
        };
        match stage {
            Stage::GenCorpus => gen_corpus(&a, seed),
            Stage::TrainLm => train_language_model(&a, seed),
            Stage::DumpActs => dump_acts(&a),
            Stage::TrainCoder => train_coders(&a, seed),
            Stage::Explain => explain(&a, seed),
            Stage::Score => score(&a, seed),
            Stage::Simulate => simulate(&a, seed),
            Stage::Calibrate => calibrate(&a),
            Stage::Evaluate => evaluate(&a, seed),
            Stage::Report => report(&a),
        }
    }

    /// Runs one stage. The report stage always recomputes and is not
    /// recorded.
    pub fn run_stage(&mut self, stage: Stage, force: bool) -> Result<RunStatus> {
        let mut inputs = BTreeMap::new();
        for &dep in stage.deps() {
            inputs.extend(self.verified_outputs(dep, stage)?.clone());
        }
        let seed = stage.seed(self.cfg.seed);
        if stage == Stage::Report {
            self.execute(stage, seed)?;
            info!("{stage}: written");
            return Ok(RunStatus::Computed);
        }
        let config_hash = self.config_hash(stage);
        if !force {
            if let Some(prev) = self.manifest.stages.get(stage.name()) {
                let same =
                    prev.config_hash == config_hash && prev.seed == seed && prev.inputs == inputs;
                let present = prev.outputs.keys().all(|rel| self.out.join(rel).exists());
                if same && present {
                    self.verified_outputs(stage, stage)?;
                    let rec = self.manifest.stages.get_mut(stage.name()).expect("present");
                    rec.status = RunStatus::Cached;
                    self.manifest.save(&self.out)?;
                    info!("{stage}: cache hit");
                    return Ok(RunStatus::Cached);
                }
            }
        }
        let t0 = Instant::now();
        let produced = self.execute(stage, seed)?;
        let wall_ms = t0.elapsed().as_millis() as u64;
        let mut outputs = BTreeMap::new();
        for rel in produced {
            let h = sha256_file(&self.out.join(&rel))?;
            outputs.insert(rel, h);
        }
        self.manifest.stages.insert(
            stage.name().into(),
            StageRecord {
                seed,
                config_hash,
                inputs,
                outputs,
                status: RunStatus::Computed,
                wall_ms,
            },
        );
        self.manifest.save(&self.out)?;
        info!("{stage}: computed in {wall_ms} ms");
        Ok(RunStatus::Computed)
    }

    /// Runs the pipeline in order through `last` (everything, including the
    /// report, when `None`).
    pub fn run_all(&mut self, last: Option<Stage>, force: bool) -> Result<Vec<(Stage, RunStatus)>> {
        let last = last.unwrap_or(Stage::Report);
        let mut out = Vec::new();
        for stage in Stage::PIPELINE.into_iter().chain([Stage::Report]) {
            if stage > last {
                break;
            }
            out.push((stage, self.run_stage(stage, force)?));
        }
        Ok(out)
    }
}

fn primary_output(stage: Stage) -> String {
    match stage {
        Stage::GenCorpus => CORPUS.into(),
        Stage::TrainLm => LM_LOG.into(),
        Stage::DumpActs => acts_path("mlp_in"),
        Stage::TrainCoder => CoderSlot::TRANSCODER.weights(),
        Stage::Explain => CoderSlot::TRANSCODER.file("explain", ".jsonl"),
        Stage::Score => CoderSlot::TRANSCODER.file("score", ".csv"),
        Stage::Simulate => SIM_SUMMARY.into(),
        Stage::Calibrate => CoderSlot::TRANSCODER.file("calibrate", ".srqm"),
        Stage::Evaluate => SUBSTITUTION.into(),
        Stage::Report => "report/substitution.svg".into(),
    }
}
