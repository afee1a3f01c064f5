//! Acceptance checks, one PASS/FAIL line each. Run with
//! `cargo test -p srlab-cli --test acceptance`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use srlab_cli::{attach, Manifest, Pipeline, RunConfig, RunData, Stage, TargetData};
use srlab_core::calibration::{CalibrationSet, Estimator, QuantileMap};
use srlab_core::coder::{fvu, ActivationDataset, CoderKind, SparseCoder};
use srlab_core::explain::LatentTable;
use srlab_core::lm::{LmConfig, ToyLm};
use srlab_core::numerics::{ks_distance, Matrix, SplitMix64};
use srlab_core::patch::{
    expected_active_count, CalibrationMode, Evaluator, Patcher, Selection, SubstitutionPlan, Target,
};
use srlab_core::simulator::{
    score_all, value_pools, Ctx, NoiseConfig, NoisyOracle, Predictor, PredictorConfig,
    ScoringConfig,
};
use srlab_core::synthetic::{build_suite, score_quality_link, SuiteConfig};

type Check = Result<(bool, String), Box<dyn std::error::Error>>;

const SMOKE: &str = include_str!("../../../configs/smoke.toml");
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const PILOT_PROMPTS: usize = 2000;
const FRACTIONS: [f64; 3] = [0.1, 0.2, 0.5];

fn report(id: &str, name: &str, limit: Duration, elapsed: Duration, check: Check) -> bool {
    let (ok, detail) = match check {
        Ok((ok, d)) => (ok, d),
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = elapsed <= limit;
    let pass = ok && in_time;
    let time_note = if in_time {
        String::new()
    } else {
        format!(", over the {limit:?} limit")
    };
    println!(
        "{} {id} {name} ({:.1} s{time_note}): {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn timed(f: impl FnOnce() -> Check) -> (Duration, Check) {
    let t = Instant::now();
    let r = f();
    (t.elapsed(), r)
}

fn smoke(seed: u64, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(SMOKE).expect("smoke config parses");
    cfg.seed = seed;
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn c1() -> Check {
    let mut rng = SplitMix64::new(5);
    let d = 16;
    let sample = Matrix::from_fn(256, d, |_, j| {
        (rng.normal() * (1.0 + j as f64) + j as f64) as f32
    });
    let coder = SparseCoder::init(CoderKind::Transcoder, 64, 8, &sample, 3)?;
    let mut exact = 0;
    for _ in 0..100 {
        let x: Vec<f32> = (0..d).map(|_| 3.0 * rng.normal() as f32).collect();
        if coder.forward(&x)?.0 == coder.b2.row(0) {
            exact += 1;
        }
    }
    let f = fvu(&coder, &ActivationDataset::new(sample.clone(), sample)?)?;
    Ok((
        exact == 100 && (f - 1.0).abs() <= 1e-6,
        format!("{exact}/100 outputs equal b2, FVU {f:.9}"),
    ))
}

fn c2(dir: &Path) -> Check {
    let cfg = smoke(11, dir);
    Pipeline::open(cfg.clone())?.run_all(Some(Stage::Calibrate), false)?;
    let run = RunData::load(&cfg)?;
    let mut d = TargetData::load(&cfg, &run, Target::TranscoderMlp)?;
    d.prompts.truncate(200);
    let n = d.prompts.len();
    let patcher = Patcher {
        model: run.model(),
        coder: &d.coder,
        target: Target::TranscoderMlp,
    };
    let reference: Vec<f64> = d
        .prompts
        .iter()
        .map(|p| patcher.ce_substituted(p))
        .collect::<Result<_, _>>()?;
    let data = vec![d];
    let mut ev = Evaluator::new(run.model(), 11);
    ev.boot.resamples = 10;
    attach(&mut ev, &cfg, &run, &data);
    let mut worst = 0.0f64;
    for fraction in [0.0, 0.1, 0.5, 1.0] {
        for selection in [Selection::TopScoring, Selection::Sampling] {
            let r = ev.evaluate(&SubstitutionPlan {
                fraction,
                selection,
                predictor: PredictorConfig::Oracle,
                calibration: CalibrationMode::None,
                target: Target::TranscoderMlp,
            })?;
            for (a, b) in r.ce_patched.iter().zip(&reference) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok((
        n == 200 && worst <= 1e-6,
        format!("{n} prompts, max |oracle - transcoder| {worst:.2e} nats"),
    ))
}

/// Relative error `|g - g_fd| / max(|g|, |g_fd|)` per tensor.
fn fd_errors<M>(
    model: &mut M,
    analytic: Vec<Matrix<f64>>,
    tensors: for<'a> fn(&'a mut M) -> Vec<&'a mut Matrix<f64>>,
    loss: impl Fn(&M) -> f64,
    h: f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    for (ti, a) in analytic.iter().enumerate() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in 0..a.data().len() {
            let orig = tensors(model)[ti].data()[i];
            tensors(model)[ti].data_mut()[i] = orig + h;
            let lp = loss(model);
            tensors(model)[ti].data_mut()[i] = orig - h;
            let lm = loss(model);
            tensors(model)[ti].data_mut()[i] = orig;
            let g = (lp - lm) / (2.0 * h);
            diff += (a.data()[i] - g).powi(2);
            na += a.data()[i].powi(2);
            nn += g * g;
        }
        let scale = f64::max(na, nn).sqrt();
        out.push(if scale == 0.0 {
            0.0
        } else {
            diff.sqrt() / scale
        });
    }
    out
}

fn c3() -> Check {
    let mut rng = SplitMix64::new(21);
    let cfg = LmConfig {
        vocab_size: 13,
        layers: 2,
        d_model: 16,
        d_mlp: 32,
        heads: 2,
        seq_len: 8,
        hook_layer: 1,
    };
    let mut lm = ToyLm::<f64>::init(cfg, 4)?;
    for t in lm.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.3 * rng.normal());
    }
    let seqs: Vec<Vec<u32>> = (0..2)
        .map(|_| (0..8).map(|_| rng.below(13) as u32).collect())
        .collect();
    let lm_loss = |m: &ToyLm<f64>| {
        let mut g = m.zeros_like();
        seqs.iter()
            .map(|s| m.loss_and_grad(s, &mut g, 0.0).unwrap())
            .sum::<f64>()
    };
    let mut g = lm.zeros_like();
    for s in &seqs {
        lm.loss_and_grad(s, &mut g, 1.0)?;
    }
    let analytic = g.tensors().into_iter().cloned().collect();
    let lm_err = fd_errors(&mut lm, analytic, ToyLm::<f64>::tensors_mut, lm_loss, 1e-5);

    let x = Matrix::<f64>::from_fn(12, 8, |_, _| rng.normal());
    let t = Matrix::<f64>::from_fn(12, 8, |_, _| rng.normal());
    let mut coder = SparseCoder::<f64>::init(CoderKind::Transcoder, 16, 4, &t, 6)?;
    for m in coder.tensors_mut() {
        m.data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.3 * rng.normal());
    }
    let mut g = coder.zeros_like();
    coder.loss_and_grad(&x, &t, &mut g, 1.0)?;
    let analytic = g.tensors().into_iter().cloned().collect();
    let coder_loss =
        |c: &SparseCoder<f64>| c.loss_and_grad(&x, &t, &mut c.zeros_like(), 0.0).unwrap();
    let coder_err = fd_errors(
        &mut coder,
        analytic,
        SparseCoder::<f64>::tensors_mut,
        coder_loss,
        1e-6,
    );

    let worst_lm = lm_err.iter().cloned().fold(0.0, f64::max);
    let worst_coder = coder_err.iter().cloned().fold(0.0, f64::max);
    Ok((
        worst_lm <= 1e-3 && worst_coder <= 1e-3,
        format!(
            "max relative error: LM {worst_lm:.2e} over {} tensors, coder {worst_coder:.2e}",
            lm_err.len()
        ),
    ))
}

fn distinct(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|i| scale * (rng.next_f64() + i as f64))
        .collect();
    rng.shuffle(&mut v);
    v
}

fn c4() -> Check {
    let mut rng = SplitMix64::new(8);
    let mut notes = Vec::new();
    let mut ok = true;

    let pred: Vec<f64> = (0..300).map(|_| rng.normal() * 2.0).collect();
    let truth: Vec<f64> = (0..300)
        .map(|_| {
            if rng.bernoulli(0.6) {
                0.0
            } else {
                rng.normal().exp()
            }
        })
        .collect();
    let m = QuantileMap::fit(&pred, &truth, Estimator::Linear)?;
    let mut violations = 0;
    for _ in 0..10_000 {
        let (a, b) = (rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if m.apply(lo) > m.apply(hi) {
            violations += 1;
        }
    }
    ok &= violations == 0;
    notes.push(format!(
        "{violations} monotonicity violations in 10^4 probes"
    ));

    ok &= m.zero_fraction() > 0.0 && m.apply(0.0) == 0.0;
    notes.push(format!(
        "apply(0) = {} at zero fraction {:.2}",
        m.apply(0.0),
        m.zero_fraction()
    ));

    let s: Vec<f64> = (0..200)
        .map(|_| {
            if rng.bernoulli(0.3) {
                0.0
            } else {
                rng.uniform(0.0, 4.0)
            }
        })
        .collect();
    let id = QuantileMap::fit(&s, &s, Estimator::Linear)?;
    let moved = s.iter().filter(|&&x| id.apply(x) != x).count();
    ok &= moved == 0;
    notes.push(format!("{moved} sample points moved by a self-fit"));

    for n in [16, 256] {
        let p = distinct(&mut rng, n, 0.7);
        let t = distinct(&mut rng, n, 1.9);
        let m = QuantileMap::fit(&p, &t, Estimator::Linear)?;
        let mapped: Vec<f64> = p.iter().map(|&x| m.apply(x)).collect();
        let ks = ks_distance(&mapped, &t)?;
        ok &= ks <= 2.0 / n as f64;
        notes.push(format!("KS {ks:.4} at n={n}"));
    }
    Ok((ok, notes.join(", ")))
}

fn c5() -> Check {
    let (n, k, sens, contexts) = (512usize, 32usize, 0.8, 2000usize);
    let mut rng = SplitMix64::new(31);
    let rows: Vec<Vec<(u32, f32)>> = (0..contexts)
        .map(|_| {
            let mut idx: Vec<u32> = rng
                .sample_indices(n, k)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            idx.sort_unstable();
            idx.into_iter()
                .map(|j| (j, 0.5 + rng.next_f64() as f32))
                .collect()
        })
        .collect();
    let table = LatentTable { n_latents: n, rows };
    let tokens = [0u32];
    let mut ok = true;
    let mut notes = Vec::new();
    for spec in [0.9, 0.99, 1.0] {
        let oracle = NoisyOracle::new(
            NoiseConfig {
                sensitivity: sens,
                specificity: spec,
                jitter: 0.0,
                heterogeneous: false,
            },
            value_pools(&table),
            17,
        )?;
        let mut total = 0usize;
        for (r, truth) in table.rows.iter().enumerate() {
            let ctx = Ctx {
                tokens: &tokens,
                truth,
                key: r as u64,
            };
            for j in 0..n as u32 {
                if oracle.predict(j, &ctx)?.unwrap_or(0.0) > 0.0 {
                    total += 1;
                }
            }
        }
        let observed = total as f64 / contexts as f64;
        let expected = expected_active_count(n, k, sens, spec)?;
        let var = k as f64 * sens * (1.0 - sens) + (n - k) as f64 * spec * (1.0 - spec);
        let half = 2.5758 * (var / contexts as f64).sqrt();
        ok &= (observed - expected).abs() <= half.max(1e-12);
        notes.push(format!(
            "spec {spec}: {observed:.3} vs {expected:.3} ± {half:.3}"
        ));
    }
    let big = expected_active_count(32768, 32, 1.0, 0.99)?;
    ok &= (big - 359.36).abs() < 1e-9 && (100.0..1000.0).contains(&big);
    notes.push(format!("n=32768 formula {big:.2}"));
    Ok((ok, notes.join("; ")))
}

fn c8() -> Check {
    let sc = ScoringConfig {
        threshold: 0.0,
        ..ScoringConfig::default()
    };
    let suite = build_suite(&SuiteConfig::default())?;
    let (det, fuzz) = score_quality_link(&suite, &sc, 0)?;
    let rhos = [
        det.rho_sensitivity,
        det.rho_specificity,
        fuzz.rho_sensitivity,
        fuzz.rho_specificity,
    ];
    Ok((
        rhos.iter().all(|r| *r > 0.9),
        format!(
            "Spearman detection/sensitivity {:.3}, detection/specificity {:.3}, fuzz/sensitivity {:.3}, fuzz/specificity {:.3} ({} and {} bins)",
            rhos[0],
            rhos[1],
            rhos[2],
            rhos[3],
            det.bins.len(),
            fuzz.bins.len()
        ),
    ))
}

/// Mean |ΔCE| per pilot seed for everything criteria 6, 7 and 9 compare.
#[derive(Debug, Default)]
struct PilotResult {
    uncalibrated: f64,
    calibrated: f64,
    small_fit: f64,
    empirical: f64,
    /// (fraction, top-scoring, sampling) under the rule predictor.
    rule_selection: Vec<(f64, f64, f64)>,
    /// The same under the heterogeneous noisy oracle.
    noisy_selection: Vec<(f64, f64, f64)>,
}

fn heterogeneous_noise() -> NoiseConfig {
    NoiseConfig {
        sensitivity: 0.5,
        specificity: 0.9,
        jitter: 0.2,
        heterogeneous: true,
    }
}

fn pilot(seed: u64, dir: &Path) -> Result<PilotResult, Box<dyn std::error::Error>> {
    let mut cfg = smoke(seed, dir);
    cfg.evaluate.prompts = PILOT_PROMPTS;
    Pipeline::open(cfg.clone())?.run_all(Some(Stage::Calibrate), false)?;
    let run = RunData::load(&cfg)?;
    let eval_seed = Stage::Evaluate.seed(seed);
    let data = vec![TargetData::load(&cfg, &run, Target::TranscoderMlp)?];
    let rule = cfg.simulate.predictor.clone();
    let plan = |fraction, selection, predictor: &PredictorConfig, calibration| SubstitutionPlan {
        fraction,
        selection,
        predictor: predictor.clone(),
        calibration,
        target: Target::TranscoderMlp,
    };
    let mean_abs = |ev: &Evaluator, p: SubstitutionPlan| ev.evaluate(&p).map(|r| r.stats.mean_abs);
    let evaluator = |data| {
        let mut ev = Evaluator::new(run.model(), eval_seed);
        ev.boot.resamples = 10;
        ev.estimator = cfg.calibrate.estimator;
        attach(&mut ev, &cfg, &run, data);
        ev
    };

    let mut out = PilotResult::default();
    let ev = evaluator(&data);
    out.uncalibrated = mean_abs(
        &ev,
        plan(1.0, Selection::TopScoring, &rule, CalibrationMode::None),
    )?;
    out.calibrated = mean_abs(
        &ev,
        plan(
            1.0,
            Selection::TopScoring,
            &rule,
            CalibrationMode::FittedLargeSample,
        ),
    )?;
    out.empirical = mean_abs(
        &ev,
        plan(
            1.0,
            Selection::TopScoring,
            &rule,
            CalibrationMode::EmpiricalOverPrompts,
        ),
    )?;
    for f in FRACTIONS {
        let t = mean_abs(
            &ev,
            plan(
                f,
                Selection::TopScoring,
                &rule,
                CalibrationMode::FittedLargeSample,
            ),
        )?;
        let s = mean_abs(
            &ev,
            plan(
                f,
                Selection::Sampling,
                &rule,
                CalibrationMode::FittedLargeSample,
            ),
        )?;
        out.rule_selection.push((f, t, s));
    }

    let d = &data[0];
    let small: BTreeMap<u32, Vec<f64>> = d
        .predictions
        .latents
        .iter()
        .enumerate()
        .map(|(li, &j)| (j, d.predictions.column(li, 0..d.n_fit / 10)))
        .collect();
    let ev = evaluator(&data);
    ev.set_calibration(
        Target::TranscoderMlp,
        &rule,
        CalibrationSet::fit(&small, &d.table, cfg.calibrate.estimator)?,
    );
    out.small_fit = mean_abs(
        &ev,
        plan(
            1.0,
            Selection::TopScoring,
            &rule,
            CalibrationMode::FittedLargeSample,
        ),
    )?;

    let noise = heterogeneous_noise();
    let noisy = PredictorConfig::NoisyOracle(noise.clone());
    let oracle = NoisyOracle::new(noise, d.pools.clone(), eval_seed)?;
    let sc = ScoringConfig {
        threshold: 0.0,
        ..cfg.score.clone()
    };
    let mut scored = vec![TargetData::load(&cfg, &run, Target::TranscoderMlp)?];
    scored[0].cards = score_all(
        &d.explanations,
        &run.sites,
        &d.table,
        &oracle,
        &sc,
        eval_seed,
    )?;
    let ev = evaluator(&scored);
    for f in FRACTIONS {
        let t = mean_abs(
            &ev,
            plan(
                f,
                Selection::TopScoring,
                &noisy,
                CalibrationMode::FittedLargeSample,
            ),
        )?;
        let s = mean_abs(
            &ev,
            plan(
                f,
                Selection::Sampling,
                &noisy,
                CalibrationMode::FittedLargeSample,
            ),
        )?;
        out.noisy_selection.push((f, t, s));
    }
    Ok(out)
}

fn count(results: &[PilotResult], f: impl Fn(&PilotResult) -> bool) -> usize {
    results.iter().filter(|r| f(r)).count()
}

fn selection_holds(rows: &[(f64, f64, f64)]) -> bool {
    rows.iter().all(|(_, t, s)| t <= s)
}

fn selection_note(rows: &[(f64, f64, f64)]) -> String {
    rows.iter()
        .map(|(f, t, s)| format!("{f}: {t:.4}/{s:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn read_tree(root: &Path, rel: &str) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.join(rel)];
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            stack.extend(std::fs::read_dir(&p).unwrap().map(|e| e.unwrap().path()));
        } else if p.is_file() {
            out.insert(
                p.strip_prefix(root).unwrap().to_path_buf(),
                std::fs::read(&p).unwrap(),
            );
        }
    }
    out
}

fn c10(dir: &Path) -> Check {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let mut outputs = Vec::new();
    let mut slowest = Duration::ZERO;
    for name in ["a", "b"] {
        let out = dir.join(name);
        let t = Instant::now();
        let status = Command::new(env!("CARGO_BIN_EXE_srlab"))
            .arg("--config")
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .arg("all")
            .env("RUST_LOG", "warn")
            .stdout(std::process::Stdio::null())
            .status()?;
        slowest = slowest.max(t.elapsed());
        if !status.success() {
            return Ok((false, format!("run {name} exited with {status}")));
        }
        outputs.push(out);
    }
    let reports: Vec<_> = outputs.iter().map(|o| read_tree(o, "report")).collect();
    let evaluations: Vec<_> = outputs.iter().map(|o| read_tree(o, "evaluate")).collect();
    let manifests: Vec<_> = outputs
        .iter()
        .map(|o| Manifest::load(o).map(|m| m.without_timings()))
        .collect::<Result<_, _>>()?;
    let same = !reports[0].is_empty()
        && reports[0] == reports[1]
        && evaluations[0] == evaluations[1]
        && manifests[0] == manifests[1];
    Ok((
        same && slowest < Duration::from_secs(300),
        format!(
            "slowest run {:.1} s, {} report files {}, manifests {}",
            slowest.as_secs_f64(),
            reports[0].len(),
            if reports[0] == reports[1] {
                "byte-identical"
            } else {
                "differ"
            },
            if manifests[0] == manifests[1] {
                "identical"
            } else {
                "differ"
            }
        ),
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut passed = 0;
    let mut total = 0;
    let mut tally = |ok: bool| {
        total += 1;
        passed += ok as usize;
    };

    let (t, r) = timed(c1);
    tally(report(
        "1",
        "constant at init",
        Duration::from_secs(1),
        t,
        r,
    ));
    let (t, r) = timed(|| c2(&tmp.path().join("oracle")));
    tally(report(
        "2",
        "oracle equivalence",
        Duration::from_secs(120),
        t,
        r,
    ));
    let (t, r) = timed(c3);
    tally(report(
        "3",
        "gradient checks",
        Duration::from_secs(60),
        t,
        r,
    ));
    let (t, r) = timed(c4);
    tally(report(
        "4",
        "quantile-map properties",
        Duration::from_secs(10),
        t,
        r,
    ));
    let (t, r) = timed(c5);
    tally(report(
        "5",
        "specificity arithmetic",
        Duration::from_secs(60),
        t,
        r,
    ));

    let start = Instant::now();
    let pilots: Result<Vec<PilotResult>, String> = SEEDS
        .iter()
        .map(|&s| {
            pilot(s, &tmp.path().join(format!("pilot-{s}"))).map_err(|e| format!("seed {s}: {e}"))
        })
        .collect();
    let pilot_time = start.elapsed();
    println!(
        "     5 pilot runs of {PILOT_PROMPTS} prompts took {:.1} s (counted in 6, 7 and 9)",
        pilot_time.as_secs_f64()
    );
    for (s, p) in SEEDS.iter().zip(pilots.iter().flatten()) {
        println!(
            "     seed {s}: mean |dCE| uncalibrated {:.4}, calibrated {:.4}, 10% fit {:.4}, empirical {:.4}",
            p.uncalibrated, p.calibrated, p.small_fit, p.empirical
        );
        println!(
            "       top/sampling, rule predictor  {}",
            selection_note(&p.rule_selection)
        );
        println!(
            "       top/sampling, noisy oracle    {}",
            selection_note(&p.noisy_selection)
        );
    }
    let over = |f: &dyn Fn(&[PilotResult]) -> (bool, String)| -> Check {
        match &pilots {
            Ok(p) => Ok(f(p)),
            Err(e) => Err(e.clone().into()),
        }
    };

    let r = over(&|p| {
        let n = count(p, |r| r.calibrated < r.uncalibrated);
        (n >= 4, format!("calibrated < uncalibrated in {n}/5 seeds"))
    });
    tally(report(
        "6",
        "calibration direction",
        Duration::from_secs(600),
        pilot_time,
        r,
    ));
    let r = over(&|p| {
        let a = count(p, |r| r.small_fit >= r.calibrated);
        let b = count(p, |r| r.empirical <= r.calibrated);
        (
            a >= 4 && b >= 4,
            format!("10% fit >= full fit in {a}/5 seeds, empirical <= large-sample in {b}/5 seeds"),
        )
    });
    tally(report(
        "7",
        "sample-size effect",
        Duration::from_secs(900),
        pilot_time,
        r,
    ));

    let (t, r) = timed(c8);
    tally(report(
        "8",
        "score-quality link",
        Duration::from_secs(300),
        t,
        r,
    ));

    let r = over(&|p| {
        let n = count(p, |r| selection_holds(&r.noisy_selection));
        let rule = count(p, |r| selection_holds(&r.rule_selection));
        (
            n >= 4,
            format!("top-scoring <= sampling at all fractions in {n}/5 seeds (rule predictor: {rule}/5)"),
        )
    });
    tally(report(
        "9",
        "selection effect",
        Duration::from_secs(900),
        pilot_time,
        r,
    ));

    let (t, r) = timed(|| c10(&tmp.path().join("e2e")));
    tally(report(
        "10",
        "end-to-end smoke",
        Duration::from_secs(300),
        t,
        r,
    ));

    println!("{passed}/{total} criteria passed");
    if passed != total {
        std::process::exit(1);
    }
}
