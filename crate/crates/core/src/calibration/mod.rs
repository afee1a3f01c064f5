//! Per-latent quantile normalization of simulated activations.
//!
//! A map sends a raw prediction `x` to `Q_true(F_pred(x))`, where `F_pred`
//! is the mid-rank empirical CDF of the predictions it was fitted on and
//! `Q_true` an empirical quantile function of the true activations. Inputs
//! whose CDF value falls inside the true sample's zero mass map to exactly 0.

mod io;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::explain::LatentTable;
use crate::numerics::Ecdf;

pub use io::{load_calibration, save_calibration};

/// How the true-sample quantile function is read off the order statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Linear interpolation between order statistics at plotting positions
    /// `(i - 0.5) / n`.
    #[default]
    Linear,
    /// The plain inverse of the empirical CDF.
    Step,
}

impl Estimator {
    fn code(self) -> u32 {
        match self {
            Estimator::Linear => 0,
            Estimator::Step => 1,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Estimator::Linear),
            1 => Some(Estimator::Step),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileMap {
    pred: Ecdf,
    truth: Ecdf,
    zero_fraction: f64,
    estimator: Estimator,
}

/// Quantile at virtual rank `r` of a sample of size `m`, i.e. at level `r / m`.
fn quantile_at_rank(e: &Ecdf, r: f64, m: f64, est: Estimator) -> f64 {
    let n = e.len();
    match est {
        Estimator::Linear => {
            let h = (r * n as f64 / m + 0.5).clamp(1.0, n as f64);
            let lo = h.floor();
            let a = e.order_stat(lo as u64 - 1);
            let t = h - lo;
            if t == 0.0 {
                a
            } else {
                a + t * (e.order_stat(lo as u64) - a)
            }
        }
        Estimator::Step => {
            let i = (r * n as f64 / m).ceil().clamp(1.0, n as f64) as u64;
            e.order_stat(i - 1)
        }
    }
}

fn quantile(e: &Ecdf, u: f64, est: Estimator) -> f64 {
    quantile_at_rank(e, u, 1.0, est)
}

/// Mid-rank of `x` in `e`: `#{< x} + #{= x} / 2`.
fn mid_rank(e: &Ecdf, x: f64) -> f64 {
    let j = e.distinct().partition_point(|v| *v < x);
    let below = if j == 0 { 0 } else { e.cum_counts()[j - 1] };
    below as f64 + e.count_of(x) as f64 * 0.5
}

impl QuantileMap {
    pub fn fit(predicted: &[f64], truth: &[f64], estimator: Estimator) -> Result<Self> {
        if predicted.is_empty() || truth.is_empty() {
            return Err(invalid(
                "quantile map needs non-empty predicted and true samples",
            ));
        }
        Self::from_ecdfs(
            Ecdf::from_samples(predicted)?,
            Ecdf::from_samples(truth)?,
            estimator,
        )
    }

    pub fn from_ecdfs(pred: Ecdf, truth: Ecdf, estimator: Estimator) -> Result<Self> {
        if truth.min() < 0.0 {
            return Err(invalid("true activations must be non-negative"));
        }
        if !pred.min().is_finite() || !pred.max().is_finite() || !truth.max().is_finite() {
            return Err(invalid("samples must be finite"));
        }
        let zero_fraction = truth.count_of(0.0) as f64 / truth.len() as f64;
        Ok(Self {
            pred,
            truth,
            zero_fraction,
            estimator,
        })
    }

    /// Maps everything to zero.
    pub fn constant_zero() -> Self {
        let z = Ecdf::from_counts(&[(0.0, 1)]).expect("non-empty");
        Self {
            pred: z.clone(),
            truth: z,
            zero_fraction: 1.0,
            estimator: Estimator::Linear,
        }
    }

    pub fn zero_fraction(&self) -> f64 {
        self.zero_fraction
    }

    pub fn n_pred(&self) -> u64 {
        self.pred.len()
    }

    pub fn n_true(&self) -> u64 {
        self.truth.len()
    }

    pub fn estimator(&self) -> Estimator {
        self.estimator
    }

    pub fn predicted(&self) -> &Ecdf {
        &self.pred
    }

    pub fn truth(&self) -> &Ecdf {
        &self.truth
    }

    pub fn apply(&self, x: f64) -> f64 {
        if x.is_nan() {
            return 0.0;
        }
        let r = mid_rank(&self.pred, x);
        let n = self.pred.len() as f64;
        if self.zero_fraction > 0.0 && (x <= 0.0 || r / n <= self.zero_fraction) {
            return 0.0;
        }
        quantile_at_rank(&self.truth, r, n, self.estimator)
    }

    /// Coarsens both samples to at most `resolution` steps each. Sample
    /// sizes, the extremes and the zero mass are kept exactly.
    pub fn compressed(&self, resolution: usize) -> Self {
        Self {
            pred: coarsen(&self.pred, resolution),
            truth: coarsen(&self.truth, resolution),
            ..self.clone()
        }
    }
}

fn coarsen(e: &Ecdf, resolution: usize) -> Ecdf {
    let values = e.distinct();
    let cum = e.cum_counts();
    if values.len() <= resolution.max(2) {
        return e.clone();
    }
    let n = e.len() as f64;
    let step = n / resolution.max(1) as f64;
    let mut pairs = Vec::with_capacity(resolution + 2);
    let mut prev = 0u64;
    let mut next_edge = step;
    for j in 0..values.len() {
        let keep =
            j == 0 || j + 1 == values.len() || values[j] == 0.0 || cum[j] as f64 >= next_edge;
        if keep {
            pairs.push((values[j], cum[j] - prev));
            prev = cum[j];
            while next_edge <= cum[j] as f64 {
                next_edge += step;
            }
        }
    }
    Ecdf::from_counts(&pairs).expect("non-empty")
}

/// Diagnostics for a map on predictions it was not fitted on.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    /// KS distance between the mapped predictions and the true sample.
    pub ks: f64,
    /// `(level, mapped quantile, true quantile)` at levels 0.1 through 0.9.
    pub deciles: Vec<(f64, f64, f64)>,
}

pub fn calibration_report(map: &QuantileMap, held_out: &[f64]) -> Result<CalibrationReport> {
    let mapped: Vec<f64> = held_out.iter().map(|&x| map.apply(x)).collect();
    let m = Ecdf::from_samples(&mapped)?;
    let deciles = (1..10)
        .map(|d| {
            let u = d as f64 / 10.0;
            (
                u,
                quantile(&m, u, Estimator::Linear),
                quantile(&map.truth, u, Estimator::Linear),
            )
        })
        .collect();
    Ok(CalibrationReport {
        ks: m.ks(&map.truth),
        deciles,
    })
}

pub const REPORT_HEADER: &str = "latent,ks,level,mapped_quantile,true_quantile";

pub fn report_csv(reports: &[(u32, CalibrationReport)]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for (latent, r) in reports {
        for (u, a, b) in &r.deciles {
            let _ = writeln!(s, "{latent},{:.6},{u:.1},{a:.6},{b:.6}", r.ks);
        }
    }
    s
}

/// Fitted maps for the live latents of one coder.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub n_latents: usize,
    pub maps: BTreeMap<u32, QuantileMap>,
}

impl CalibrationSet {
    /// Fits one map per latent in `predicted`, against that latent's column
    /// of `truth` (zeros included). Latents never active in `truth` get the
    /// constant-zero map.
    pub fn fit(
        predicted: &BTreeMap<u32, Vec<f64>>,
        truth: &LatentTable,
        estimator: Estimator,
    ) -> Result<Self> {
        let samples = true_samples(truth)?;
        let mut maps = BTreeMap::new();
        for (&latent, preds) in predicted {
            let t = samples
                .get(latent as usize)
                .ok_or_else(|| invalid(format!("latent {latent} outside the table")))?;
            let map = if t.count_of(0.0) == t.len() || preds.is_empty() {
                QuantileMap::constant_zero()
            } else {
                QuantileMap::from_ecdfs(Ecdf::from_samples(preds)?, t.clone(), estimator)?
            };
            maps.insert(latent, map);
        }
        Ok(Self {
            n_latents: truth.n_latents,
            maps,
        })
    }

    /// Identity for latents without a map.
    pub fn apply(&self, latent: u32, x: f64) -> f64 {
        self.maps.get(&latent).map_or(x, |m| m.apply(x))
    }

    pub fn compressed(&self, resolution: usize) -> Self {
        Self {
            n_latents: self.n_latents,
            maps: self
                .maps
                .iter()
                .map(|(&k, m)| (k, m.compressed(resolution)))
                .collect(),
        }
    }
}

/// Per-latent true-activation distributions over every row of the table.
pub fn true_samples(table: &LatentTable) -> Result<Vec<Ecdf>> {
    if table.is_empty() {
        return Err(invalid("activation table is empty"));
    }
    let n = table.len() as u64;
    table
        .by_latent()
        .into_iter()
        .map(|acts| {
            let mut pairs: Vec<(f64, u64)> = acts.iter().map(|&(_, v)| (v as f64, 1)).collect();
            pairs.push((0.0, n - acts.len() as u64));
            Ecdf::from_counts(&pairs)
        })
        .collect()
}
