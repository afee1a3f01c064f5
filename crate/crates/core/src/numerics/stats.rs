use super::rng::SplitMix64;
use crate::error::{invalid, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(invalid("median of empty sample"));
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(median_sorted(&s))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MedianCi {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Sample median with a percentile-bootstrap interval at `level`.
///
/// The interval is widened to contain the point estimate when the bootstrap
/// distribution is lopsided enough to exclude it.
pub fn bootstrap_median_ci(
    samples: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<MedianCi> {
    if samples.is_empty() {
        return Err(invalid("bootstrap of empty sample"));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!(
            "bootstrap needs resamples > 0 and level in (0,1), got {resamples}, {level}"
        )));
    }
    let point = median(samples)?;
    let n = samples.len();
    let mut rng = SplitMix64::derive(seed, "bootstrap-median");
    let mut stats = Vec::with_capacity(resamples);
    let mut buf = vec![0.0; n];
    for _ in 0..resamples {
        for b in buf.iter_mut() {
            *b = samples[rng.below(n)];
        }
        buf.sort_by(f64::total_cmp);
        stats.push(median_sorted(&buf));
    }
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let lo_idx = ((alpha / 2.0) * resamples as f64).floor() as usize;
    let hi_idx = (((1.0 - alpha / 2.0) * resamples as f64).ceil() as usize)
        .saturating_sub(1)
        .min(resamples - 1);
    Ok(MedianCi {
        median: point,
        lo: stats[lo_idx.min(resamples - 1)].min(point),
        hi: stats[hi_idx].max(point),
    })
}

/// Empirical distribution stored as distinct sorted values with cumulative
/// counts, so that large zero-inflated samples stay compact.
#[derive(Clone, Debug, PartialEq)]
pub struct Ecdf {
    values: Vec<f64>,
    cum: Vec<u64>,
}

impl Ecdf {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(invalid("empirical distribution of empty sample"));
        }
        if xs.iter().any(|x| x.is_nan()) {
            return Err(invalid("sample contains NaN"));
        }
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let mut values = Vec::new();
        let mut cum = Vec::new();
        for (i, x) in s.iter().enumerate() {
            if values.last() == Some(x) {
                *cum.last_mut().unwrap() = i as u64 + 1;
            } else {
                values.push(*x);
                cum.push(i as u64 + 1);
            }
        }
        Ok(Self { values, cum })
    }

    /// Builds from (value, count) pairs; values need not be sorted.
    pub fn from_counts(pairs: &[(f64, u64)]) -> Result<Self> {
        let mut p: Vec<(f64, u64)> = pairs.iter().copied().filter(|(_, c)| *c > 0).collect();
        if p.is_empty() {
            return Err(invalid("empirical distribution of empty sample"));
        }
        if p.iter().any(|(x, _)| x.is_nan()) {
            return Err(invalid("sample contains NaN"));
        }
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values = Vec::new();
        let mut cum: Vec<u64> = Vec::new();
        let mut total = 0;
        for (x, c) in p {
            total += c;
            if values.last() == Some(&x) {
                *cum.last_mut().unwrap() = total;
            } else {
                values.push(x);
                cum.push(total);
            }
        }
        Ok(Self { values, cum })
    }

    pub fn len(&self) -> u64 {
        *self.cum.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn distinct(&self) -> &[f64] {
        &self.values
    }

    /// Number of samples ≤ `values[j]`.
    pub fn cum_counts(&self) -> &[u64] {
        &self.cum
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Count of samples exactly equal to `x`.
    pub fn count_of(&self, x: f64) -> u64 {
        match self.values.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(j) => self.cum[j] - if j == 0 { 0 } else { self.cum[j - 1] },
            Err(_) => 0,
        }
    }

    /// Fraction of samples ≤ x.
    pub fn cdf(&self, x: f64) -> f64 {
        let j = self.values.partition_point(|v| *v <= x);
        if j == 0 {
            0.0
        } else {
            self.cum[j - 1] as f64 / self.len() as f64
        }
    }

    /// The i-th order statistic, 0-based.
    pub fn order_stat(&self, i: u64) -> f64 {
        let i = i.min(self.len() - 1);
        let j = self.cum.partition_point(|&c| c <= i);
        self.values[j]
    }

    /// Expands back into the sorted sample.
    pub fn to_sorted_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() as usize);
        let mut prev = 0;
        for (v, &c) in self.values.iter().zip(&self.cum) {
            out.extend(std::iter::repeat_n(*v, (c - prev) as usize));
            prev = c;
        }
        out
    }

    /// Two-sample Kolmogorov–Smirnov statistic: sup over x of |F(x) − G(x)|.
    pub fn ks(&self, other: &Ecdf) -> f64 {
        let (na, nb) = (self.len() as f64, other.len() as f64);
        let (mut i, mut j) = (0usize, 0usize);
        let (mut fa, mut fb) = (0.0f64, 0.0f64);
        let mut d = 0.0f64;
        while i < self.values.len() || j < other.values.len() {
            let x = match (self.values.get(i), other.values.get(j)) {
                (Some(a), Some(b)) => a.min(*b),
                (Some(a), None) => *a,
                (None, Some(b)) => *b,
                (None, None) => unreachable!(),
            };
            if i < self.values.len() && self.values[i] == x {
                fa = self.cum[i] as f64 / na;
                i += 1;
            }
            if j < other.values.len() && other.values[j] == x {
                fb = other.cum[j] as f64 / nb;
                j += 1;
            }
            d = d.max((fa - fb).abs());
        }
        d
    }
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(Ecdf::from_samples(a)?.ks(&Ecdf::from_samples(b)?))
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid(
            "correlation needs two equal-length samples of size >= 2",
        ));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(crate::error::Error::UndefinedMetric(
            "correlation with a constant sample".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&ranks(x), &ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degenerate_bootstrap() {
        let ci = bootstrap_median_ci(&[2.5; 40], 1000, 0.95, 1).unwrap();
        assert_eq!((ci.median, ci.lo, ci.hi), (2.5, 2.5, 2.5));
        let ci = bootstrap_median_ci(&[7.0], 1000, 0.95, 1).unwrap();
        assert_eq!((ci.median, ci.lo, ci.hi), (7.0, 7.0, 7.0));
        assert!(bootstrap_median_ci(&[], 1000, 0.95, 1).is_err());
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let xs: Vec<f64> = (0..57).map(|i| ((i * 37) % 11) as f64).collect();
        assert_eq!(
            bootstrap_median_ci(&xs, 500, 0.9, 4).unwrap(),
            bootstrap_median_ci(&xs, 500, 0.9, 4).unwrap()
        );
    }

    #[test]
    fn bootstrap_covers_true_median_of_heavy_tail() {
        // Standard Cauchy has median 0.
        let mut covered = 0;
        for trial in 0..100u64 {
            let mut rng = SplitMix64::new(1000 + trial);
            let xs: Vec<f64> = (0..151)
                .map(|_| (std::f64::consts::PI * (rng.next_f64() - 0.5)).tan())
                .collect();
            let ci = bootstrap_median_ci(&xs, 1000, 0.95, trial).unwrap();
            if ci.lo <= 0.0 && 0.0 <= ci.hi {
                covered += 1;
            }
        }
        assert!(covered >= 93, "coverage {covered}/100");
    }

    #[test]
    fn ks_examples() {
        let a = [0.3, 1.2, -4.0];
        assert_eq!(ks_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_distance(&[0.0; 3], &[1.0; 3]).unwrap(), 1.0);
        assert_eq!(
            ks_distance(&[0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).unwrap(),
            0.0
        );
        assert!(ks_distance(&[], &[1.0]).is_err());
    }

    #[test]
    fn ecdf_order_stats_and_counts() {
        let e = Ecdf::from_samples(&[3.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(e.len(), 5);
        assert_eq!(e.count_of(0.0), 3);
        assert_eq!(e.order_stat(2), 0.0);
        assert_eq!(e.order_stat(3), 1.0);
        assert_eq!(e.order_stat(4), 3.0);
        assert_eq!(e.cdf(0.5), 0.6);
        assert_eq!(e.to_sorted_vec(), vec![0.0, 0.0, 0.0, 1.0, 3.0]);
        let c = Ecdf::from_counts(&[(1.0, 1), (0.0, 3), (3.0, 1)]).unwrap();
        assert_eq!(c, e);
    }

    #[test]
    fn spearman_monotone() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [10.0, 20.0, 25.0, 100.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
        let mut pts: Vec<f64> = a.iter().chain(b).copied().collect();
        pts.sort_by(f64::total_cmp);
        pts.iter()
            .map(|&x| {
                let fa = a.iter().filter(|v| **v <= x).count() as f64 / a.len() as f64;
                let fb = b.iter().filter(|v| **v <= x).count() as f64 / b.len() as f64;
                (fa - fb).abs()
            })
            .fold(0.0, f64::max)
    }

    proptest! {
        #[test]
        fn ks_symmetric_and_matches_brute_force(
            a in prop::collection::vec(-5i32..5, 1..30),
            b in prop::collection::vec(-5i32..5, 1..30),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let d = ks_distance(&a, &b).unwrap();
            prop_assert_eq!(d, ks_distance(&b, &a).unwrap());
            prop_assert!((d - brute_ks(&a, &b)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
