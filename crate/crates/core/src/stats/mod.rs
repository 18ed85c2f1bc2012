//! Order-independent Monte Carlo accumulation.
//!
//! Every sum is kept exactly (see [`exact`]), so merging accumulators is
//! associative and commutative bit-for-bit: replica scheduling and worker
//! count never change a reported statistic.

pub mod exact;
pub mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use exact::{two_prod, ExactSum};

pub use report::{write_csv, ExperimentReport, Verdict};

/// A statistic with its standard error, or an exact value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// `None` when undefined (fewer than two samples) or when `exact`.
    pub se: Option<f64>,
    pub exact: bool,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, se: None, exact: true }
    }

    pub fn sampled(value: f64, se: Option<f64>) -> Self {
        Estimate { value, se, exact: false }
    }

    /// Standard error, zero for exact values and NaN when undefined.
    pub fn se_or_zero(&self) -> f64 {
        match (self.exact, self.se) {
            (true, _) => 0.0,
            (false, Some(se)) => se,
            (false, None) => f64::NAN,
        }
    }
}

/// Per-entry count, exact sums and sums of squares, plus optional exact
/// sums of pairwise products for covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentAccumulator {
    count: u64,
    sum: Vec<ExactSum>,
    sum_sq: Vec<ExactSum>,
    pair_sum: Option<Vec<ExactSum>>,
    pair_width: usize,
}

impl MomentAccumulator {
    pub fn new(width: usize) -> Self {
        MomentAccumulator {
            count: 0,
            sum: vec![ExactSum::new(); width],
            sum_sq: vec![ExactSum::new(); width],
            pair_sum: None,
            pair_width: 0,
        }
    }

    /// Also tracks Σ x_i x_j for i < j.
    pub fn with_pairs(width: usize) -> Self {
        Self::with_pairs_prefix(width, width)
    }

    /// Tracks pair products among the first `prefix` entries only.
    pub fn with_pairs_prefix(width: usize, prefix: usize) -> Self {
        assert!(prefix <= width);
        let mut acc = Self::new(width);
        acc.pair_sum = Some(vec![ExactSum::new(); prefix * prefix.saturating_sub(1) / 2]);
        acc.pair_width = prefix;
        acc
    }

    pub fn width(&self) -> usize {
        self.sum.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Adds one replica's sample; non-finite samples are rejected.
    pub fn accumulate(&mut self, sample: &[f64], replica: u64) -> Result<()> {
        if sample.len() != self.width() {
            return Err(Error::Dimension { expected: self.width(), got: sample.len() });
        }
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: -1, replica: Some(replica) });
        }
        self.count += 1;
        for (i, &x) in sample.iter().enumerate() {
            self.sum[i].add(x);
            self.sum_sq[i].add_product(x, x);
        }
        if let Some(pairs) = &mut self.pair_sum {
            let mut k = 0;
            for i in 0..self.pair_width {
                for j in i + 1..self.pair_width {
                    pairs[k].add_product(sample[i], sample[j]);
                    k += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        assert_eq!(self.width(), other.width(), "merging accumulators of different width");
        self.count += other.count;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            a.merge(b);
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            a.merge(b);
        }
        match (&mut self.pair_sum, &other.pair_sum) {
            (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y)),
            (None, None) => {}
            _ => panic!("merging accumulators with and without pair sums"),
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.sum[i].value() / self.count as f64
    }

    /// Exact centered sum Σ(x−m)(y−m') rounded once.
    fn centered(&self, sxy: &ExactSum, sx: &ExactSum, sy: &ExactSum, mx: f64, my: f64) -> f64 {
        let n = self.count as f64;
        let mut c = sxy.clone();
        c.add_scaled(sx, -my);
        c.add_scaled(sy, -mx);
        let (p, e) = two_prod(mx, my);
        c.add_product(p, n);
        c.add_product(e, n);
        c.value()
    }

    /// Unbiased sample variance; `None` with fewer than two samples.
    pub fn variance(&self, i: usize) -> Option<f64> {
        if self.count < 2 {
            return None;
        }
        let m = self.mean(i);
        let ss = self.centered(&self.sum_sq[i], &self.sum[i], &self.sum[i], m, m);
        Some(ss.max(0.0) / (self.count - 1) as f64)
    }

    pub fn std_error(&self, i: usize) -> Option<f64> {
        self.variance(i).map(|v| (v / self.count as f64).sqrt())
    }

    pub fn estimate(&self, i: usize) -> Estimate {
        Estimate::sampled(self.mean(i), self.std_error(i))
    }

    /// Unbiased sample covariance between entries `i` and `j`; `None` when
    /// the pair is not tracked.
    pub fn covariance(&self, i: usize, j: usize) -> Option<f64> {
        if i == j {
            return self.variance(i);
        }
        if self.count < 2 {
            return None;
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let pairs = self.pair_sum.as_ref()?;
        let w = self.pair_width;
        if b >= w {
            return None;
        }
        let k = a * w - a * (a + 1) / 2 + (b - a - 1);
        let c = self.centered(&pairs[k], &self.sum[a], &self.sum[b], self.mean(a), self.mean(b));
        Some(c / (self.count - 1) as f64)
    }
}

/// `|estimate − target|` in standard errors. An SE below the roundoff of the
/// values marks a deterministic estimate, which must match to `1e-12` relative.
pub fn z_score(e: Estimate, target: f64) -> f64 {
    let diff = (e.value - target).abs();
    let scale = e.value.abs().max(target.abs());
    match e.se {
        Some(se) if se > 1e-12 * scale => diff / se,
        _ if diff <= 1e-12 * scale.max(1.0) => 0.0,
        _ => f64::INFINITY,
    }
}

/// Maximum of per-entry estimates over a set of entries.
///
/// The maximum of noisy estimates is biased upward; bound checks built on
/// it add 3 SE of slack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupEstimate {
    pub value: f64,
    pub se: Option<f64>,
    pub argmax: usize,
}

pub fn sup_over_observation(acc: &MomentAccumulator, entries: &[usize]) -> Result<SupEstimate> {
    sup_of(entries.iter().map(|&i| (i, acc.estimate(i))))
}

/// Maximum over labelled estimates (first label wins ties).
pub fn sup_of(items: impl IntoIterator<Item = (usize, Estimate)>) -> Result<SupEstimate> {
    let mut best: Option<SupEstimate> = None;
    for (label, e) in items {
        if best.is_none_or(|b| e.value > b.value) {
            best = Some(SupEstimate { value: e.value, se: e.se, argmax: label });
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("supremum over an empty set".into()))
}

/// Runs `replicas` independent replicas and accumulates their samples.
///
/// `sample` fills a buffer of length `width` for the given replica id.
/// Scheduling is left to rayon; exact accumulation makes the result
/// independent of it.
pub fn run_replicas<F>(replicas: u64, width: usize, pairs: bool, sample: F) -> Result<MomentAccumulator>
where
    F: Fn(u64, &mut [f64]) -> Result<()> + Sync,
{
    run_replicas_with(replicas, width, if pairs { width } else { 0 }, sample)
}

/// As [`run_replicas`], tracking covariances among the first `pair_prefix` entries.
pub fn run_replicas_with<F>(replicas: u64, width: usize, pair_prefix: usize, sample: F) -> Result<MomentAccumulator>
where
    F: Fn(u64, &mut [f64]) -> Result<()> + Sync,
{
    let fresh = || {
        if pair_prefix > 0 {
            MomentAccumulator::with_pairs_prefix(width, pair_prefix)
        } else {
            MomentAccumulator::new(width)
        }
    };
    (0..replicas)
        .into_par_iter()
        .try_fold(
            || (fresh(), vec![0.0; width]),
            |(mut acc, mut buf), r| {
                sample(r, &mut buf)?;
                acc.accumulate(&buf, r)?;
                Ok::<_, Error>((acc, buf))
            },
        )
        .map(|res| res.map(|(acc, _)| acc))
        .try_reduce(fresh, |mut a, b| {
            a.merge(&b);
            Ok(a)
        })
}
