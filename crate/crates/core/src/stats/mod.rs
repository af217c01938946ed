//! Multi-seed statistics: summaries with t confidence intervals, paired
//! t-tests with paired Cohen's d, one-way ANOVA, and Bonferroni correction.

pub mod special;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use special::{f_sf, t_quantile, t_two_sided_p};

/// Measurements of one configuration, one value per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub label: String,
    pub values: Vec<f64>,
}

impl SampleSet {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn require(n: usize, needed: usize) -> Result<()> {
    if n < needed {
        Err(Error::TooFewSamples { needed, got: n })
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub mean: f64,
    pub sd: f64,
    pub cv_percent: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub n: usize,
}

/// Mean, sample sd, CV% and the 95% t interval of the mean.
pub fn summarize(xs: &SampleSet) -> Result<StatsSummary> {
    let n = xs.len();
    require(n, 2)?;
    let m = xs.mean();
    if m == 0.0 {
        return Err(Error::ZeroMean);
    }
    let sd = sample_sd(&xs.values);
    let half = t_quantile(0.975, (n - 1) as f64) * sd / (n as f64).sqrt();
    Ok(StatsSummary {
        mean: m,
        sd,
        cv_percent: 100.0 * sd / m,
        ci95_low: m - half,
        ci95_high: m + half,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    /// Mean of `b_i − a_i`.
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub cohens_d: f64,
    pub n: usize,
}

/// Paired t-test of `b` against `a`, matched by index. Identical samples
/// give `t = 0, p = 1`; constant non-zero differences are rejected.
pub fn paired_t(a: &SampleSet, b: &SampleSet) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::UnequalSamples(a.len(), b.len()));
    }
    let n = a.len();
    require(n, 2)?;
    let diffs: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| y - x).collect();
    let mean_diff = mean(&diffs);
    let sd_diff = sample_sd(&diffs);
    if sd_diff == 0.0 {
        if mean_diff == 0.0 {
            return Ok(PairedTTest {
                mean_diff,
                sd_diff,
                t: 0.0,
                p: 1.0,
                cohens_d: 0.0,
                n,
            });
        }
        return Err(Error::DegenerateDifferences);
    }
    let t = mean_diff / (sd_diff / (n as f64).sqrt());
    Ok(PairedTTest {
        mean_diff,
        sd_diff,
        t,
        p: t_two_sided_p(t, (n - 1) as f64),
        cohens_d: mean_diff / sd_diff,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anova {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub ms_between: f64,
    pub ms_within: f64,
}

pub fn one_way_anova(groups: &[SampleSet]) -> Result<Anova> {
    require(groups.len(), 2)?;
    for g in groups {
        require(g.len(), 2)?;
    }
    let k = groups.len();
    let total_n: usize = groups.iter().map(SampleSet::len).sum();
    let grand = groups.iter().flat_map(|g| &g.values).sum::<f64>() / total_n as f64;
    let ss_between: f64 = groups
        .iter()
        .map(|g| g.len() as f64 * (g.mean() - grand).powi(2))
        .sum();
    let ss_within: f64 = groups
        .iter()
        .map(|g| {
            let m = g.mean();
            g.values.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        })
        .sum();
    let (df_b, df_w) = (k - 1, total_n - k);
    let ms_between = ss_between / df_b as f64;
    let ms_within = ss_within / df_w as f64;
    if ms_within == 0.0 {
        return Err(Error::DegenerateWithinVariance);
    }
    let f = ms_between / ms_within;
    Ok(Anova {
        f,
        p: f_sf(f, df_b as f64, df_w as f64),
        df_between: df_b,
        df_within: df_w,
        ms_between,
        ms_within,
    })
}

/// `p'_i = min(1, m·p_i)`.
pub fn bonferroni(pvals: &[f64]) -> Result<Vec<f64>> {
    if let Some(&bad) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidProbability(bad));
    }
    let m = pvals.len() as f64;
    Ok(pvals.iter().map(|p| (p * m).min(1.0)).collect())
}

#[cfg(test)]
mod tests;
