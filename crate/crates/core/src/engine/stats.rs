//! Cohort summaries and the unpaired two-sample Student t-test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub sd: f64,
}

impl CohortSummary {
    pub fn new(n: usize, mean: f64, sd: f64) -> Self {
        Self { n, mean, sd }
    }

    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Precondition(format!(
                "cohort needs at least 2 values, got {}",
                values.len()
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            n: values.len(),
            mean,
            sd: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Pooled-variance t-test from summary statistics.
///
/// With zero pooled variance the statistic is undefined; equal means give
/// `p = 1` and different means give `p = 0`.
pub fn compare_summaries(a: &CohortSummary, b: &CohortSummary) -> Result<TTest> {
    if a.n < 2 || b.n < 2 {
        return Err(Error::Precondition("each cohort needs n >= 2".into()));
    }
    if a.sd < 0.0 || b.sd < 0.0 {
        return Err(Error::Precondition("standard deviations must be >= 0".into()));
    }
    let (na, nb) = (a.n as f64, b.n as f64);
    let df = na + nb - 2.0;
    let pooled = ((na - 1.0) * a.sd * a.sd + (nb - 1.0) * b.sd * b.sd) / df;
    let diff = a.mean - b.mean;
    if pooled == 0.0 {
        return Ok(if diff == 0.0 {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: diff.signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        });
    }
    let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Precondition(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, df, p })
}

/// Two-sided unpaired Student t-test with pooled variance.
pub fn compare_cohorts(a: &[f64], b: &[f64]) -> Result<TTest> {
    compare_summaries(&CohortSummary::of(a)?, &CohortSummary::of(b)?)
}

/// Two-sided permutation p-value of the difference in means.
pub fn permutation_p_value(a: &[f64], b: &[f64], shuffles: usize, seed: u64) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let observed = (mean(a) - mean(b)).abs();
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..shuffles {
        pooled.shuffle(&mut rng);
        let (x, y) = pooled.split_at(a.len());
        if (mean(x) - mean(y)).abs() >= observed - 1e-12 {
            extreme += 1;
        }
    }
    (extreme + 1) as f64 / (shuffles + 1) as f64
}
