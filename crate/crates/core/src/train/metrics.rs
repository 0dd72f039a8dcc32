//! Evaluation statistics.

use std::fmt;

use crate::error::{Error, Result};

/// Mean of per-class recalls for binary labels.
pub fn balanced_accuracy(preds: &[bool], labels: &[bool]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(crate::error::invalid_input(
            "predictions and labels differ in length",
        ));
    }
    let mut hit = [0usize; 2];
    let mut tot = [0usize; 2];
    for (&p, &l) in preds.iter().zip(labels) {
        let c = usize::from(l);
        tot[c] += 1;
        if p == l {
            hit[c] += 1;
        }
    }
    if tot[0] == 0 || tot[1] == 0 {
        return Err(Error::UndefinedMetric(
            "balanced accuracy needs both classes in the labels".into(),
        ));
    }
    Ok(0.5 * (hit[0] as f64 / tot[0] as f64 + hit[1] as f64 / tot[1] as f64))
}

/// Fraction of pairs with `a > b`, ties counting one half.
pub fn probability_of_improvement(a: &[f64], b: &[f64]) -> f64 {
    assert!(
        !a.is_empty() && !b.is_empty(),
        "probability of improvement needs samples on both sides"
    );
    // Integer half-counts keep the complement identity exact.
    let mut halves = 0u64;
    for x in a {
        for y in b {
            halves += match x.partial_cmp(y) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    halves as f64 / (2 * a.len() * b.len()) as f64
}

pub const MIN_RUNS_FOR_STD: usize = 3;

/// Mean and sample standard deviation over runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunStats {
    pub mean: f64,
    /// `None` below three runs.
    pub std: Option<f64>,
    pub n: usize,
}

pub fn report_stats(runs: &[f64]) -> RunStats {
    let n = runs.len();
    let mean = if n == 0 {
        f64::NAN
    } else {
        runs.iter().sum::<f64>() / n as f64
    };
    let std = (n >= MIN_RUNS_FOR_STD)
        .then(|| (runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    RunStats { mean, std, n }
}

impl fmt::Display for RunStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = f.precision().unwrap_or(2);
        match self.std {
            Some(s) => write!(f, "{:.p$} ± {:.p$}", self.mean, s),
            None => write!(f, "{:.p$}", self.mean),
        }
    }
}
