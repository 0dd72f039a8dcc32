//! Random hyperparameter search.

use rand::seq::IndexedRandom;
use rand::Rng as _;

use super::fit::{Augment, Hparams};
use crate::error::{invalid_config, Result};
use crate::par;
use crate::seed::{self, tag};

/// Search distributions: discrete sets and log10-uniform ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub dropout: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub lr_log10: (f64, f64),
    pub weight_decay_log10: (f64, f64),
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            dropout: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            batch_sizes: vec![16, 32, 64, 128, 256, 512, 1024],
            lr_log10: (-7.0, -3.0),
            weight_decay_log10: (-5.0, -0.5),
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-4,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.dropout.is_empty() || self.batch_sizes.is_empty() {
            return Err(invalid_config(
                "search space needs at least one dropout and batch size",
            ));
        }
        if self.lr_log10.0 > self.lr_log10.1
            || self.weight_decay_log10.0 > self.weight_decay_log10.1
        {
            return Err(invalid_config("log-uniform ranges must have low <= high"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut seed::Rng) -> Hparams {
        let u = |rng: &mut seed::Rng, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        };
        let dropout = *self.dropout.choose(rng).expect("validated non-empty");
        let batch_size = *self.batch_sizes.choose(rng).expect("validated non-empty");
        let lr = 10f64.powf(u(rng, self.lr_log10));
        let weight_decay = 10f64.powf(u(rng, self.weight_decay_log10));
        Hparams {
            lr,
            weight_decay,
            batch_size,
            dropout,
            max_epochs: self.max_epochs,
            patience: self.patience,
            min_delta: self.min_delta,
            augment: Augment::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub hparams: Hparams,
    pub val_bacc: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub trials: Vec<Trial>,
    pub best: usize,
}

impl SearchResult {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }
}

/// Draws `n_trials` configurations up front, then scores each with
/// `objective(hparams, trial_seed)`, which returns validation balanced accuracy.
pub fn random_search<F>(
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
    objective: F,
) -> Result<SearchResult>
where
    F: Fn(&Hparams, u64) -> Result<f64> + Sync,
{
    space.validate()?;
    if n_trials == 0 {
        return Err(invalid_config("n_trials must be >= 1"));
    }
    let mut rng = seed::rng(seed::derive(seed, &[tag("search")]));
    let draws: Vec<Hparams> = (0..n_trials).map(|_| space.sample(&mut rng)).collect();
    let scores = par::map_range(draws.len(), |i| {
        objective(&draws[i], seed::derive(seed, &[tag("trial"), i as u64]))
    });
    let mut trials = Vec::with_capacity(n_trials);
    for (index, (hparams, s)) in draws.into_iter().zip(scores).enumerate() {
        trials.push(Trial {
            index,
            hparams,
            val_bacc: s?,
        });
    }
    let best = (0..trials.len())
        .max_by(|&a, &b| {
            trials[a]
                .val_bacc
                .total_cmp(&trials[b].val_bacc)
                .then(b.cmp(&a))
        })
        .expect("non-empty");
    Ok(SearchResult { trials, best })
}
