//! Mini-batch training with early stopping.

use rand::seq::SliceRandom;

use super::metrics::balanced_accuracy;
use crate::data::{
    cube_mask, mask_flat, mixup, slice_dropout, GridLayout, Representation, SampleSet,
};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::nn::{AdamW, Family, InputShape, Model, ModelSpec};
use crate::seed::{self, tag};

/// Training-split augmentations; `None` disables each.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Augment {
    pub mixup_alpha: Option<f64>,
    pub slice_dropout: Option<f64>,
    pub cube_mask: Option<f64>,
}

impl Augment {
    pub fn is_spatial(&self) -> bool {
        self.slice_dropout.is_some() || self.cube_mask.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hparams {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Minimum validation improvement, as a fraction (0.0001 = 0.01%).
    pub min_delta: f64,
    pub augment: Augment,
}

impl Default for Hparams {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 0.0,
            batch_size: 128,
            dropout: 0.0,
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-4,
            augment: Augment::default(),
        }
    }
}

impl Hparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid_config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(invalid_config("batch size and max epochs must be >= 1"));
        }
        if self.weight_decay < 0.0 || self.min_delta < 0.0 {
            return Err(invalid_config(
                "weight decay and min delta must be non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bacc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    NonFinite(String),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stop: StopReason,
}

/// Converts flat samples into the model's input layout.
pub fn model_inputs(
    spec: &ModelSpec,
    grid: Option<&GridLayout>,
    flat: &[f64],
    dim: usize,
) -> Result<Vec<f64>> {
    match &spec.input {
        InputShape::Flat { dim: d } => {
            if *d != dim {
                return Err(invalid_input(format!(
                    "model expects {d} features, samples have {dim}"
                )));
            }
            Ok(flat.to_vec())
        }
        InputShape::Graph { .. } => {
            if spec.input.sample_len() != dim {
                return Err(invalid_input(format!(
                    "graph model expects {} values, samples have {dim}",
                    spec.input.sample_len()
                )));
            }
            Ok(flat.to_vec())
        }
        InputShape::Dense { dims } => {
            let g =
                grid.ok_or_else(|| invalid_input("dense models need source samples with a grid"))?;
            if g.dims != *dims {
                return Err(invalid_input(format!(
                    "model box {dims:?} differs from sample grid {:?}",
                    g.dims
                )));
            }
            let n = flat.len() / dim;
            let mut out = vec![0.0; n * g.dense_len()];
            for (s, o) in flat
                .chunks_exact(dim)
                .zip(out.chunks_exact_mut(g.dense_len()))
            {
                g.inscribe_into(s, o);
            }
            Ok(out)
        }
    }
}

/// Balanced accuracy of `model` on `set`, optionally zeroing voxels first.
pub fn evaluate(model: &Model, set: &SampleSet, masked_voxels: Option<&[usize]>) -> Result<f64> {
    let probs = predict(model, set, masked_voxels)?;
    let preds: Vec<bool> = probs.iter().map(|&p| p > 0.5).collect();
    let labels: Vec<bool> = set.labels.iter().map(|&y| y > 0.5).collect();
    balanced_accuracy(&preds, &labels)
}

const EVAL_BLOCK: usize = 1024;

pub fn predict(
    model: &Model,
    set: &SampleSet,
    masked_voxels: Option<&[usize]>,
) -> Result<Vec<f64>> {
    if masked_voxels.is_some() && set.representation != Representation::Source {
        return Err(invalid_input("voxel masks apply to source samples only"));
    }
    let slots = model.subject_slots(&set.subjects);
    let mut out = Vec::with_capacity(set.len());
    for lo in (0..set.len()).step_by(EVAL_BLOCK) {
        let hi = (lo + EVAL_BLOCK).min(set.len());
        let mut flat = set.features[lo * set.dim..hi * set.dim].to_vec();
        if let Some(v) = masked_voxels {
            for s in flat.chunks_exact_mut(set.dim) {
                mask_flat(s, v);
            }
        }
        let x = model_inputs(&model.spec, set.grid.as_deref(), &flat, set.dim)?;
        let subj: Vec<Option<usize>> = set.subject_index[lo..hi]
            .iter()
            .map(|&i| slots[i])
            .collect();
        out.extend(model.predict_proba(&x, &subj)?);
    }
    Ok(out)
}

fn augment_batch(
    aug: &Augment,
    grid: Option<&GridLayout>,
    flat: &mut [f64],
    y: &mut [f64],
    dim: usize,
    rng: &mut seed::Rng,
) -> Result<()> {
    if let Some(alpha) = aug.mixup_alpha {
        if y.len() >= 2 {
            mixup(flat, y, dim, alpha, rng)?;
        }
    }
    if aug.is_spatial() {
        let g = grid
            .ok_or_else(|| invalid_config("slice dropout and cube masking need source samples"))?;
        let mut dense = vec![0.0; y.len() * g.dense_len()];
        for (s, o) in flat
            .chunks_exact(dim)
            .zip(dense.chunks_exact_mut(g.dense_len()))
        {
            g.inscribe_into(s, o);
        }
        if let Some(p) = aug.slice_dropout {
            slice_dropout(&mut dense, g.dims, p, rng)?;
        }
        if let Some(p) = aug.cube_mask {
            cube_mask(&mut dense, g.dims, p, rng)?;
        }
        for (s, d) in flat
            .chunks_exact_mut(dim)
            .zip(dense.chunks_exact(g.dense_len()))
        {
            s.copy_from_slice(&g.gather(d));
        }
    }
    Ok(())
}

/// Trains a freshly initialised model on `train`, early-stopping on `val`.
pub fn train_model(
    spec: ModelSpec,
    train: &SampleSet,
    val: &SampleSet,
    hp: &Hparams,
    seed: u64,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if train.is_empty() {
        return Err(invalid_input("empty training set"));
    }
    let spec = ModelSpec {
        dropout: hp.dropout,
        ..spec
    };
    let mut model = Model::build(spec, seed::derive(seed, &[tag("init")]))?;
    let slots = model.subject_slots(&train.subjects);
    let subj_of = |i: usize| {
        if model.spec.family == Family::Logistic {
            None
        } else {
            slots[train.subject_index[i]]
        }
    };
    if model.spec.family != Family::Logistic {
        if let Some(i) = (0..train.len()).find(|&i| subj_of(i).is_none()) {
            return Err(invalid_input(format!(
                "training subject {} has no embedding",
                train.subject_name(i)
            )));
        }
    }
    let subjects: Vec<Option<usize>> = (0..train.len()).map(subj_of).collect();
    let opt = AdamW::new(hp.lr, hp.weight_decay);
    let grid = train.grid.as_deref();
    let dim = train.dim;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, model.params.values.clone());
    let mut bar = f64::NEG_INFINITY;
    let mut wait = 0;
    let mut stop = StopReason::MaxEpochs;
    'epochs: for epoch in 1..=hp.max_epochs {
        order.shuffle(&mut seed::rng(seed::derive(
            seed,
            &[tag("shuffle"), epoch as u64],
        )));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(hp.batch_size).enumerate() {
            let mut flat = Vec::with_capacity(idx.len() * dim);
            for &i in idx {
                flat.extend_from_slice(train.sample(i));
            }
            let mut y: Vec<f64> = idx.iter().map(|&i| train.labels[i]).collect();
            let s: Vec<Option<usize>> = idx.iter().map(|&i| subjects[i]).collect();
            let bs = seed::derive(seed, &[tag("batch"), epoch as u64, b as u64]);
            augment_batch(
                &hp.augment,
                grid,
                &mut flat,
                &mut y,
                dim,
                &mut seed::rng(bs),
            )?;
            let x = model_inputs(&model.spec, grid, &flat, dim)?;
            match model.loss_and_grad(&x, &y, &s, seed::derive(bs, &[tag("dropout")])) {
                Ok(l) => loss_sum += l * idx.len() as f64,
                Err(Error::NonFinite { layer }) => {
                    stop = StopReason::NonFinite(layer);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            model.params.adamw_step(&opt);
        }
        let val_bacc = evaluate(&model, val, None)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_bacc,
        });
        log::debug!(
            "epoch {epoch}: loss {:.4} val {:.4}",
            loss_sum / train.len() as f64,
            val_bacc
        );
        if val_bacc > best.1 {
            best = (epoch, val_bacc, model.params.values.clone());
        }
        if val_bacc > bar + hp.min_delta {
            bar = val_bacc;
            wait = 0;
        } else {
            wait += 1;
            if wait >= hp.patience {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
    }
    model.params.values = best.2;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.0,
        best_val: best.1,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        assemble, AssembleOptions, SessionData, SessionKey, Split, SplitKind, SplitPlan, SplitSets,
    };
    use crate::sim::build_template_anatomy;
    use nalgebra::DMatrix;
    use rand::Rng as _;
    use std::sync::Arc;

    /// Two well separated Gaussian blobs along a random direction.
    fn separable(dim: usize, n: usize, seed: u64) -> SessionData {
        let mut r = seed::rng(seed);
        let labels: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let features = DMatrix::from_fn(dim, n, |k, t| {
            let shift = if k == 0 {
                3.0 * (2.0 * f64::from(labels[t]) - 1.0)
            } else {
                0.0
            };
            shift + r.random_range(-1.0..1.0)
        });
        SessionData {
            key: SessionKey::new("toy", "a", &format!("{seed}")),
            features,
            labels,
        }
    }

    fn toy_sets(dim: usize) -> SplitSets {
        let data = vec![
            separable(dim, 300, 1),
            separable(dim, 100, 2),
            separable(dim, 100, 3),
        ];
        let plan = SplitPlan::new(SplitKind::BySession)
            .assign(data[0].key.clone(), Split::Train)
            .assign(data[1].key.clone(), Split::Val)
            .assign(data[2].key.clone(), Split::Test);
        assemble(&plan, &data, &AssembleOptions::sensor()).unwrap()
    }

    #[test]
    fn logistic_separates_toy_data() {
        let sets = toy_sets(5);
        let spec = ModelSpec::new(Family::Logistic, InputShape::Flat { dim: 5 }, vec![]);
        let hp = Hparams {
            lr: 0.05,
            batch_size: 32,
            max_epochs: 100,
            ..Hparams::default()
        };
        let out = train_model(spec, &sets.train, &sets.val, &hp, 0).unwrap();
        assert!(evaluate(&out.model, &sets.train, None).unwrap() >= 0.99);
    }

    #[test]
    fn frozen_validation_stops_after_patience() {
        let sets = toy_sets(4);
        let spec = ModelSpec::new(
            Family::Mlp,
            InputShape::Flat { dim: 4 },
            sets.train.subjects.clone(),
        )
        .with_width(3);
        let hp = Hparams {
            lr: 1e-300,
            patience: 10,
            ..Hparams::default()
        };
        let out = train_model(spec, &sets.train, &sets.val, &hp, 1).unwrap();
        assert_eq!(out.stop, StopReason::EarlyStopped);
        assert_eq!(out.best_epoch, 1);
        assert!(out.history.len() <= out.best_epoch + 11);
    }

    #[test]
    fn returned_checkpoint_is_validation_argmax() {
        let sets = toy_sets(6);
        let spec = ModelSpec::new(
            Family::Mlp,
            InputShape::Flat { dim: 6 },
            sets.train.subjects.clone(),
        )
        .with_width(4);
        let hp = Hparams {
            lr: 3e-3,
            batch_size: 16,
            max_epochs: 12,
            dropout: 0.3,
            ..Hparams::default()
        };
        let out = train_model(spec.clone(), &sets.train, &sets.val, &hp, 5).unwrap();
        let best = out
            .history
            .iter()
            .map(|h| h.val_bacc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_val, best);
        assert_eq!(out.history[out.best_epoch - 1].val_bacc, best);
        assert_eq!(evaluate(&out.model, &sets.val, None).unwrap(), best);
        let again = train_model(spec, &sets.train, &sets.val, &hp, 5).unwrap();
        assert_eq!(again.model.params.values, out.model.params.values);
    }

    #[test]
    fn spatial_augmentation_needs_a_grid() {
        let sets = toy_sets(3);
        let spec = ModelSpec::new(Family::Logistic, InputShape::Flat { dim: 3 }, vec![]);
        let hp = Hparams {
            max_epochs: 1,
            augment: Augment {
                slice_dropout: Some(0.1),
                ..Augment::default()
            },
            ..Hparams::default()
        };
        assert!(train_model(spec, &sets.train, &sets.val, &hp, 0).is_err());
    }

    #[test]
    fn cnn_trains_on_source_samples() {
        let anat = build_template_anatomy(25.0, 75.0, 2).unwrap();
        let grid = Arc::new(GridLayout::from_anatomy(&anat));
        let dim = 3 * grid.n_voxels();
        let data: Vec<SessionData> = (0..3).map(|i| separable(dim, 60, 10 + i)).collect();
        let plan = SplitPlan::new(SplitKind::BySession)
            .assign(data[0].key.clone(), Split::Train)
            .assign(data[1].key.clone(), Split::Val)
            .assign(data[2].key.clone(), Split::Test);
        let sets = assemble(&plan, &data, &AssembleOptions::source(grid.clone())).unwrap();
        let spec = ModelSpec::new(
            Family::CnnSe,
            InputShape::Dense { dims: grid.dims },
            sets.train.subjects.clone(),
        )
        .with_width(4);
        let hp = Hparams {
            lr: 1e-2,
            batch_size: 16,
            max_epochs: 3,
            augment: Augment {
                mixup_alpha: Some(1.0),
                slice_dropout: Some(0.1),
                cube_mask: Some(0.5),
            },
            ..Hparams::default()
        };
        let out = train_model(spec, &sets.train, &sets.val, &hp, 0).unwrap();
        assert_eq!(out.history.len(), 3);
        assert!(out.history.iter().all(|h| h.train_loss.is_finite()));
        let voxels: Vec<usize> = (0..grid.n_voxels()).collect();
        let masked = predict(&out.model, &sets.test, Some(&voxels)).unwrap();
        // Fully masked inputs from one subject are indistinguishable.
        assert!(masked.windows(2).all(|w| w[0] == w[1]));
    }
}
