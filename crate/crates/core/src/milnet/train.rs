//! Mini-batch training with early stopping on validation explained variance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::model::{backward, forward, loss, loss_grad, predict, Mode};
use super::params::{init_params, Gradients, ModelParams, ModelShape};
use super::HyperParams;
use crate::bagio::BagSource;
use crate::concord::pearson;
use crate::error::{Error, Result};

/// `1 - Var(labels - preds) / Var(labels)`, population variances.
pub fn explained_variance(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::invalid("explained variance needs equal, non-empty inputs"));
    }
    let var = |v: &mut dyn Iterator<Item = f64>| {
        let xs: Vec<f64> = v.collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64
    };
    let var_y = var(&mut labels.iter().copied());
    if var_y == 0.0 {
        return Err(Error::undefined("labels have zero variance"));
    }
    let var_err = var(&mut labels.iter().zip(preds).map(|(y, p)| y - p));
    Ok(1.0 - var_err / var_y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean train-mode MSE over the epoch, fraction scale.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_explained_variance: f64,
    /// `None` when the validation predictions are constant.
    pub val_pearson: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    /// Eval-mode validation predictions of the kept parameters, in `val_idx` order.
    pub val_predictions: Vec<f64>,
}

fn mix(seed: u64, epoch: u64, position: u64) -> u64 {
    // splitmix64 finalizer over the packed triple
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ position.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_inputs<S: BagSource + ?Sized>(
    bags: &S,
    labels: &[f64],
    train_idx: &[usize],
    val_idx: &[usize],
    hyper: &HyperParams,
) -> Result<()> {
    hyper.validate()?;
    if labels.len() != bags.len() {
        return Err(Error::invalid(format!("{} labels for {} bags", labels.len(), bags.len())));
    }
    if train_idx.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if val_idx.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let mut seen = vec![0u8; bags.len()];
    for (set, idx) in [(1u8, train_idx), (2u8, val_idx)] {
        for &i in idx {
            if i >= bags.len() {
                return Err(Error::OutOfRange(format!("bag index {i} of {}", bags.len())));
            }
            if seen[i] != 0 {
                return Err(Error::invalid(format!("bag index {i} appears twice or in both sets")));
            }
            seen[i] = set;
        }
    }
    if let Some(y) = labels.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(Error::OutOfRange(format!("label {y} outside [0, 1]")));
    }
    let first = labels[val_idx[0]];
    if val_idx.iter().all(|&i| labels[i] == first) {
        return Err(Error::undefined("validation labels are all equal"));
    }
    Ok(())
}

/// Eval-mode predictions for `indices`, in order.
pub(crate) fn predict_many<S: BagSource + ?Sized>(
    params: &ModelParams,
    bags: &S,
    indices: &[usize],
) -> Result<Vec<f64>> {
    indices.par_iter().map(|&i| predict(params, &*bags.bag(i)?)).collect()
}

pub fn train<S: BagSource + ?Sized>(
    bags: &S,
    labels: &[f64],
    train_idx: &[usize],
    val_idx: &[usize],
    hyper: &HyperParams,
    seed: u64,
) -> Result<TrainOutcome> {
    train_with_observer(bags, labels, train_idx, val_idx, hyper, seed, |_| {})
}

/// Like [`train`], calling `observer` after every epoch.
pub fn train_with_observer<S: BagSource + ?Sized>(
    bags: &S,
    labels: &[f64],
    train_idx: &[usize],
    val_idx: &[usize],
    hyper: &HyperParams,
    seed: u64,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    check_inputs(bags, labels, train_idx, val_idx, hyper)?;
    let shape = ModelShape::from_hyper(hyper);
    let mut params = init_params(seed, hyper);
    let mut state = AdamState::new(shape.len());
    let val_labels: Vec<f64> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams, Vec<f64>)> = None;
    let mut since_best = 0usize;
    let mut order = train_idx.to_vec();

    for epoch in 1..=hyper.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, u64::MAX));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(hyper.batch_size).enumerate() {
            let base = (batch_no * hyper.batch_size) as u64;
            let per_bag: Vec<(f64, Gradients)> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let bag = bags.bag(i)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, base + j as u64));
                    let mode = Mode::Train {
                        rng: &mut rng,
                        feature_dropout: hyper.dropout_feature,
                        tile_dropout: hyper.dropout_tile,
                    };
                    let trace = forward(&params, &bag, mode)?;
                    let y = labels[i];
                    let grads = backward(&trace, &params, loss_grad(trace.prediction, y))?;
                    Ok((loss(trace.prediction, y), grads))
                })
                .collect::<Result<_>>()?;
            let mut total = Gradients::zeros(shape);
            for (l, g) in &per_bag {
                loss_sum += l;
                total.add_assign(g);
            }
            total.scale(1.0 / batch.len() as f64);
            adam_step(&mut params, &total, &mut state, hyper);
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
            }
        }

        let preds = predict_many(&params, bags, val_idx)?;
        let val_loss = preds.iter().zip(&val_labels).map(|(&p, &y)| loss(p, y)).sum::<f64>() / preds.len() as f64;
        let ev = explained_variance(&preds, &val_labels)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_loss,
            val_explained_variance: ev,
            val_pearson: pearson(&preds, &val_labels).ok(),
        };
        observer(&record);
        history.epochs.push(record);

        if best.as_ref().is_none_or(|(b, _, _)| ev > *b) {
            best = Some((ev, params.clone(), preds));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= hyper.patience {
            break;
        }
    }

    let (_, params, val_predictions) = best.expect("at least one epoch runs");
    Ok(TrainOutcome { params, history, val_predictions })
}
