use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Catalog, Dropout, ModelShape, RecConfig, RecModel};
use crate::data::{InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{ndcg_from_rank, target_rank};
use crate::nn::Parameterized;
use crate::numerics::{GradientTape, Matrix};

/// One training sequence. `targets` align with the last `targets.len()`
/// input positions: all of them when training per position, or just the
/// final one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainSample {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ndcg10: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecTrainLog {
    pub epochs: Vec<RecEpoch>,
    pub best_epoch: usize,
    pub best_valid_ndcg10: f64,
}

/// Teacher-forced samples from every training prefix with at least two items.
pub fn training_samples(dataset: &InteractionDataset, max_len: usize, per_position: bool) -> Vec<TrainSample> {
    let mut out = Vec::new();
    for u in dataset.users() {
        let seq = u.train();
        if seq.len() < 2 {
            continue;
        }
        let seq = &seq[seq.len().saturating_sub(max_len + 1)..];
        let inputs = seq[..seq.len() - 1].to_vec();
        let targets = if per_position {
            seq[1..].to_vec()
        } else {
            vec![seq[seq.len() - 1]]
        };
        out.push(TrainSample { inputs, targets });
    }
    out
}

/// Mean NDCG@10 of the model on one split.
pub(crate) fn split_ndcg10(model: &RecModel, catalog: &Catalog<'_>, dataset: &InteractionDataset, split: Split) -> Result<f64> {
    let pairs: Vec<(&[usize], usize)> = dataset.users().iter().filter_map(|u| u.context(split)).collect();
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(256) {
        let ctx: Vec<&[usize]> = chunk.iter().map(|p| p.0).collect();
        let scores = model.score_contexts(catalog, &ctx)?;
        for (s, &(_, t)) in scores.iter().zip(chunk) {
            total += ndcg_from_rank(target_rank(s, t), 10);
        }
    }
    Ok(total / pairs.len() as f64)
}

/// Momentum gradient descent with early stopping on validation NDCG@10.
/// Returns the parameters from the best validation epoch.
pub fn train(
    config: &RecConfig,
    shape: ModelShape,
    dataset: &InteractionDataset,
    catalog: &Catalog<'_>,
) -> Result<(RecModel, RecTrainLog)> {
    let mut model = RecModel::new(config, shape)?;
    let mut samples = training_samples(dataset, config.max_len, config.per_position);
    if samples.is_empty() {
        return Err(Error::Config("no user has a training prefix of two or more items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut velocity: Vec<Matrix> = model
        .parameters()
        .iter()
        .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    let mut log = RecTrainLog {
        best_valid_ndcg10: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best = model.clone();
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        samples.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, batch) in samples.chunks(config.batch).enumerate() {
            let mut tape = GradientTape::new();
            let loss = {
                let mut drop = Dropout::new(config.dropout, &mut rng);
                model.loss_with(&mut tape, catalog, batch, &mut drop)?
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("training loss is {value}"),
                });
            }
            loss_sum += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let g = model.gradients(&tape, &grads);
            drop(tape);
            for ((p, v), g) in model.parameters_mut().into_iter().zip(&mut velocity).zip(&g) {
                for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vi = config.momentum * *vi + gi;
                    *pi -= config.lr * *vi;
                }
            }
            if model.parameters().iter().any(|(_, p)| !p.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: "parameters became non-finite".into(),
                });
            }
        }
        let train_loss = loss_sum / samples.len() as f64;
        let valid = split_ndcg10(&model, catalog, dataset, Split::Valid)?;
        info!("rec epoch {epoch}: loss {train_loss:.6} valid ndcg@10 {valid:.6}");
        log.epochs.push(RecEpoch {
            epoch,
            train_loss,
            valid_ndcg10: valid,
        });
        if valid > log.best_valid_ndcg10 {
            log.best_valid_ndcg10 = valid;
            log.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            break;
        }
    }
    Ok((best, log))
}
