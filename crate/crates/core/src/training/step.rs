use rand::Rng;

use super::batch::Batch;
use super::forcing::{take, teacher_force_next};
use crate::error::{Error, Result};
use crate::eval::history_before;
use crate::model::{BatchInput, ParsRecModel};
use crate::numerics::{
    adam_step, clip_global_norm, global_norm, sparse_adam_step, AdamConfig, Graph, OptimizerMode,
    OptimizerState, Scalar,
};
use crate::synth::Dataset;

/// Adam over the dense weights and row-wise Adam over both embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers<T> {
    pub dense: OptimizerState<T>,
    pub sparse: OptimizerState<T>,
}

impl<T: Scalar> Optimizers<T> {
    pub fn new(model: &ParsRecModel<T>, config: AdamConfig) -> Self {
        Optimizers {
            dense: OptimizerState::for_params(&model.params, OptimizerMode::Dense, config),
            sparse: OptimizerState::for_params(&model.params, OptimizerMode::SparseRows, config),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Targets that entered the loss.
    pub targets: usize,
    /// Fed item of every step, per session (EOB once a basket is used up).
    pub fed: Vec<Vec<usize>>,
}

/// Highest-scoring real item of a logits row; special tokens are masked.
pub fn predicted_item<T: Scalar>(row: &[T], n_items: usize) -> usize {
    let mut best = 0;
    for (i, &v) in row[..n_items].iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One optimizer update on one batch.
///
/// Each step feeds the model's own argmax when it is still in the basket and
/// a random remaining item otherwise, so the fed order is decided on the
/// fly. Sessions whose basket is used up are fed EOB, which the loss skips.
pub fn run_training_step<T: Scalar, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    model: &mut ParsRecModel<T>,
    optim: &mut Optimizers<T>,
    ds: &Dataset,
    batch: &Batch,
    clip_norm: f64,
    dropout_rng: &mut R1,
    forcing_rng: &mut R2,
) -> Result<StepStats> {
    let users: Vec<usize> = batch.sessions.iter().map(|r| r.user).collect();
    let histories: Vec<Vec<usize>> = batch
        .sessions
        .iter()
        .map(|r| history_before(ds, r.user, r.session))
        .collect();
    let mut remaining: Vec<Vec<usize>> = batch
        .sessions
        .iter()
        .map(|r| ds.sessions[r.user][r.session].items.clone())
        .collect();
    let targets: usize = remaining.iter().map(Vec::len).sum();
    let n_items = model.config().n_items;
    let eob = model.config().eob();
    if let Some(&bad) = remaining.iter().flatten().find(|&&i| i >= n_items) {
        return Err(Error::IndexOutOfRange {
            what: "basket item",
            index: bad,
            len: n_items,
        });
    }

    let (mut grads, loss, fed) = {
        let mut g = Graph::new(&model.params);
        let input = BatchInput {
            users: &users,
            histories: &histories,
            steps: batch.steps,
            training: true,
            record_attention: false,
        };
        let unrolled = model.arch.unroll(&mut g, input, dropout_rng, |_, logits| {
            remaining
                .iter_mut()
                .enumerate()
                .map(|(s, rem)| {
                    if rem.is_empty() {
                        return Ok(eob);
                    }
                    let predicted = predicted_item(logits.row(s), n_items);
                    let fed = teacher_force_next(predicted, rem, forcing_rng)?;
                    take(rem, fed);
                    Ok(fed)
                })
                .collect()
        })?;
        let loss = model.arch.session_loss(&mut g, &unrolled)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {value} on a batch of {} sessions, first user {}",
                users.len(),
                users[0]
            )));
        }
        let b = users.len();
        let fed = (0..b)
            .map(|s| unrolled.fed.iter().map(|step| step[s]).collect())
            .collect();
        (g.backward(loss)?, value, fed)
    };
    let grad_norm = global_norm(&grads);
    clip_global_norm(&mut grads, clip_norm)?;
    adam_step(&mut optim.dense, &mut model.params, &grads)?;
    sparse_adam_step(&mut optim.sparse, &mut model.params, &grads)?;
    Ok(StepStats {
        loss,
        grad_norm,
        targets,
        fed,
    })
}
