use std::fmt::Write as _;

use super::batch::{plan_batches, train_sessions};
use super::config::TrainConfig;
use super::step::{run_training_step, Optimizers};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, MetricsReport, Scorer, Split, SplitSpec, DEFAULT_KS};
use crate::model::ParsRecModel;
use crate::rng::{stream, Purpose};
use crate::synth::Dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Target-weighted mean training loss.
    pub loss: f64,
    /// Validation metrics, NaN on epochs that were not evaluated.
    pub hr10: f64,
    pub ndcg10: f64,
    pub sessprec10: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_ndcg10: f64,
    /// Optimizer state at the end of training.
    pub optim: Optimizers<f32>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,hr10,ndcg10,sessprec10\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.loss, r.hr10, r.ndcg10, r.sessprec10
        );
    }
    s
}

/// One pass over the training baskets. Batch order, dropout masks and
/// fallback picks come from per-epoch streams.
pub fn train_epoch(
    model: &mut ParsRecModel<f32>,
    optim: &mut Optimizers<f32>,
    ds: &Dataset,
    splits: &SplitSpec,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let sessions = train_sessions(ds, splits);
    if sessions.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let e = epoch as u64;
    let plan = plan_batches(
        ds,
        &sessions,
        cfg.batch_size,
        &mut stream(cfg.seed, Purpose::Batching, e),
    );
    let mut dropout = stream(cfg.seed, Purpose::Dropout, e);
    let mut forcing = stream(cfg.seed, Purpose::TeacherForcing, e);
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in &plan.batches {
        let st = run_training_step(
            model,
            optim,
            ds,
            batch,
            cfg.clip_norm,
            &mut dropout,
            &mut forcing,
        )?;
        total += st.loss * st.targets as f64;
        count += st.targets;
    }
    Ok(total / count as f64)
}

/// Trains until validation NDCG@10 stops improving for `patience`
/// evaluations or `max_epochs` is reached, then leaves the best parameters
/// in `model`. `on_epoch` sees every record as it is produced.
pub fn fit_with(
    model: &mut ParsRecModel<f32>,
    ds: &Dataset,
    splits: &SplitSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, Option<&MetricsReport>),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if ds.n_items > model.config().n_items {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} items, model {}",
            ds.n_items,
            model.config().n_items
        )));
    }
    let mut optim = Optimizers::new(model, cfg.adam());
    let mut history = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, model.params.clone());
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let loss = train_epoch(model, &mut optim, ds, splits, cfg, epoch)?;
        let mut rec = EpochRecord {
            epoch,
            loss,
            hr10: f64::NAN,
            ndcg10: f64::NAN,
            sessprec10: f64::NAN,
        };
        let report = if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let r = evaluate_model(
                Scorer::Model(model),
                ds,
                splits,
                Split::Validation,
                cfg.seed,
                &DEFAULT_KS,
            )?;
            rec.hr10 = r.hr(10);
            rec.ndcg10 = r.ndcg(10);
            rec.sessprec10 = r.sess_prec(10);
            Some(r)
        } else {
            None
        };
        on_epoch(&rec, report.as_ref());
        history.push(rec);
        if report.is_some() {
            if rec.ndcg10 > best.1 {
                best = (epoch, rec.ndcg10, model.params.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let (best_epoch, best_ndcg10, params) = best;
    if best_epoch > 0 {
        model.params = params;
    }
    Ok(FitOutcome {
        history,
        best_epoch,
        best_ndcg10,
        optim,
    })
}

pub fn fit(
    model: &mut ParsRecModel<f32>,
    ds: &Dataset,
    splits: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    fit_with(model, ds, splits, cfg, |_, _| {})
}
