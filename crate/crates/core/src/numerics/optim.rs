//! Adam for dense parameters, row-wise sparse Adam for embedding tables, and
//! global-norm gradient clipping.

use super::{Gradients, ParamId, ParamKind, ParamSet, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerMode {
    Dense,
    SparseRows,
}

/// Moment accumulators of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Dense step counter.
    pub t: u64,
    /// Per-row step counters (sparse mode only).
    pub row_steps: Vec<u64>,
}

/// Adam state over the parameters of one [`OptimizerMode`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub mode: OptimizerMode,
    pub slots: Vec<(ParamId, Moments<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    /// State for every parameter of `params` whose kind matches `mode`.
    pub fn for_params(params: &ParamSet<T>, mode: OptimizerMode, config: AdamConfig) -> Self {
        let wanted = match mode {
            OptimizerMode::Dense => ParamKind::Dense,
            OptimizerMode::SparseRows => ParamKind::SparseRows,
        };
        let slots = params
            .iter()
            .filter(|(_, p)| p.kind == wanted)
            .map(|(id, p)| {
                let len = p.value.len();
                let rows = match mode {
                    OptimizerMode::Dense => 0,
                    OptimizerMode::SparseRows => p.value.rows(),
                };
                (
                    id,
                    Moments {
                        m: vec![T::zero(); len],
                        v: vec![T::zero(); len],
                        t: 0,
                        row_steps: vec![0; rows],
                    },
                )
            })
            .collect();
        OptimizerState {
            config,
            mode,
            slots,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[inline]
fn adam_update<T: Scalar>(
    cfg: &AdamConfig,
    t: u64,
    value: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
) {
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let c1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Bias-corrected Adam over every dense parameter of `state`.
///
/// Parameters absent from `grads` are skipped and keep their step counter.
pub fn adam_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
) -> Result<()> {
    if state.slots.is_empty() {
        return Err(Error::Empty("optimizer state"));
    }
    let cfg = state.config;
    for (id, mom) in state.slots.iter_mut() {
        let Some(g) = grads.param(*id) else { continue };
        mom.t += 1;
        let value = params.value_mut(*id).data_mut();
        adam_update(&cfg, mom.t, value, &g.values, &mut mom.m, &mut mom.v);
    }
    Ok(())
}

/// Adam applied only to the rows named by each gradient's `touched` list.
///
/// Untouched rows keep their values and moments; every row carries its own
/// step counter for bias correction. A gradient without a touched list
/// (dense use of the table) updates all rows.
pub fn sparse_adam_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
) -> Result<()> {
    let cfg = state.config;
    for (id, mom) in state.slots.iter_mut() {
        let Some(g) = grads.param(*id) else { continue };
        let table = params.value_mut(*id);
        let rows = table.rows();
        let cols = table.cols();
        let all: Vec<usize>;
        let touched: &[usize] = match &g.touched {
            Some(t) => t,
            None => {
                all = (0..rows).collect();
                &all
            }
        };
        let data = table.data_mut();
        for &r in touched {
            if r >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "sparse Adam row",
                    index: r,
                    len: rows,
                });
            }
            mom.row_steps[r] += 1;
            let span = r * cols..(r + 1) * cols;
            adam_update(
                &cfg,
                mom.row_steps[r],
                &mut data[span.clone()],
                &g.values[span.clone()],
                &mut mom.m[span.clone()],
                &mut mom.v[span],
            );
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm<T: Scalar>(grads: &Gradients<T>) -> f64 {
    grads
        .all_values()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the applied factor (1 when no clipping happened).
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    let s = T::of(scale);
    for g in grads.all_values_mut() {
        g.iter_mut().for_each(|v| *v = *v * s);
    }
    Ok(scale)
}
