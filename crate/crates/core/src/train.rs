//! The training loop.

use std::path::Path;

use log::{debug, info};
use ndarray::Array2;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, TrackTarget};
use crate::model::Model;
use crate::optim::AdamW;

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean breakdown over the clips of each iteration's batch.
    pub history: Vec<LossBreakdown>,
}

impl TrainReport {
    pub fn first_losses(&self, n: usize) -> Vec<f64> {
        self.history.iter().take(n).map(|b| b.total).collect()
    }
}

fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
    let k = parts.len() as f64;
    let mut m = LossBreakdown::default();
    for b in parts {
        m.cls += b.cls / k;
        m.mask_h += b.mask_h / k;
        m.mask_o += b.mask_o / k;
        m.mask_c += b.mask_c / k;
        m.dice_h += b.dice_h / k;
        m.dice_o += b.dice_o / k;
        m.dice_c += b.dice_c / k;
        m.total += b.total / k;
    }
    m
}

/// Trains `model` on `ds` in a fixed clip order.
///
/// `on_iteration` sees every iteration's breakdown. When a loss or gradient
/// turns non-finite, the parameters from before that step are written to
/// `checkpoint` (if given) and training stops with [`Error::Diverged`].
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    mut on_iteration: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainReport> {
    if ds.clips.is_empty() {
        return Err(Error::Config("training set has no clips".into()));
    }
    let loss = cfg.loss.loss_config();
    let targets: Vec<Vec<TrackTarget>> = ds
        .clips
        .iter()
        .map(|e| model.targets(e, &loss))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(&cfg.optim, &model.store);
    let bs = cfg.optim.batch_size;
    let mut history = Vec::with_capacity(cfg.optim.iterations);
    let mut cursor = 0usize;
    for it in 0..cfg.optim.iterations {
        let mut parts = Vec::with_capacity(bs);
        let mut sum: Vec<Option<Array2<f64>>> = vec![None; model.store.len()];
        for _ in 0..bs {
            let i = cursor % ds.clips.len();
            cursor += 1;
            let r = model.step(&ds.clips[i].clip, &targets[i], &loss)?;
            let finite = r.breakdown.is_finite()
                && r.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                if let Some(path) = checkpoint {
                    model.save(path, cfg)?;
                }
                return Err(Error::Diverged { iteration: it });
            }
            for (acc, g) in sum.iter_mut().zip(r.grads) {
                if let Some(g) = g {
                    match acc {
                        Some(a) => *a += &g,
                        None => *acc = Some(g),
                    }
                }
            }
            parts.push(r.breakdown);
        }
        if bs > 1 {
            for g in sum.iter_mut().flatten() {
                *g /= bs as f64;
            }
        }
        opt.step(&mut model.store, &sum);
        let b = mean(&parts);
        debug!("iteration {it}: {b:?}");
        if cfg.optim.log_every > 0 && (it % cfg.optim.log_every == 0 || it + 1 == cfg.optim.iterations) {
            info!(
                "iter {it:5} total {:.5} cls {:.4} mask_o {:.4} dice_o {:.4} mask_h {:.4} dice_h {:.4} mask_c {:.4} dice_c {:.4}",
                b.total, b.cls, b.mask_o, b.dice_o, b.mask_h, b.dice_h, b.mask_c, b.dice_c
            );
        }
        on_iteration(it, &b);
        history.push(b);
    }
    if model.store.check_finite().is_err() {
        return Err(Error::Diverged {
            iteration: cfg.optim.iterations,
        });
    }
    Ok(TrainReport { history })
}
