//! Mini-batch training with Adam and validation-based early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Adam, Graph, Grads, ParamSet, Var};
use crate::error::{Error, Result};

/// Examples per gradient chunk. Chunks are reduced in order, so results do not
/// depend on the number of worker threads.
const CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue { best_epoch: usize },
    Stop { best_epoch: usize },
}

impl StopDecision {
    pub fn best_epoch(&self) -> usize {
        match *self {
            StopDecision::Continue { best_epoch } | StopDecision::Stop { best_epoch } => best_epoch,
        }
    }

    pub fn should_stop(&self) -> bool {
        matches!(self, StopDecision::Stop { .. })
    }
}

/// Stops once `max(patience, 1)` epochs have passed without a strict
/// improvement on the best loss. Ties keep the earliest epoch.
pub fn early_stop(history: &[f64], patience: usize) -> Result<StopDecision> {
    if history.is_empty() {
        return Err(Error::Argument("early stopping needs at least one epoch".into()));
    }
    let mut best_epoch = 0;
    for (i, &v) in history.iter().enumerate() {
        if v < history[best_epoch] {
            best_epoch = i;
        }
    }
    let since = history.len() - 1 - best_epoch;
    Ok(if since >= patience.max(1) {
        StopDecision::Stop { best_epoch }
    } else {
        StopDecision::Continue { best_epoch }
    })
}

/// Mean loss and summed gradients over `examples`.
pub fn batch_gradient<E, L>(params: &ParamSet, examples: &[&E], loss: &L) -> Result<(f64, Grads)>
where
    E: Sync,
    L: Fn(&mut Graph, &E) -> Result<Var> + Sync,
{
    let parts: Vec<Result<(f64, Grads)>> = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = Grads::zeros_like(params);
            let mut total = 0.0;
            for e in chunk {
                let mut g = Graph::new(params);
                let l = loss(&mut g, e)?;
                total += g.scalar(l);
                g.backward(l, &mut grads);
            }
            Ok((total, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Grads::zeros_like(params);
    for part in parts {
        let (t, g) = part?;
        total += t;
        grads.add_assign(&g);
    }
    let n = examples.len().max(1) as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Mean loss over `examples` without gradients.
pub fn mean_loss<E, L>(params: &ParamSet, examples: &[E], loss: &L) -> Result<f64>
where
    E: Sync,
    L: Fn(&mut Graph, &E) -> Result<Var> + Sync,
{
    if examples.is_empty() {
        return Ok(0.0);
    }
    let parts: Vec<Result<f64>> = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut total = 0.0;
            for e in chunk {
                let mut g = Graph::new(params);
                let l = loss(&mut g, e)?;
                total += g.scalar(l);
            }
            Ok(total)
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / examples.len() as f64)
}

pub struct FitOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Trains `params` in place and leaves them at the best-validation epoch.
///
/// `epoch_examples(epoch, params)` supplies the training examples of each
/// epoch, which lets callers re-mine negatives against the current model.
pub fn fit<E, M, L>(params: &mut ParamSet, cfg: &FitConfig, epoch_examples: M, val: &[E], loss: L) -> Result<FitOutcome>
where
    E: Sync + Clone,
    M: FnMut(usize, &ParamSet) -> Result<Vec<E>>,
    L: Fn(&mut Graph, &E) -> Result<Var> + Sync,
{
    fit_online(params, cfg, epoch_examples, |_| Ok(val.to_vec()), loss)
}

/// As [`fit`], but the validation examples are rebuilt from the updated
/// parameters after every epoch. An empty validation set falls back to the
/// epoch's training loss.
pub fn fit_online<E, M, V, L>(
    params: &mut ParamSet,
    cfg: &FitConfig,
    mut epoch_examples: M,
    mut val_examples: V,
    loss: L,
) -> Result<FitOutcome>
where
    E: Sync,
    M: FnMut(usize, &ParamSet) -> Result<Vec<E>>,
    V: FnMut(&ParamSet) -> Result<Vec<E>>,
    L: Fn(&mut Graph, &E) -> Result<Var> + Sync,
{
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    if cfg.max_epochs == 0 {
        return Err(Error::Argument("max_epochs must be positive".into()));
    }
    let mut opt = Adam::new(params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut history = Vec::new();
    let mut best = params.clone();
    let mut best_epoch = 0;
    let start = Instant::now();
    for epoch in 0..cfg.max_epochs {
        let examples = epoch_examples(epoch, params)?;
        if examples.is_empty() {
            return Err(Error::Argument("no training examples".into()));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&E> = batch.iter().map(|&i| &examples[i]).collect();
            let (l, grads) = batch_gradient(params, &refs, &loss)?;
            train_total += l * batch.len() as f64;
            opt.step(params, &grads);
        }
        if !params.all_finite() {
            return Err(Error::State(format!("non-finite parameters after epoch {epoch}")));
        }
        let val = val_examples(params)?;
        let val_loss = if val.is_empty() {
            train_total / examples.len() as f64
        } else {
            mean_loss(params, &val, &loss)?
        };
        history.push(val_loss);
        log.push(EpochRecord {
            epoch,
            train_loss: train_total / examples.len() as f64,
            val_loss,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        let decision = early_stop(&history, cfg.patience)?;
        if decision.best_epoch() == epoch {
            best.clone_from(params);
            best_epoch = epoch;
        }
        if decision.should_stop() {
            break;
        }
    }
    *params = best;
    Ok(FitOutcome { log, best_epoch })
}
