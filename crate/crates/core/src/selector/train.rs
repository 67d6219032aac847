use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{score_table, ExpandedCells, LossBreakdown, SelectorModel};
use crate::dataset::{CellCoord, Table};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Grads};

/// One supervised selection example.
#[derive(Debug, Clone)]
pub struct SelectorExample {
    pub question_id: String,
    pub question: String,
    pub table: Arc<Table>,
    pub expanded: Option<Arc<ExpandedCells>>,
    pub gold: CellCoord,
    pub align_labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SelectorTrainConfig {
    fn default() -> Self {
        SelectorTrainConfig {
            epochs: 4,
            lr: 5e-5,
            batch_size: 32,
            sigma: super::DEFAULT_SIGMA,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's training examples.
    pub loss: LossBreakdown,
    pub dev_hits_at_1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// 1-based rank of the gold cell for every example.
pub fn gold_ranks(model: &SelectorModel, examples: &[SelectorExample]) -> Result<Vec<usize>> {
    examples
        .par_iter()
        .map(|ex| {
            let sheet = score_table(&ex.question, &ex.table, ex.expanded.as_deref(), model)?;
            sheet
                .rank_of(ex.gold)
                .ok_or_else(|| Error::Contract(format!("gold cell missing from ranking of {}", ex.question_id)))
        })
        .collect()
}

pub fn hits_at_1(model: &SelectorModel, examples: &[SelectorExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let ranks = gold_ranks(model, examples)?;
    Ok(ranks.iter().filter(|&&r| r == 1).count() as f64 / ranks.len() as f64)
}

fn mean_breakdown(parts: &[LossBreakdown], sigma: f64) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    LossBreakdown::new(
        parts.iter().map(|p| p.l_row).sum::<f64>() / n,
        parts.iter().map(|p| p.l_col).sum::<f64>() / n,
        parts.iter().map(|p| p.l_align).sum::<f64>() / n,
        sigma,
    )
}

/// Mini-batch AdamW on the joint loss. Per-question gradients are computed
/// in parallel and summed in batch order, so results do not depend on the
/// thread count. The kept parameters are those of the epoch with the best
/// dev Hits@1 (earliest on ties), or of the last epoch without a dev set.
pub fn train_selector(
    model: &mut SelectorModel,
    train: &[SelectorExample],
    dev: &[SelectorExample],
    config: &SelectorTrainConfig,
) -> Result<TrainingLog> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no selector training examples".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
    }
    super::check_sigma(config.sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(&model.store, config.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, crate::nn::ParamSnapshot)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut parts = Vec::with_capacity(train.len());
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(LossBreakdown, Grads)> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &train[i];
                    model.loss_and_grads(
                        &ex.question,
                        &ex.table,
                        ex.expanded.as_deref(),
                        ex.gold,
                        &ex.align_labels,
                        config.sigma,
                    )
                })
                .collect::<Result<_>>()?;
            let mut total = Grads::zeros_like(&model.store);
            for (lb, g) in &results {
                total.accumulate(g);
                parts.push(*lb);
            }
            total.scale(1.0 / batch.len() as f64);
            opt.step(&mut model.store, &total);
        }
        if !model.store.all_finite() {
            return Err(Error::Contract(format!("non-finite parameters after epoch {epoch}")));
        }
        let loss = mean_breakdown(&parts, config.sigma);
        let dev_hits = if dev.is_empty() {
            None
        } else {
            Some(hits_at_1(model, dev)?)
        };
        log::info!(
            "selector epoch {epoch}: total {:.4} (row {:.4}, col {:.4}, align {:.4}) dev hits@1 {}",
            loss.total,
            loss.l_row,
            loss.l_col,
            loss.l_align,
            dev_hits.map_or("-".to_string(), |h| format!("{h:.3}"))
        );
        log.epochs.push(EpochRecord {
            epoch,
            loss,
            dev_hits_at_1: dev_hits,
        });
        match dev_hits {
            Some(h) if best.as_ref().is_none_or(|(b, _)| h > *b) => {
                best = Some((h, model.store.to_snapshot()));
                log.best_epoch = epoch;
            }
            None => log.best_epoch = epoch,
            _ => {}
        }
    }
    if let Some((_, snap)) = best {
        model.store.load_snapshot(&snap)?;
    }
    Ok(log)
}
