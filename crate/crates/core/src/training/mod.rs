//! Two-phase training: autoencoder pretraining, then joint per-block
//! training of the ensemble, with checkpointing and a metrics stream.

mod block;
mod checkpoint;
mod config;
mod pretrain;

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use block::{train_block_step, GuessBlock, StepOutput};
pub use checkpoint::{load_checkpoint, save_checkpoint, TrainingState};
pub use config::{config_hash, Objective, ReferenceSource, TrainConfig};
pub use pretrain::{fit_reference, pretrain_autoencoders};

use crate::augment::{generate_and_allocate, views_for_block, ViewStreams};
use crate::correlation::CorrelationMatrix;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{MetricsWriter, Phase};
use crate::numerics::Tensor;
use crate::seed::{derive_seed, stream};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Mini-batch boundaries; a trailing batch of one row joins its
/// predecessor because correlations need two rows.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n).step_by(batch_size).map(|s| s..(s + batch_size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < 2) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Sample order of `epoch`, shared by every block.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "epoch-order", &[epoch as u64]));
    order
}

/// Epoch-averaged losses of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub block_id: usize,
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub mean: LossBreakdown,
}

impl EpochSummary {
    fn metrics_values(&self) -> BTreeMap<String, f64> {
        let m = &self.mean;
        BTreeMap::from([
            ("total".to_string(), m.total),
            ("whitening".to_string(), m.whitening),
            ("diag_term".to_string(), m.diag_term),
            ("offdiag_term".to_string(), m.offdiag_term),
            ("recon_a".to_string(), m.recon_a),
            ("recon_b".to_string(), m.recon_b),
            ("lr".to_string(), self.learning_rate),
        ])
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub config_hash: String,
    pub metrics: Option<&'a mut MetricsWriter>,
    /// Directory receiving `checkpoint.bin` every `checkpoint_every` epochs.
    pub checkpoint_dir: Option<PathBuf>,
    /// Directory receiving one correlation CSV per block and epoch.
    pub dump_correlations: Option<PathBuf>,
    /// Continue from this state instead of initializing.
    pub resume: Option<TrainingState>,
    /// Stop once this many epochs are complete (the state remains resumable).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub state: TrainingState,
}

impl TrainingRun {
    pub fn blocks(&self) -> &[GuessBlock] {
        &self.state.blocks
    }

    pub fn history(&self) -> &[EpochSummary] {
        &self.state.history
    }

    /// Per-epoch summaries of one block.
    pub fn block_history(&self, block_id: usize) -> Vec<&EpochSummary> {
        self.state.history.iter().filter(|s| s.block_id == block_id).collect()
    }
}

fn add(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.total += b.total;
    acc.whitening += b.whitening;
    acc.diag_term += b.diag_term;
    acc.offdiag_term += b.offdiag_term;
    acc.recon_a += b.recon_a;
    acc.recon_b += b.recon_b;
}

fn scaled(b: LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        total: b.total * s,
        whitening: b.whitening * s,
        diag_term: b.diag_term * s,
        offdiag_term: b.offdiag_term * s,
        recon_a: b.recon_a * s,
        recon_b: b.recon_b * s,
    }
}

/// Trains `config.blocks` independent blocks on `data`.
///
/// Every epoch visits the training set in one shared order; each source
/// batch yields `2M` augmented batches, and each block steps on its own
/// pair (or on every consecutive pair when views are shared). Blocks never
/// exchange parameters or gradients.
pub fn train_ensemble(config: &TrainConfig, data: &LabeledDataset, mut opts: TrainOptions) -> Result<TrainingRun> {
    config.validate()?;
    if data.input_dim() != config.architecture.input_dim {
        return Err(Error::Config(format!(
            "dataset rows have {} values, architecture expects {}",
            data.input_dim(),
            config.architecture.input_dim
        )));
    }
    if data.len() < 2 {
        return Err(Error::TooFewRows {
            op: "train_ensemble",
            needed: 2,
            got: data.len(),
        });
    }

    let mut state = match opts.resume.take() {
        Some(s) => {
            if s.config_hash != opts.config_hash {
                return Err(Error::ConfigHashMismatch {
                    expected: opts.config_hash.clone(),
                    found: s.config_hash,
                });
            }
            s
        }
        None => {
            let mut blocks = (0..config.blocks)
                .map(|k| GuessBlock::init(config, k))
                .collect::<Result<Vec<_>>>()?;
            let pretrain_history = pretrain_autoencoders(&mut blocks, data, config, opts.metrics.as_deref_mut())?;
            fit_reference(&mut blocks, data, config)?;
            TrainingState {
                config_hash: opts.config_hash.clone(),
                next_epoch: 0,
                blocks,
                pretrain_history,
                history: Vec::new(),
            }
        }
    };

    let block_seeds: Vec<u64> = state.blocks.iter().map(|b| b.seed).collect();
    let order_seed = derive_seed(config.seed, "train-order", &[]);
    let schedule = config.schedule();
    let ranges = batch_ranges(data.len(), config.batch_size);
    let last_epoch = opts.stop_after.map_or(config.epochs, |s| s.min(config.epochs));

    if let Some(dir) = &opts.dump_correlations {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    while state.next_epoch < last_epoch {
        let epoch = state.next_epoch;
        let lr = schedule.learning_rate(epoch);
        state.blocks.iter_mut().for_each(|b| b.set_learning_rate(lr));
        let order = epoch_order(order_seed, epoch, data.len());
        let mut sums = vec![LossBreakdown::default(); state.blocks.len()];
        let mut steps = vec![0usize; state.blocks.len()];
        let mut last_corr: Vec<Option<Tensor>> = vec![None; state.blocks.len()];

        for (step, range) in ranges.iter().enumerate() {
            let batch = data.inputs.select_rows(&order[range.clone()]);
            let streams = ViewStreams::for_step(config.seed, &block_seeds, epoch as u64, step as u64);
            let shared = if config.shared_views {
                Some(generate_and_allocate(&batch, data.layout, &config.augmentation, &streams, true)?.batches)
            } else {
                None
            };
            for (slot, block) in state.blocks.iter_mut().enumerate() {
                let views = match &shared {
                    Some(all) => all.clone(),
                    None => views_for_block(&batch, data.layout, &config.augmentation, &streams, false, slot)?,
                };
                for pair in views.chunks(2) {
                    let out = block.train_step(&pair[0], &pair[1], config).map_err(|e| Error::TrainingAborted {
                        context: format!("block {} epoch {epoch} step {step}", block.block_id),
                        reason: match steps[slot] {
                            0 => e.to_string(),
                            n => format!("{e}; last epoch-mean of finite steps: {:?}", scaled(sums[slot], 1.0 / n as f64)),
                        },
                    })?;
                    add(&mut sums[slot], &out.breakdown);
                    steps[slot] += 1;
                    last_corr[slot] = Some(out.correlation);
                }
            }
        }

        for (slot, block) in state.blocks.iter().enumerate() {
            let summary = EpochSummary {
                block_id: block.block_id,
                epoch,
                steps: steps[slot],
                learning_rate: lr,
                mean: scaled(sums[slot], 1.0 / steps[slot] as f64),
            };
            if let Some(m) = opts.metrics.as_deref_mut() {
                m.write(Phase::Train, block.block_id, epoch, steps[slot], summary.metrics_values())?;
            }
            if let (Some(dir), Some(c)) = (&opts.dump_correlations, &last_corr[slot]) {
                let path = dir.join(format!("block{}_epoch{epoch:04}.csv", block.block_id));
                let csv = CorrelationMatrix::new(c.clone())?.to_csv();
                std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            }
            state.history.push(summary);
        }
        if let Some(m) = opts.metrics.as_deref_mut() {
            m.flush(epoch)?;
        }
        state.next_epoch += 1;
        if let Some(dir) = &opts.checkpoint_dir {
            if config.checkpoint_every > 0 && state.next_epoch % config.checkpoint_every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_checkpoint(&state, &dir.join(CHECKPOINT_FILE))?;
            }
        }
    }
    Ok(TrainingRun { state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_ranges_cover_and_merge_singletons() {
        assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(batch_ranges(9, 4), vec![0..4, 4..9]);
        assert_eq!(batch_ranges(3, 8), vec![0..3]);
        assert_eq!(batch_ranges(1600, 128).len(), 13);
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let a = epoch_order(1, 0, 50);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 0, 50));
        assert_ne!(a, epoch_order(1, 1, 50));
    }
}
