use std::collections::BTreeMap;

use crate::augment::{augment_batch, views_for_block, ViewStreams};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::BlockMode;
use crate::metrics::{MetricsWriter, Phase};
use crate::nets::{Autoencoder, Module};
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor};
use crate::seed::{derive_seed, stream};

use super::block::GuessBlock;
use super::config::{Objective, ReferenceSource, TrainConfig};
use super::{batch_ranges, epoch_order};

/// Seeds of the pretraining view streams, disjoint from the joint-training
/// streams.
fn pretrain_streams(config: &TrainConfig, block: &GuessBlock, epoch: usize, step: usize) -> ViewStreams {
    let run = derive_seed(config.seed, "ae-pretrain", &[]);
    ViewStreams::for_step(
        run,
        &[derive_seed(block.seed, "ae-pretrain", &[])],
        epoch as u64,
        step as u64,
    )
}

fn ae_step(
    ae: &mut Autoencoder,
    opt: &mut AdamState,
    x: &Tensor,
    normalize: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = ae.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let (_, recon) = ae.forward(&mut tape, &params, xv)?;
    let recon = if normalize { tape.zscore(recon)? } else { recon };
    let loss = crate::losses::reconstruction_loss(&mut tape, xv, recon)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let g: Vec<Tensor> = params
        .iter()
        .zip(ae.parameters())
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    let names = ae.parameter_names();
    opt.step(&mut ae.parameters_mut(), &g, &names)?;
    Ok(value)
}

/// Fits each autoencoder of each block to its own augmented view stream.
/// Networks are untouched. Returns per-block, per-epoch mean reconstruction
/// loss (summed over the block's autoencoders).
pub fn pretrain_autoencoders(
    blocks: &mut [GuessBlock],
    data: &LabeledDataset,
    config: &TrainConfig,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<Vec<Vec<f64>>> {
    let mut history = vec![Vec::new(); blocks.len()];
    if !config.ae_pretrain_enabled || config.autoencoders_per_block() == 0 {
        return Ok(history);
    }
    let schedule = config.ae_schedule();
    for (slot, block) in blocks.iter_mut().enumerate() {
        let adam = AdamConfig {
            learning_rate: config.ae_main_lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        };
        let mut opts: Vec<AdamState> = block
            .autoencoders
            .iter()
            .map(|a| AdamState::new(a.parameters(), adam))
            .collect();
        for epoch in 0..config.ae_pretrain_epochs {
            let lr = schedule.learning_rate(epoch);
            opts.iter_mut().for_each(|o| o.set_learning_rate(lr));
            let order = epoch_order(derive_seed(config.seed, "ae-order", &[]), epoch, data.len());
            let ranges = batch_ranges(data.len(), config.batch_size);
            let mut total = 0.0;
            for (step, range) in ranges.iter().enumerate() {
                let batch = data.inputs.select_rows(&order[range.clone()]);
                let streams = pretrain_streams(config, block, epoch, step);
                let views = views_for_block(&batch, data.layout, &config.augmentation, &streams, false, 0)?;
                let fail = |e: Error| Error::TrainingAborted {
                    context: format!("autoencoder pretraining, block {} epoch {epoch} step {step}", block.block_id),
                    reason: e.to_string(),
                };
                match config.mode {
                    BlockMode::Ensemble => {
                        for (i, (ae, opt)) in block.autoencoders.iter_mut().zip(&mut opts).enumerate() {
                            total += ae_step(ae, opt, &views[i], config.normalize_reconstruction).map_err(fail)?;
                        }
                    }
                    BlockMode::Efficient => {
                        let stacked = Tensor::vstack(&[&views[0], &views[1]])?;
                        total += ae_step(&mut block.autoencoders[0], &mut opts[0], &stacked, config.normalize_reconstruction)
                            .map_err(fail)?;
                    }
                }
            }
            let mean = total / ranges.len() as f64;
            history[slot].push(mean);
            if let Some(m) = metrics.as_deref_mut() {
                let values = BTreeMap::from([("recon".to_string(), mean), ("lr".to_string(), lr)]);
                m.write(Phase::AePretrain, block.block_id, epoch, ranges.len(), values)?;
                m.flush(epoch)?;
            }
        }
    }
    Ok(history)
}

/// Measures the fixed reference of the autoencoder-regularized loss on one
/// augmented pass over the training set.
pub fn fit_reference(blocks: &mut [GuessBlock], data: &LabeledDataset, config: &TrainConfig) -> Result<()> {
    if !matches!(
        config.objective,
        Objective::RegularizedBt {
            reference: ReferenceSource::Autoencoders,
            ..
        }
    ) {
        return Ok(());
    }
    for block in blocks.iter_mut() {
        let mut rng_a = stream(block.seed, "reference-views", &[0]);
        let mut rng_b = stream(block.seed, "reference-views", &[1]);
        let va = augment_batch(&data.inputs, data.layout, &config.augmentation, &mut rng_a)?;
        let vb = augment_batch(&data.inputs, data.layout, &config.augmentation, &mut rng_b)?;
        let c = block.autoencoder_correlation(&va, &vb, config.mode)?;
        block.reference = Some(c.entries().clone());
    }
    Ok(())
}
