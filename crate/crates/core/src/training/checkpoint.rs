use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::checkpoint;
use crate::numerics::{AdamState, Tensor};

use super::block::GuessBlock;
use super::config::TrainConfig;
use super::EpochSummary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockMeta {
    block_id: usize,
    net_steps: u64,
    ae_steps: u64,
    has_reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
    /// First epoch still to be trained.
    next_epoch: usize,
    blocks: Vec<BlockMeta>,
    pretrain_history: Vec<Vec<f64>>,
    history: Vec<EpochSummary>,
}

/// Everything needed to continue a run bit-exactly. View streams are
/// counter-based, so `next_epoch` is the only RNG cursor.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub config_hash: String,
    pub next_epoch: usize,
    pub blocks: Vec<GuessBlock>,
    pub pretrain_history: Vec<Vec<f64>>,
    pub history: Vec<EpochSummary>,
}

fn adam_tensors<'a>(prefix: &str, names: &[String], opt: &'a AdamState) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    for (n, (m, v)) in names.iter().zip(opt.first_moments().iter().zip(opt.second_moments())) {
        out.push((format!("{prefix}.m/{n}"), m));
        out.push((format!("{prefix}.v/{n}"), v));
    }
    out
}

fn block_tensors(b: &GuessBlock) -> Vec<(String, &Tensor)> {
    let p = format!("block{}/", b.block_id);
    let mut out: Vec<(String, &Tensor)> = Vec::new();
    let net_names = b.network_parameter_names();
    let ae_names = b.autoencoder_parameter_names();
    out.extend(net_names.iter().map(|n| format!("{p}{n}")).zip(b.network_parameters()));
    out.extend(b.buffer_names().into_iter().map(|n| format!("{p}{n}")).zip(b.buffers()));
    out.extend(ae_names.iter().map(|n| format!("{p}{n}")).zip(b.autoencoder_parameters()));
    if let Some(r) = &b.reference {
        out.push((format!("{p}reference"), r));
    }
    out.extend(adam_tensors(&format!("{p}adam.net"), &net_names, &b.net_opt));
    out.extend(adam_tensors(&format!("{p}adam.ae"), &ae_names, &b.ae_opt));
    out
}

pub fn save_checkpoint(state: &TrainingState, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        config_hash: state.config_hash.clone(),
        next_epoch: state.next_epoch,
        blocks: state
            .blocks
            .iter()
            .map(|b| BlockMeta {
                block_id: b.block_id,
                net_steps: b.net_opt.step_count(),
                ae_steps: b.ae_opt.step_count(),
                has_reference: b.reference.is_some(),
            })
            .collect(),
        pretrain_history: state.pretrain_history.clone(),
        history: state.history.clone(),
    };
    let tensors: Vec<(String, &Tensor)> = state.blocks.iter().flat_map(block_tensors).collect();
    if path.as_os_str().is_empty() {
        return Err(Error::Invalid("checkpoint path is empty".into()));
    }
    // Write-then-rename keeps the previous checkpoint intact on failure.
    let tmp = path.with_extension("partial");
    checkpoint::write(&tmp, &meta, &tensors)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take(map: &mut HashMap<String, Tensor>, name: &str, like: &Tensor) -> Result<Tensor> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::Invalid(format!("checkpoint lacks tensor `{name}`")))?;
    if t.shape() != like.shape() {
        return Err(Error::Invalid(format!(
            "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
            t.shape(),
            like.shape()
        )));
    }
    Ok(t)
}

fn restore_adam(
    map: &mut HashMap<String, Tensor>,
    prefix: &str,
    names: &[String],
    params: &[&Tensor],
    opt: &AdamState,
    steps: u64,
) -> Result<AdamState> {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (n, p) in names.iter().zip(params) {
        first.push(take(map, &format!("{prefix}.m/{n}"), p)?);
        second.push(take(map, &format!("{prefix}.v/{n}"), p)?);
    }
    AdamState::from_parts(opt.config, steps, first, second)
}

/// Loads a checkpoint written for `config`; refuses one whose config hash
/// differs from `expected_hash`.
pub fn load_checkpoint(path: &Path, config: &TrainConfig, expected_hash: &str) -> Result<TrainingState> {
    let (meta, tensors): (CheckpointMeta, _) = checkpoint::read(path)?;
    if meta.config_hash != expected_hash {
        return Err(Error::ConfigHashMismatch {
            expected: expected_hash.to_string(),
            found: meta.config_hash,
        });
    }
    let mut map: HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut blocks = Vec::with_capacity(meta.blocks.len());
    for bm in &meta.blocks {
        let mut b = GuessBlock::init(config, bm.block_id)?;
        let p = format!("block{}/", bm.block_id);
        let net_names = b.network_parameter_names();
        let ae_names = b.autoencoder_parameter_names();
        let buffer_names = b.buffer_names();

        let net: Vec<Tensor> = net_names
            .iter()
            .zip(b.network_parameters())
            .map(|(n, like)| take(&mut map, &format!("{p}{n}"), like))
            .collect::<Result<_>>()?;
        let bufs: Vec<Tensor> = buffer_names
            .iter()
            .zip(b.buffers())
            .map(|(n, like)| take(&mut map, &format!("{p}{n}"), like))
            .collect::<Result<_>>()?;
        let aes: Vec<Tensor> = ae_names
            .iter()
            .zip(b.autoencoder_parameters())
            .map(|(n, like)| take(&mut map, &format!("{p}{n}"), like))
            .collect::<Result<_>>()?;
        let net_opt = restore_adam(&mut map, &format!("{p}adam.net"), &net_names, &b.network_parameters(), &b.net_opt, bm.net_steps)?;
        let ae_opt = restore_adam(&mut map, &format!("{p}adam.ae"), &ae_names, &b.autoencoder_parameters(), &b.ae_opt, bm.ae_steps)?;
        if bm.has_reference {
            let r = map
                .remove(&format!("{p}reference"))
                .ok_or_else(|| Error::Invalid("checkpoint lacks reference matrix".into()))?;
            b.reference = Some(r);
        }
        b.overwrite(net, bufs, aes);
        b.net_opt = net_opt;
        b.ae_opt = ae_opt;
        blocks.push(b);
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Invalid(format!("checkpoint holds unexpected tensor `{extra}`")));
    }
    Ok(TrainingState {
        config_hash: meta.config_hash,
        next_epoch: meta.next_epoch,
        blocks,
        pretrain_history: meta.pretrain_history,
        history: meta.history,
    })
}
