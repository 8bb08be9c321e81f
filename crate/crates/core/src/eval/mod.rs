//! Frozen-representation evaluation: a linear probe and a KNN classifier
//! per block, combined across blocks by majority vote.

mod knn;
mod probe;
mod vote;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use knn::{knn_predict, l2_normalize_rows, KnnPrediction, DEFAULT_K};
pub use probe::{fit_probe, LinearProbe, ProbeConfig};
pub use vote::{majority_vote, Resolution, VoteRecord, ABSENT_RANK, TOP_K};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{MetricsWriter, Phase};
use crate::training::GuessBlock;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            probe: ProbeConfig::default(),
            knn_k: DEFAULT_K,
        }
    }
}

/// Where the evaluated blocks came from; copied into the report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    /// Training epochs completed by the evaluated blocks.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Ensemble linear-probe accuracy from the majority vote, in percent.
    pub top1: f64,
    /// Ensemble KNN accuracy from the majority vote, in percent.
    pub knn_top1: f64,
    pub per_block_top1: Vec<f64>,
    pub per_block_knn_top1: Vec<f64>,
    pub mean_block_top1: f64,
    pub mean_block_knn_top1: f64,
    pub vote_resolutions: BTreeMap<Resolution, usize>,
    pub knn_vote_resolutions: BTreeMap<Resolution, usize>,
    pub test_size: usize,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table: one row per block plus the ensemble.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>8} {:>8}", "block", "Linear", "KNN");
        for (k, (l, n)) in self.per_block_top1.iter().zip(&self.per_block_knn_top1).enumerate() {
            let _ = writeln!(out, "{:<10} {:>8.2} {:>8.2}", k, l, n);
        }
        let _ = writeln!(out, "{:<10} {:>8.2} {:>8.2}", "mean", self.mean_block_top1, self.mean_block_knn_top1);
        let _ = writeln!(out, "{:<10} {:>8.2} {:>8.2}", "ensemble", self.top1, self.knn_top1);
        let counts = |m: &BTreeMap<Resolution, usize>| {
            [Resolution::Majority, Resolution::Top5Rank, Resolution::IndexTiebreak]
                .iter()
                .map(|r| m.get(r).copied().unwrap_or(0).to_string())
                .collect::<Vec<_>>()
                .join("/")
        };
        let _ = writeln!(
            out,
            "votes (majority/top5_rank/index_tiebreak): linear {}, knn {}",
            counts(&self.vote_resolutions),
            counts(&self.knn_vote_resolutions)
        );
        let _ = writeln!(
            out,
            "config {} seed {} epoch {}",
            self.provenance.config_hash, self.provenance.seed, self.provenance.epoch
        );
        out
    }
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

fn accuracy(predicted: impl Iterator<Item = usize>, labels: &[usize]) -> f64 {
    percent(predicted.zip(labels).filter(|(p, l)| p == *l).count(), labels.len())
}

/// Votes per test row over the blocks' ranked lists; returns accuracy and
/// resolution counts.
fn vote_accuracy(lists: &[Vec<Vec<usize>>], labels: &[usize]) -> Result<(f64, BTreeMap<Resolution, usize>)> {
    let mut counts = BTreeMap::new();
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let per_block: Vec<Vec<usize>> = lists.iter().map(|b| b[i].clone()).collect();
        let record = majority_vote(&per_block)?;
        *counts.entry(record.resolution).or_default() += 1;
        correct += usize::from(record.label == label);
    }
    Ok((percent(correct, labels.len()), counts))
}

/// Trains one probe per block on `probe_data` and scores every block and
/// the ensemble on `test_data`, with a linear probe and with KNN.
///
/// `probe_data` doubles as the KNN reference set. Neither needs to be the
/// pretraining data. Probe losses go to `metrics` as `probe` records and
/// accuracies as `eval` records; the ensemble uses `block_id` equal to the
/// block count.
pub fn evaluate(
    blocks: &[GuessBlock],
    probe_data: &LabeledDataset,
    test_data: &LabeledDataset,
    config: &EvalConfig,
    provenance: Provenance,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<EvalReport> {
    if blocks.is_empty() {
        return Err(Error::Invalid("evaluate needs at least one block".into()));
    }
    if probe_data.num_classes != test_data.num_classes {
        return Err(Error::Config(format!(
            "probe data has {} classes, test data {}",
            probe_data.num_classes, test_data.num_classes
        )));
    }
    if test_data.is_empty() {
        return Err(Error::Invalid("test set is empty".into()));
    }
    let classes = probe_data.num_classes;
    let mut probe_lists = Vec::with_capacity(blocks.len());
    let mut knn_lists = Vec::with_capacity(blocks.len());
    let mut per_block_top1 = Vec::with_capacity(blocks.len());
    let mut per_block_knn_top1 = Vec::with_capacity(blocks.len());

    for (slot, block) in blocks.iter().enumerate() {
        let train_reps = block.represent(&probe_data.inputs)?;
        let test_reps = block.represent(&test_data.inputs)?;

        let probe_cfg = ProbeConfig {
            seed: crate::seed::derive_seed(config.probe.seed, "probe", &[slot as u64]),
            ..config.probe.clone()
        };
        let probe = fit_probe(&train_reps, &probe_data.labels, classes, &probe_cfg)?;
        let top5 = probe.top5(&test_reps)?;
        let top1 = accuracy(top5.iter().map(|l| l[0]), &test_data.labels);

        let knn = knn_predict(&train_reps, &probe_data.labels, &test_reps, config.knn_k)?;
        let knn_top1 = accuracy(knn.iter().map(|p| p.label), &test_data.labels);

        if let Some(m) = metrics.as_deref_mut() {
            for (epoch, &loss) in probe.loss_history.iter().enumerate() {
                let lr = probe.schedule().learning_rate(epoch);
                m.write(Phase::Probe, block.block_id, epoch, 0, BTreeMap::from([("loss".into(), loss), ("lr".into(), lr)]))?;
            }
            m.write(
                Phase::Eval,
                block.block_id,
                provenance.epoch,
                0,
                BTreeMap::from([("top1".into(), top1), ("knn_top1".into(), knn_top1)]),
            )?;
        }
        per_block_top1.push(top1);
        per_block_knn_top1.push(knn_top1);
        probe_lists.push(top5);
        knn_lists.push(knn.into_iter().map(|p| p.ranking).collect::<Vec<_>>());
    }

    let (top1, vote_resolutions) = vote_accuracy(&probe_lists, &test_data.labels)?;
    let (knn_top1, knn_vote_resolutions) = vote_accuracy(&knn_lists, &test_data.labels)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = EvalReport {
        top1,
        knn_top1,
        mean_block_top1: mean(&per_block_top1),
        mean_block_knn_top1: mean(&per_block_knn_top1),
        per_block_top1,
        per_block_knn_top1,
        vote_resolutions,
        knn_vote_resolutions,
        test_size: test_data.len(),
        num_classes: classes,
        provenance,
    };
    if let Some(m) = metrics {
        m.write(
            Phase::Eval,
            blocks.len(),
            report.provenance.epoch,
            0,
            BTreeMap::from([("top1".into(), report.top1), ("knn_top1".into(), report.knn_top1)]),
        )?;
        m.flush(report.provenance.epoch)?;
    }
    Ok(report)
}
