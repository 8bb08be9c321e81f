//! Labeled datasets: the synthetic cluster generator and small image
//! corpora.

pub mod images;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use synthetic::{generate_synthetic, SyntheticDatasetSpec};

use crate::augment::InputLayout;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Rows of `inputs` paired with class labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub layout: InputLayout,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, layout: InputLayout) -> Result<Self> {
        if !inputs.is_matrix() || inputs.rows() != labels.len() {
            return Err(Error::InvalidShape {
                shape: inputs.shape().to_vec(),
                reason: format!("expected {} rows of inputs", labels.len()),
            });
        }
        if layout.row_len(inputs.cols()) != inputs.cols() {
            return Err(Error::InvalidShape {
                shape: inputs.shape().to_vec(),
                reason: format!("row length does not match {layout:?}"),
            });
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::MalformedRecord {
                index: i,
                reason: format!("label {l} outside [0, {num_classes})"),
            });
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            num_classes,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            layout: self.layout,
        }
    }
}

/// A train/test pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}
