use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::LinearLayer;
use crate::numerics::{softmax_rows, AdamConfig, AdamState, LrSchedule, Tape, Tensor};
use crate::seed::derive_seed;
use crate::training::{batch_ranges, epoch_order};

use super::vote::TOP_K;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub start_lr: f64,
    pub end_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            batch_size: 128,
            start_lr: 1e-3,
            end_lr: 1e-6,
            weight_decay: 1e-6,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("probe batch_size must be positive".into()));
        }
        if !(self.start_lr > 0.0 && self.end_lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("probe learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::ExponentialDecay {
            start: self.start_lr,
            end: self.end_lr,
            epochs: self.epochs,
        }
    }
}

/// Softmax classifier over frozen representations.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub layer: LinearLayer,
    pub num_classes: usize,
    pub config: ProbeConfig,
    /// Mean cross-entropy of each training epoch.
    pub loss_history: Vec<f64>,
}

impl LinearProbe {
    pub fn schedule(&self) -> LrSchedule {
        self.config.schedule()
    }

    pub fn logits(&self, reps: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = tape.constant(self.layer.weight.clone());
        let b = tape.constant(self.layer.bias.clone());
        let x = tape.constant(reps.clone());
        let y = self.layer.forward(&mut tape, w, b, x)?;
        Ok(tape.value(y).clone())
    }

    /// Class probabilities, one row per input.
    pub fn probabilities(&self, reps: &Tensor) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(reps)?;
        Ok(softmax_rows(&logits).chunks(self.num_classes).map(<[f64]>::to_vec).collect())
    }

    /// Best-first label lists of length `min(5, classes)`; equal scores go
    /// to the smaller label.
    pub fn top5(&self, reps: &Tensor) -> Result<Vec<Vec<usize>>> {
        Ok(self
            .probabilities(reps)?
            .into_iter()
            .map(|p| {
                let mut idx: Vec<usize> = (0..p.len()).collect();
                idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
                idx.truncate(TOP_K);
                idx
            })
            .collect())
    }
}

/// Fits a probe with Adam and cross-entropy; the learning rate decays
/// exponentially from `start_lr` to `end_lr` over the epochs.
pub fn fit_probe(reps: &Tensor, labels: &[usize], num_classes: usize, config: &ProbeConfig) -> Result<LinearProbe> {
    config.validate()?;
    if reps.rows() != labels.len() {
        return Err(Error::InvalidShape {
            shape: reps.shape().to_vec(),
            reason: format!("expected {} rows", labels.len()),
        });
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::MalformedRecord {
            index: i,
            reason: format!("label {l} outside [0, {num_classes})"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "probe-init", &[]));
    let mut layer = LinearLayer::init(reps.cols(), num_classes, &mut rng)?;
    let schedule = config.schedule();
    let mut opt = AdamState::new(
        [&layer.weight, &layer.bias],
        AdamConfig {
            learning_rate: config.start_lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
    );
    let names = ["probe.weight".to_string(), "probe.bias".to_string()];
    let order_seed = derive_seed(config.seed, "probe-order", &[]);
    let mut loss_history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        let mut batches = 0;
        opt.set_learning_rate(schedule.learning_rate(epoch));
        let order = epoch_order(order_seed, epoch, labels.len());
        for range in batch_ranges(labels.len(), config.batch_size) {
            let idx = &order[range];
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let w = tape.leaf(layer.weight.clone());
            let b = tape.leaf(layer.bias.clone());
            let x = tape.constant(reps.select_rows(idx));
            let logits = layer.forward(&mut tape, w, b, x)?;
            let loss = tape.softmax_cross_entropy(logits, &batch_labels)?;
            sum += tape.value(loss).item();
            batches += 1;
            let grads = tape.backward(loss)?;
            let g = [grads.get_or_zeros(w, &layer.weight), grads.get_or_zeros(b, &layer.bias)];
            opt.step(&mut [&mut layer.weight, &mut layer.bias], &g, &names)?;
        }
        loss_history.push(sum / batches as f64);
    }
    Ok(LinearProbe {
        layer,
        num_classes,
        config: config.clone(),
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn separable(n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let sign = if label == 0 { -1.0 } else { 1.0 };
            data.push(sign * rng.random_range(0.5..2.0));
            data.push(rng.random_range(-1.0..1.0));
            data.push(rng.random_range(-1.0..1.0));
            labels.push(label);
        }
        (Tensor::matrix(n, 3, data).unwrap(), labels)
    }

    fn accuracy(probe: &LinearProbe, x: &Tensor, labels: &[usize]) -> f64 {
        let top = probe.top5(x).unwrap();
        top.iter().zip(labels).filter(|(t, &l)| t[0] == l).count() as f64 / labels.len() as f64
    }

    #[test]
    fn separable_classes_are_learned_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = separable(200, &mut rng);
        let cfg = ProbeConfig {
            epochs: 60,
            start_lr: 0.05,
            ..ProbeConfig::default()
        };
        let probe = fit_probe(&x, &y, 2, &cfg).unwrap();
        assert_eq!(accuracy(&probe, &x, &y), 1.0);
        assert!(probe.loss_history.last().unwrap() < &probe.loss_history[0]);
    }

    #[test]
    fn zero_epochs_leaves_probe_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y) = separable(40, &mut rng);
        let cfg = ProbeConfig {
            epochs: 0,
            ..ProbeConfig::default()
        };
        let probe = fit_probe(&x, &y, 2, &cfg).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(0, "probe-init", &[]));
        assert_eq!(probe.layer, LinearLayer::init(3, 2, &mut init_rng).unwrap());
        assert!(probe.loss_history.is_empty());
    }

    #[test]
    fn top5_lists_are_ranked_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::matrix(10, 4, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y: Vec<usize> = (0..10).map(|i| i % 7).collect();
        let cfg = ProbeConfig {
            epochs: 2,
            ..ProbeConfig::default()
        };
        let probe = fit_probe(&x, &y, 7, &cfg).unwrap();
        let probs = probe.probabilities(&x).unwrap();
        for (p, top) in probs.iter().zip(probe.top5(&x).unwrap()) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(top.len(), TOP_K);
            assert!(top.windows(2).all(|w| p[w[0]] >= p[w[1]]));
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let x = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let err = fit_probe(&x, &[0, 2], 2, &ProbeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { index: 1, .. }));
    }
}
