use serde::{Deserialize, Serialize};

/// Learning-rate schedules for the two training regimes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Constant `warmup_lr` for the first `warmup_epochs`, then `main_lr`.
    Warmup {
        warmup_epochs: usize,
        warmup_lr: f64,
        main_lr: f64,
    },
    /// Geometric decay from `start` at epoch 0 to `end` at the last epoch.
    ExponentialDecay { start: f64, end: f64, epochs: usize },
}

impl LrSchedule {
    /// Self-supervised pretraining recipe: 20 warm-up epochs at 0.15, then 1e-3.
    pub fn pretraining() -> Self {
        LrSchedule::Warmup {
            warmup_epochs: 20,
            warmup_lr: 0.15,
            main_lr: 1e-3,
        }
    }

    /// Linear-probe recipe: 1e-3 decaying to 1e-6.
    pub fn probe(epochs: usize) -> Self {
        LrSchedule::ExponentialDecay {
            start: 1e-3,
            end: 1e-6,
            epochs,
        }
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Warmup {
                warmup_epochs,
                warmup_lr,
                main_lr,
            } => {
                if epoch < warmup_epochs {
                    warmup_lr
                } else {
                    main_lr
                }
            }
            LrSchedule::ExponentialDecay { start, end, epochs } => {
                if epochs <= 1 {
                    return start;
                }
                let t = (epoch.min(epochs - 1)) as f64 / (epochs - 1) as f64;
                start * (end / start).powf(t)
            }
        }
    }
}
