use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationSpec;
use crate::error::{Error, Result};
use crate::losses::{BlockMode, WhiteningForm};
use crate::nets::Architecture;
use crate::numerics::LrSchedule;

/// Where the off-diagonal reference of the regularized Barlow Twins loss
/// comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// Latent cross-correlation of the block's pretrained (then frozen)
    /// autoencoder pair, measured once over one augmented pass of the
    /// training set.
    Autoencoders,
    /// Symmetric matrix with standard-normal off-diagonal entries.
    Gaussian,
}

/// What a block optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Pseudo-whitening against the autoencoder-derived target plus the
    /// weighted reconstruction loss.
    #[default]
    Guess,
    /// Plain redundancy reduction; autoencoders are not built.
    BarlowTwins { lambda: f64 },
    /// Barlow Twins with off-diagonals pulled toward a fixed reference.
    RegularizedBt { lambda: f64, reference: ReferenceSource },
}

impl Objective {
    pub fn uses_autoencoders(&self) -> bool {
        matches!(
            self,
            Objective::Guess
                | Objective::RegularizedBt {
                    reference: ReferenceSource::Autoencoders,
                    ..
                }
        )
    }

    pub fn label(&self) -> String {
        match self {
            Objective::Guess => "guess".into(),
            Objective::BarlowTwins { lambda } => format!("barlow_twins(lambda={lambda})"),
            Objective::RegularizedBt { lambda, reference } => {
                let src = match reference {
                    ReferenceSource::Autoencoders => "autoencoders",
                    ReferenceSource::Gaussian => "gaussian",
                };
                format!("regularized_bt(lambda={lambda}, reference={src})")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: BlockMode,
    pub blocks: usize,
    pub epochs: usize,
    pub ae_pretrain_epochs: usize,
    pub ae_pretrain_enabled: bool,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub form: WhiteningForm,
    pub objective: Objective,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub main_lr: f64,
    pub ae_warmup_epochs: usize,
    pub ae_warmup_lr: f64,
    pub ae_main_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub shared_views: bool,
    /// Both views share one encoder and projector; `false` gives view `b`
    /// its own, independently initialized pair.
    pub tied_weights: bool,
    /// Z-score reconstructions before comparing them with the input.
    pub normalize_reconstruction: bool,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub architecture: Architecture,
    pub augmentation: AugmentationSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: BlockMode::Ensemble,
            blocks: 1,
            epochs: 200,
            ae_pretrain_epochs: 250,
            ae_pretrain_enabled: true,
            batch_size: 128,
            alpha: 0.2,
            beta: 0.01,
            form: WhiteningForm::Algorithm1,
            objective: Objective::Guess,
            warmup_epochs: 4,
            warmup_lr: 0.15,
            main_lr: 1e-3,
            ae_warmup_epochs: 10,
            ae_warmup_lr: 0.1,
            ae_main_lr: 1e-3,
            weight_decay: 1e-6,
            seed: 0,
            shared_views: false,
            tied_weights: true,
            normalize_reconstruction: false,
            checkpoint_every: 0,
            architecture: Architecture::default(),
            augmentation: AugmentationSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.blocks == 0 {
            return bad("epochs and blocks must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("warmup_lr", self.warmup_lr),
            ("main_lr", self.main_lr),
            ("ae_warmup_lr", self.ae_warmup_lr),
            ("ae_main_lr", self.ae_main_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        match self.objective {
            Objective::BarlowTwins { lambda } | Objective::RegularizedBt { lambda, .. }
                if !(lambda >= 0.0 && lambda.is_finite()) =>
            {
                return bad(format!("lambda must be finite and >= 0, got {lambda}"));
            }
            _ => {}
        }
        if self.mode == BlockMode::Efficient && !self.tied_weights {
            return bad("efficient mode runs a single network; tied_weights must be true".into());
        }
        if self.architecture.embedding_dim < 2 {
            return bad("embedding_dim must be at least 2".into());
        }
        self.architecture.validate()?;
        self.augmentation.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::Warmup {
            warmup_epochs: self.warmup_epochs,
            warmup_lr: self.warmup_lr,
            main_lr: self.main_lr,
        }
    }

    pub fn ae_schedule(&self) -> LrSchedule {
        LrSchedule::Warmup {
            warmup_epochs: self.ae_warmup_epochs,
            warmup_lr: self.ae_warmup_lr,
            main_lr: self.ae_main_lr,
        }
    }

    pub fn autoencoders_per_block(&self) -> usize {
        match (self.objective.uses_autoencoders(), self.mode) {
            (false, _) => 0,
            (true, BlockMode::Ensemble) => 2,
            (true, BlockMode::Efficient) => 1,
        }
    }

    /// Whether the joint optimizer updates the autoencoders.
    pub fn trains_autoencoders(&self) -> bool {
        self.objective == Objective::Guess && self.alpha > 0.0
    }
}

/// SHA-256 (hex) of the canonical JSON serialization.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
