use crate::correlation::{
    auto_correlation, auto_correlation_var, build_target, cross_correlation, cross_correlation_var,
    CorrelationMatrix,
};
use crate::error::{Error, Result};
use crate::losses::{
    barlow_twins_loss, efficient_loss, gaussian_reference, pseudo_whitening_loss,
    reconstruction_loss, regularized_bt_loss, total_loss, BlockMode, LossBreakdown, WhiteningTerms,
};
use crate::nets::{Autoencoder, EncoderNet, Module, ProjectorHead};
use crate::numerics::{AdamConfig, AdamState, Gradients, Tape, Tensor, Var};
use crate::seed::{derive_seed, stream};

use super::config::{Objective, ReferenceSource, TrainConfig};

/// One ensemble member: encoder + projector (optionally an untied twin for
/// the second view), its autoencoders and optimizer states.
#[derive(Clone, Debug)]
pub struct GuessBlock {
    pub block_id: usize,
    pub seed: u64,
    pub encoder: EncoderNet,
    pub projector: ProjectorHead,
    pub twin: Option<(EncoderNet, ProjectorHead)>,
    pub autoencoders: Vec<Autoencoder>,
    /// Fixed off-diagonal reference for the regularized Barlow Twins loss.
    pub reference: Option<Tensor>,
    pub(crate) net_opt: AdamState,
    pub(crate) ae_opt: AdamState,
}

/// Step outputs beyond the loss values.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// Network correlation matrix (cross- or auto-) at this step.
    pub correlation: Tensor,
}

impl GuessBlock {
    pub fn block_seed(run_seed: u64, block_id: usize) -> u64 {
        derive_seed(run_seed, "block", &[block_id as u64])
    }

    pub fn init(config: &TrainConfig, block_id: usize) -> Result<Self> {
        config.validate()?;
        let seed = Self::block_seed(config.seed, block_id);
        let arch = &config.architecture;
        let dims = arch.encoder_dims();
        let d = arch.embedding_dim;
        let net = |tag: &str| -> Result<(EncoderNet, ProjectorHead)> {
            Ok((
                EncoderNet::init(&dims, derive_seed(seed, tag, &[0]))?,
                ProjectorHead::init(arch.representation_dim, d, derive_seed(seed, tag, &[1]))?,
            ))
        };
        let (encoder, projector) = net("network")?;
        let twin = if config.tied_weights { None } else { Some(net("twin")?) };
        let autoencoders = (0..config.autoencoders_per_block())
            .map(|i| Autoencoder::init(&dims, d, derive_seed(seed, "autoencoder", &[i as u64])))
            .collect::<Result<Vec<_>>>()?;
        let reference = match config.objective {
            Objective::RegularizedBt {
                reference: ReferenceSource::Gaussian,
                ..
            } => Some(gaussian_reference(d, &mut stream(seed, "gaussian-reference", &[]))),
            _ => None,
        };
        let adam = AdamConfig {
            learning_rate: config.main_lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        };
        let mut block = GuessBlock {
            block_id,
            seed,
            encoder,
            projector,
            twin,
            autoencoders,
            reference,
            net_opt: AdamState::new([], adam),
            ae_opt: AdamState::new([], adam),
        };
        block.net_opt = AdamState::new(block.network_parameters(), adam);
        block.ae_opt = AdamState::new(block.autoencoder_parameters(), adam);
        Ok(block)
    }

    pub fn network_parameters(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.parameters();
        p.extend(self.projector.parameters());
        if let Some((e, h)) = &self.twin {
            p.extend(e.parameters());
            p.extend(h.parameters());
        }
        p
    }

    pub fn network_parameter_names(&self) -> Vec<String> {
        let mut n = self.encoder.parameter_names();
        n.extend(self.projector.parameter_names());
        if let Some((e, h)) = &self.twin {
            n.extend(e.parameter_names().into_iter().map(|s| format!("twin.{s}")));
            n.extend(h.parameter_names().into_iter().map(|s| format!("twin.{s}")));
        }
        n
    }

    pub fn autoencoder_parameters(&self) -> Vec<&Tensor> {
        self.autoencoders.iter().flat_map(|a| a.parameters()).collect()
    }

    pub fn autoencoder_parameter_names(&self) -> Vec<String> {
        autoencoder_names(&self.autoencoders)
    }

    /// Batch-norm running statistics of every projector.
    pub fn buffers(&self) -> Vec<&Tensor> {
        let mut b = self.projector.buffers();
        if let Some((_, h)) = &self.twin {
            b.extend(h.buffers());
        }
        b
    }

    pub(crate) fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut b = self.projector.buffers_mut();
        if let Some((_, h)) = &mut self.twin {
            b.extend(h.buffers_mut());
        }
        b
    }

    pub fn buffer_names(&self) -> Vec<String> {
        let prefixes: &[&str] = if self.twin.is_some() { &["", "twin."] } else { &[""] };
        prefixes
            .iter()
            .flat_map(|prefix| {
                (0..2).flat_map(move |i| {
                    [
                        format!("{prefix}projector.bn{i}.running_mean"),
                        format!("{prefix}projector.bn{i}.running_var"),
                    ]
                })
            })
            .collect()
    }

    /// Replaces parameters and buffers, in the order of the accessors.
    pub(crate) fn overwrite(&mut self, net: Vec<Tensor>, buffers: Vec<Tensor>, aes: Vec<Tensor>) {
        for (p, v) in self.buffers_mut().into_iter().zip(buffers) {
            *p = v;
        }
        let GuessBlock {
            encoder,
            projector,
            twin,
            autoencoders,
            ..
        } = self;
        for (p, v) in net_params_mut(encoder, projector, twin).into_iter().zip(net) {
            *p = v;
        }
        for (p, v) in autoencoders.iter_mut().flat_map(|a| a.parameters_mut()).zip(aes) {
            *p = v;
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.net_opt.set_learning_rate(lr);
        self.ae_opt.set_learning_rate(lr);
    }

    /// Representation `H` of `x` from the (first) encoder.
    pub fn represent(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.encode(x)
    }

    /// Runs one view through the network path; `second` selects the twin.
    fn embed(&mut self, tape: &mut Tape, params: &[Var], x: Var, second: bool) -> Result<Var> {
        let enc_n = self.encoder.parameters().len();
        let proj_n = self.projector.parameters().len();
        match (&mut self.twin, second) {
            (Some((e, h)), true) => {
                let base = enc_n + proj_n;
                let hid = e.forward(tape, &params[base..base + enc_n], x)?;
                h.forward_train(tape, &params[base + enc_n..base + enc_n + proj_n], hid)
            }
            _ => {
                let hid = self.encoder.forward(tape, &params[..enc_n], x)?;
                self.projector.forward_train(tape, &params[enc_n..enc_n + proj_n], hid)
            }
        }
    }

    fn reconstruction(&self, tape: &mut Tape, x: Var, recon: Var, normalize: bool) -> Result<Var> {
        let recon = if normalize { tape.zscore(recon)? } else { recon };
        reconstruction_loss(tape, x, recon)
    }

    /// One optimizer step on a view pair.
    pub fn train_step(&mut self, view_a: &Tensor, view_b: &Tensor, config: &TrainConfig) -> Result<StepOutput> {
        for v in [view_a, view_b] {
            if !v.is_matrix() || v.cols() != config.architecture.input_dim {
                return Err(Error::InvalidShape {
                    shape: v.shape().to_vec(),
                    reason: format!("views must be [N, {}]", config.architecture.input_dim),
                });
            }
            if v.rows() < 2 {
                return Err(Error::TooFewRows {
                    op: "train_block_step",
                    needed: 2,
                    got: v.rows(),
                });
            }
        }
        if view_a.shape() != view_b.shape() {
            return Err(Error::ShapeMismatch {
                op: "train_block_step",
                lhs: view_a.shape().to_vec(),
                rhs: view_b.shape().to_vec(),
            });
        }

        let mut tape = Tape::new();
        let net_vars: Vec<Var> = self.network_parameters().into_iter().map(|p| tape.leaf(p.clone())).collect();
        let train_ae = config.trains_autoencoders();
        let ae_vars: Vec<Vec<Var>> = self
            .autoencoders
            .iter()
            .map(|a| a.bind(&mut tape, train_ae))
            .collect();

        let (terms, correlation, recon_a, recon_b) = match config.mode {
            BlockMode::Ensemble => {
                let xa = tape.constant(view_a.clone());
                let xb = tape.constant(view_b.clone());
                let za = self.embed(&mut tape, &net_vars, xa, false)?;
                let zb = self.embed(&mut tape, &net_vars, xb, true)?;
                let c1 = cross_correlation_var(&mut tape, za, zb)?;
                let (terms, recon_a, recon_b) = match config.objective {
                    Objective::Guess => {
                        let (la, ra) = self.autoencoders[0].forward(&mut tape, &ae_vars[0], xa)?;
                        let (lb, rb) = self.autoencoders[1].forward(&mut tape, &ae_vars[1], xb)?;
                        let c2 = cross_correlation(tape.value(la), tape.value(lb))?;
                        let target = build_target(&c2, config.beta);
                        let terms = pseudo_whitening_loss(&mut tape, c1, &target, config.form)?;
                        let rec_a = self.reconstruction(&mut tape, xa, ra, config.normalize_reconstruction)?;
                        let rec_b = self.reconstruction(&mut tape, xb, rb, config.normalize_reconstruction)?;
                        (terms, Some(rec_a), Some(rec_b))
                    }
                    _ => (self.bt_terms(&mut tape, c1, config)?, None, None),
                };
                (terms, c1, recon_a, recon_b)
            }
            BlockMode::Efficient => {
                let stacked = Tensor::vstack(&[view_a, view_b])?;
                let x = tape.constant(stacked);
                let z = self.embed(&mut tape, &net_vars, x, false)?;
                let c = auto_correlation_var(&mut tape, z)?;
                let (terms, recon) = match config.objective {
                    Objective::Guess => {
                        let (l, r) = self.autoencoders[0].forward(&mut tape, &ae_vars[0], x)?;
                        let c2 = auto_correlation(tape.value(l))?;
                        let terms = efficient_loss(&mut tape, c, &c2, config.beta, config.form)?;
                        let rec = self.reconstruction(&mut tape, x, r, config.normalize_reconstruction)?;
                        (terms, Some(rec))
                    }
                    _ => (self.bt_terms(&mut tape, c, config)?, None),
                };
                (terms, c, recon, None)
            }
        };

        let mut loss = terms.total;
        let recon_sum = match (recon_a, recon_b) {
            (Some(a), Some(b)) => Some(tape.add(a, b)?),
            (Some(a), None) => Some(a),
            _ => None,
        };
        if let Some(r) = recon_sum {
            let weighted = tape.scale(r, config.alpha)?;
            loss = tape.add(loss, weighted)?;
        }
        let (whitening, diag, offdiag) = terms.values(&tape);
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let breakdown = total_loss(whitening, value(recon_a), value(recon_b), config.alpha, diag, offdiag);
        let correlation = tape.value(correlation).clone();

        let grads = tape.backward(loss)?;
        self.apply(&grads, &net_vars, &ae_vars, train_ae)?;
        Ok(StepOutput { breakdown, correlation })
    }

    fn bt_terms(&self, tape: &mut Tape, c: Var, config: &TrainConfig) -> Result<WhiteningTerms> {
        match config.objective {
            Objective::BarlowTwins { lambda } => barlow_twins_loss(tape, c, lambda),
            Objective::RegularizedBt { lambda, .. } => {
                let g = self
                    .reference
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("regularized loss needs a reference matrix; run autoencoder pretraining first".into()))?;
                regularized_bt_loss(tape, c, g, lambda)
            }
            Objective::Guess => unreachable!("handled by the caller"),
        }
    }

    fn apply(&mut self, grads: &Gradients, net_vars: &[Var], ae_vars: &[Vec<Var>], train_ae: bool) -> Result<()> {
        let net_grads: Vec<Tensor> = net_vars
            .iter()
            .zip(self.network_parameters())
            .map(|(&v, p)| grads.get_or_zeros(v, p))
            .collect();
        let names = self.network_parameter_names();
        let GuessBlock {
            encoder,
            projector,
            twin,
            autoencoders,
            net_opt,
            ae_opt,
            ..
        } = self;
        net_opt.step(&mut net_params_mut(encoder, projector, twin), &net_grads, &names)?;
        if train_ae {
            let ae_grads: Vec<Tensor> = ae_vars
                .iter()
                .flatten()
                .zip(autoencoders.iter().flat_map(|a| a.parameters()))
                .map(|(&v, p)| grads.get_or_zeros(v, p))
                .collect();
            let names = autoencoder_names(autoencoders);
            let mut params: Vec<&mut Tensor> = autoencoders.iter_mut().flat_map(|a| a.parameters_mut()).collect();
            ae_opt.step(&mut params, &ae_grads, &names)?;
        }
        Ok(())
    }

    /// Latent cross-correlation (ensemble) or auto-correlation (efficient)
    /// of the block's autoencoders on a view pair, without gradients.
    pub fn autoencoder_correlation(&self, view_a: &Tensor, view_b: &Tensor, mode: BlockMode) -> Result<CorrelationMatrix> {
        match mode {
            BlockMode::Ensemble => {
                let la = self.autoencoders[0].encode(view_a)?;
                let lb = self.autoencoders[1].encode(view_b)?;
                cross_correlation(&la, &lb)
            }
            BlockMode::Efficient => {
                let l = self.autoencoders[0].encode(&Tensor::vstack(&[view_a, view_b])?)?;
                auto_correlation(&l)
            }
        }
    }
}

fn net_params_mut<'a>(
    encoder: &'a mut EncoderNet,
    projector: &'a mut ProjectorHead,
    twin: &'a mut Option<(EncoderNet, ProjectorHead)>,
) -> Vec<&'a mut Tensor> {
    let mut params = encoder.parameters_mut();
    params.extend(projector.parameters_mut());
    if let Some((e, h)) = twin {
        params.extend(e.parameters_mut());
        params.extend(h.parameters_mut());
    }
    params
}

fn autoencoder_names(aes: &[Autoencoder]) -> Vec<String> {
    aes.iter()
        .enumerate()
        .flat_map(|(i, a)| a.parameter_names().into_iter().map(move |s| format!("ae{i}.{s}")))
        .collect()
}

/// `train_step` as a free function.
pub fn train_block_step(
    block: &mut GuessBlock,
    view_a: &Tensor,
    view_b: &Tensor,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    block.train_step(view_a, view_b, config).map(|o| o.breakdown)
}
