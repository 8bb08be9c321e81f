//! Desk-scale networks: an MLP encoder, the three-layer projector head
//! and a mirrored autoencoder.

pub mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{BatchNormLayer, LinearLayer, Mode};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use layers::check_dims;

/// Anything with an ordered list of trainable tensors.
///
/// `parameters`, `parameters_mut` and `parameter_names` must agree in
/// order; forward passes receive their bound [`Var`]s in that order.
pub trait Module {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
    fn parameter_names(&self) -> Vec<String>;

    /// Non-trainable state that still has to be persisted.
    fn buffers(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    /// Registers every parameter on `tape`.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}

/// Layer sizes shared by every network of a block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub input_dim: usize,
    /// Hidden widths of the encoder between input and representation.
    pub encoder_hidden: Vec<usize>,
    /// Representation size `H` consumed by the probe.
    pub representation_dim: usize,
    /// Embedding size `D` of the projector and of the autoencoder latent.
    pub embedding_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: 32,
            encoder_hidden: vec![256, 128],
            representation_dim: 64,
            embedding_dim: 32,
        }
    }
}

impl Architecture {
    /// `[input, hidden..., representation]`.
    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.encoder_hidden);
        dims.push(self.representation_dim);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(&self.encoder_dims())?;
        check_dims(&[self.embedding_dim])
    }
}

fn layer_params(layers: &[LinearLayer]) -> Vec<&Tensor> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

fn layer_params_mut(layers: &mut [LinearLayer]) -> Vec<&mut Tensor> {
    layers
        .iter_mut()
        .flat_map(|l| [&mut l.weight, &mut l.bias])
        .collect()
}

fn layer_names(prefix: &str, count: usize) -> Vec<String> {
    (0..count)
        .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
        .collect()
}

fn check_input(op: &'static str, tape: &Tape, x: Var, dim: usize) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != dim {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![shape.first().copied().unwrap_or(0), dim],
        });
    }
    Ok(())
}

/// Linear+ReLU stack standing in for a convolutional backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet {
    pub layers: Vec<LinearLayer>,
}

impl EncoderNet {
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("encoder needs at least input and output dims".into()));
        }
        check_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::init(w[0], w[1], &mut rng))
            .collect::<Result<_>>()?;
        Ok(EncoderNet { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, LinearLayer::out_dim)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(LinearLayer::out_dim));
        d
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        check_input("encoder_forward", tape, x, self.input_dim())?;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(tape, params[2 * i], params[2 * i + 1], h)?;
            h = tape.relu(y)?;
        }
        Ok(h)
    }

    /// Representation of `x` without gradient tracking.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let h = self.forward(&mut tape, &params, xv)?;
        Ok(tape.value(h).clone())
    }
}

impl Module for EncoderNet {
    fn parameters(&self) -> Vec<&Tensor> {
        layer_params(&self.layers)
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        layer_params_mut(&mut self.layers)
    }
    fn parameter_names(&self) -> Vec<String> {
        layer_names("encoder", self.layers.len())
    }
}

/// Three equal-width linear layers; batch norm and ReLU follow the first
/// two, the third is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorHead {
    pub layers: [LinearLayer; 3],
    pub norms: [BatchNormLayer; 2],
}

impl ProjectorHead {
    pub fn init(in_dim: usize, width: usize, seed: u64) -> Result<Self> {
        check_dims(&[in_dim, width])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ProjectorHead {
            layers: [
                LinearLayer::init(in_dim, width, &mut rng)?,
                LinearLayer::init(width, width, &mut rng)?,
                LinearLayer::init(width, width, &mut rng)?,
            ],
            norms: [BatchNormLayer::new(width)?, BatchNormLayer::new(width)?],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[2].out_dim()
    }

    // Parameter layout: [l0.w, l0.b, bn0.g, bn0.b, l1.w, l1.b, bn1.g, bn1.b, l2.w, l2.b]
    pub fn forward_train(&mut self, tape: &mut Tape, params: &[Var], h: Var) -> Result<Var> {
        check_input("projector_forward", tape, h, self.input_dim())?;
        let n = tape.shape(h)[0];
        if n < 2 {
            return Err(Error::TooFewRows {
                op: "projector_forward (train)",
                needed: 2,
                got: n,
            });
        }
        let mut x = h;
        for i in 0..2 {
            let y = self.layers[i].forward(tape, params[4 * i], params[4 * i + 1], x)?;
            let y = self.norms[i].forward_train(tape, params[4 * i + 2], params[4 * i + 3], y)?;
            x = tape.relu(y)?;
        }
        self.layers[2].forward(tape, params[8], params[9], x)
    }

    pub fn forward_eval(&self, tape: &mut Tape, params: &[Var], h: Var) -> Result<Var> {
        check_input("projector_forward", tape, h, self.input_dim())?;
        let mut x = h;
        for i in 0..2 {
            let y = self.layers[i].forward(tape, params[4 * i], params[4 * i + 1], x)?;
            let y = self.norms[i].forward_eval(tape, params[4 * i + 2], params[4 * i + 3], y)?;
            x = tape.relu(y)?;
        }
        self.layers[2].forward(tape, params[8], params[9], x)
    }

    pub fn forward(&mut self, tape: &mut Tape, params: &[Var], h: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Train => self.forward_train(tape, params, h),
            Mode::Eval => self.forward_eval(tape, params, h),
        }
    }
}

impl Module for ProjectorHead {
    fn parameters(&self) -> Vec<&Tensor> {
        let [l0, l1, l2] = &self.layers;
        let [n0, n1] = &self.norms;
        vec![
            &l0.weight, &l0.bias, &n0.gamma, &n0.beta, &l1.weight, &l1.bias, &n1.gamma,
            &n1.beta, &l2.weight, &l2.bias,
        ]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let [l0, l1, l2] = &mut self.layers;
        let [n0, n1] = &mut self.norms;
        vec![
            &mut l0.weight,
            &mut l0.bias,
            &mut n0.gamma,
            &mut n0.beta,
            &mut l1.weight,
            &mut l1.bias,
            &mut n1.gamma,
            &mut n1.beta,
            &mut l2.weight,
            &mut l2.bias,
        ]
    }
    fn parameter_names(&self) -> Vec<String> {
        [
            "projector.0.weight",
            "projector.0.bias",
            "projector.bn0.gamma",
            "projector.bn0.beta",
            "projector.1.weight",
            "projector.1.bias",
            "projector.bn1.gamma",
            "projector.bn1.beta",
            "projector.2.weight",
            "projector.2.bias",
        ]
        .map(String::from)
        .to_vec()
    }
    fn buffers(&self) -> Vec<&Tensor> {
        self.norms
            .iter()
            .flat_map(|n| [&n.running_mean, &n.running_var])
            .collect()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.norms
            .iter_mut()
            .flat_map(|n| [&mut n.running_mean, &mut n.running_var])
            .collect()
    }
}

/// Autoencoder whose encoder repeats the [`EncoderNet`] topology plus one
/// linear layer into a latent of size `D`; the decoder reverses every size.
///
/// Hidden layers use ReLU. The latent layer and the final reconstruction
/// layer are linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub encoder: Vec<LinearLayer>,
    pub decoder: Vec<LinearLayer>,
}

impl Autoencoder {
    /// `encoder_dims` is `[input, hidden..., representation]`.
    pub fn init(encoder_dims: &[usize], latent_dim: usize, seed: u64) -> Result<Self> {
        if encoder_dims.len() < 2 {
            return Err(Error::Config("autoencoder needs at least two encoder dims".into()));
        }
        check_dims(encoder_dims)?;
        check_dims(&[latent_dim])?;
        let mut dims = encoder_dims.to_vec();
        dims.push(latent_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = dims
            .windows(2)
            .map(|w| LinearLayer::init(w[0], w[1], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        dims.reverse();
        let decoder = dims
            .windows(2)
            .map(|w| LinearLayer::init(w[0], w[1], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Autoencoder { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().map_or(0, LinearLayer::out_dim)
    }

    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.encoder.iter().map(LinearLayer::out_dim));
        d
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.decoder[0].in_dim()];
        d.extend(self.decoder.iter().map(LinearLayer::out_dim));
        d
    }

    fn run_stack(
        tape: &mut Tape,
        layers: &[LinearLayer],
        params: &[Var],
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            h = layer.forward(tape, params[2 * i], params[2 * i + 1], h)?;
            if i != last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Returns `(latent, reconstruction)`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<(Var, Var)> {
        check_input("autoencoder_forward", tape, x, self.input_dim())?;
        let split = 2 * self.encoder.len();
        let latent = Self::run_stack(tape, &self.encoder, &params[..split], x)?;
        let recon = Self::run_stack(tape, &self.decoder, &params[split..], latent)?;
        Ok((latent, recon))
    }

    /// Latent code of `x` without gradient tracking.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (latent, _) = self.forward(&mut tape, &params, xv)?;
        Ok(tape.value(latent).clone())
    }
}

impl Module for Autoencoder {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = layer_params(&self.encoder);
        p.extend(layer_params(&self.decoder));
        p
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = layer_params_mut(&mut self.encoder);
        p.extend(layer_params_mut(&mut self.decoder));
        p
    }
    fn parameter_names(&self) -> Vec<String> {
        let mut n = layer_names("ae.encoder", self.encoder.len());
        n.extend(layer_names("ae.decoder", self.decoder.len()));
        n
    }
}
