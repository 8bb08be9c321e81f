use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Dense layer computing `x · Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

impl LinearLayer {
    /// Kaiming-uniform weights in `±sqrt(6 / in_dim)`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        check_dims(&[in_dim, out_dim])?;
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Ok(LinearLayer {
            weight: Tensor::from_parts(vec![out_dim, in_dim], weight),
            bias: Tensor::zeros([1, out_dim]),
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Result<Self> {
        check_dims(&[in_dim, out_dim])?;
        Ok(LinearLayer {
            weight: Tensor::zeros([out_dim, in_dim]),
            bias: Tensor::zeros([1, out_dim]),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `weight` and `bias` must be this layer's bound parameters.
    pub fn forward(&self, tape: &mut Tape, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let x_shape = tape.shape(x);
        if x_shape.len() != 2 || x_shape[1] != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: x_shape.to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let wt = tape.transpose(weight)?;
        let y = tape.matmul(x, wt)?;
        tape.add(y, bias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over the rows of a `[n, d]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Result<Self> {
        check_dims(&[dim])?;
        Ok(BatchNormLayer {
            gamma: Tensor::full([1, dim], 1.0),
            beta: Tensor::zeros([1, dim]),
            running_mean: Tensor::zeros([1, dim]),
            running_var: Tensor::full([1, dim], 1.0),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.cols()
    }

    /// Normalizes with batch statistics and folds them into the running
    /// estimates (unbiased variance, as is conventional).
    pub fn forward_train(&mut self, tape: &mut Tape, gamma: Var, beta: Var, x: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        if n < 2 {
            return Err(Error::TooFewRows {
                op: "batch_norm (train)",
                needed: 2,
                got: n,
            });
        }
        let mean = tape.col_mean(x)?;
        let centred = tape.sub(x, mean)?;
        let sq = tape.pow(centred, 2.0)?;
        let var = tape.col_mean(sq)?;
        let shifted = tape.add_scalar(var, self.eps)?;
        let denom = tape.sqrt(shifted)?;
        let normed = tape.div(centred, denom)?;
        let scaled = tape.mul(normed, gamma)?;
        let out = tape.add(scaled, beta)?;

        let m = self.momentum;
        let unbias = n as f64 / (n as f64 - 1.0);
        let batch_mean = tape.value(mean).data().to_vec();
        let batch_var = tape.value(var).data().to_vec();
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&batch_var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
        Ok(out)
    }

    /// Normalizes with the running statistics; touches no state.
    pub fn forward_eval(&self, tape: &mut Tape, gamma: Var, beta: Var, x: Var) -> Result<Var> {
        let mean = tape.constant(self.running_mean.clone());
        let denom = tape.constant(self.running_var.map(|v| (v + self.eps).sqrt()));
        let centred = tape.sub(x, mean)?;
        let normed = tape.div(centred, denom)?;
        let scaled = tape.mul(normed, gamma)?;
        tape.add(scaled, beta)
    }
}

pub(crate) fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("layer dimensions must be positive, got {dims:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = LinearLayer::init(20, 7, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = LinearLayer::init(20, 7, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = LinearLayer::init(20, 7, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weight, c.weight);
        let bound = (6.0f64 / 20.0).sqrt();
        assert!(a.weight.data().iter().all(|w| w.abs() <= bound));
        assert!(a.bias.data().iter().all(|&b| b == 0.0));
        assert!(LinearLayer::init(0, 3, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn batch_norm_train_centres_columns() {
        let mut bn = BatchNormLayer::new(3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::from_rows(&[[1.0, 5.0, -2.0], [2.0, 7.0, 0.0], [6.0, 0.0, 4.0]]).unwrap(),
        );
        let g = tape.leaf(bn.gamma.clone());
        let b = tape.leaf(bn.beta.clone());
        let y = bn.forward_train(&mut tape, g, b, x).unwrap();
        let means = crate::numerics::tape::column_means(tape.value(y));
        assert!(means.data().iter().all(|m| m.abs() < 1e-12));
        assert_ne!(bn.running_mean, Tensor::zeros([1, 3]));

        let one = tape.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
        assert!(matches!(
            bn.forward_train(&mut tape, g, b, one),
            Err(Error::TooFewRows { .. })
        ));
    }
}
