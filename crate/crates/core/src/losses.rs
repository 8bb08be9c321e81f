//! Objectives: pseudo-whitening (two forms), reconstruction, the
//! efficient auto-correlation variant, Barlow Twins and its regularized
//! form with an arbitrary off-diagonal reference `G`.
//!
//! Every whitening-style loss here is one kernel,
//! `Σ_i (C_ii − 1)² + w · Σ_{i≠j} (C_ij − R_ij)²`, with a different
//! off-diagonal reference `R` and weight `w`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::correlation::{build_target, CorrelationMatrix, TargetMatrix};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Which reading of the pseudo-whitening objective to optimize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningForm {
    /// `Σ_ij (C1_ij − T_ij)²` against `T = I + β·offdiag(C2)`.
    #[default]
    Algorithm1,
    /// `Σ_i (1 − C1_ii)² + β · Σ_{i≠j} (C1_ij − C2_ij)²`.
    Equation1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    /// Two views through the network pair and two autoencoders.
    #[default]
    Ensemble,
    /// Both views stacked through one network and one autoencoder.
    Efficient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_bt: f64,
    pub form: WhiteningForm,
    pub mode: BlockMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.2,
            beta: 0.01,
            lambda_bt: 0.005,
            form: WhiteningForm::Algorithm1,
            mode: BlockMode::Ensemble,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_bt", self.lambda_bt),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar components of one step's objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub whitening: f64,
    pub diag_term: f64,
    pub offdiag_term: f64,
    pub recon_a: f64,
    pub recon_b: f64,
}

/// Tape handles for a whitening-style loss.
#[derive(Clone, Copy, Debug)]
pub struct WhiteningTerms {
    pub diag: Var,
    pub offdiag: Var,
    pub total: Var,
}

impl WhiteningTerms {
    pub fn values(&self, tape: &Tape) -> (f64, f64, f64) {
        (
            tape.value(self.total).item(),
            tape.value(self.diag).item(),
            tape.value(self.offdiag).item(),
        )
    }
}

fn masks(d: usize) -> (Tensor, Tensor) {
    let diag = Tensor::eye(d);
    let off = diag.map(|v| 1.0 - v);
    (diag, off)
}

/// `Σ_i (C_ii − 1)² + weight · Σ_{i≠j} (C_ij − reference_ij)²`.
/// The diagonal of `reference` is ignored.
fn whitening_kernel(tape: &mut Tape, c: Var, reference: &Tensor, weight: f64) -> Result<WhiteningTerms> {
    let shape = tape.shape(c).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || reference.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "whitening_loss",
            lhs: shape,
            rhs: reference.shape().to_vec(),
        });
    }
    let d = shape[0];
    let mut target = reference.clone();
    for i in 0..d {
        target.set(i, i, 1.0);
    }
    let (diag_mask, off_mask) = masks(d);
    let target = tape.constant(target);
    let diag_mask = tape.constant(diag_mask);
    let off_mask = tape.constant(off_mask);

    let diff = tape.sub(c, target)?;
    let sq = tape.pow(diff, 2.0)?;
    let on = tape.mul(sq, diag_mask)?;
    let diag = tape.sum(on)?;
    let off = tape.mul(sq, off_mask)?;
    let off = tape.sum(off)?;
    let offdiag = tape.scale(off, weight)?;
    let total = tape.add(diag, offdiag)?;
    Ok(WhiteningTerms {
        diag,
        offdiag,
        total,
    })
}

/// Pseudo-whitening loss of the network correlation `c1` against `target`.
/// Gradient flows into `c1` only.
pub fn pseudo_whitening_loss(
    tape: &mut Tape,
    c1: Var,
    target: &TargetMatrix,
    form: WhiteningForm,
) -> Result<WhiteningTerms> {
    match form {
        WhiteningForm::Algorithm1 => whitening_kernel(tape, c1, target.entries(), 1.0),
        WhiteningForm::Equation1 => {
            whitening_kernel(tape, c1, target.source_offdiag(), target.beta())
        }
    }
}

/// Efficient-ensemble loss: the pseudo-whitening kernel applied to the
/// network auto-correlation `c_prime` and the autoencoder auto-correlation
/// `c_double_prime`.
pub fn efficient_loss(
    tape: &mut Tape,
    c_prime: Var,
    c_double_prime: &CorrelationMatrix,
    beta: f64,
    form: WhiteningForm,
) -> Result<WhiteningTerms> {
    const SYMMETRY_TOL: f64 = 1e-9;
    let cp = CorrelationMatrix::new(tape.value(c_prime).clone())?;
    for (name, m) in [("C'", &cp), ("C''", c_double_prime)] {
        let asym = m.max_asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(Error::Invalid(format!(
                "efficient_loss: {name} is not an auto-correlation (asymmetry {asym:e})"
            )));
        }
    }
    let target = build_target(c_double_prime, beta);
    pseudo_whitening_loss(tape, c_prime, &target, form)
}

/// Sum of squared differences over the whole batch.
pub fn reconstruction_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_hat) {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_loss",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(x_hat).to_vec(),
        });
    }
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.pow(diff, 2.0)?;
    tape.sum(sq)
}

/// `total = whitening + α·(recon_a + recon_b)`.
pub fn total_loss(
    whitening: f64,
    recon_a: f64,
    recon_b: f64,
    alpha: f64,
    diag_term: f64,
    offdiag_term: f64,
) -> LossBreakdown {
    LossBreakdown {
        total: whitening + alpha * (recon_a + recon_b),
        whitening,
        diag_term,
        offdiag_term,
        recon_a,
        recon_b,
    }
}

/// `Σ_i (1 − C_ii)² + λ · Σ_{i≠j} C_ij²`.
pub fn barlow_twins_loss(tape: &mut Tape, c: Var, lambda: f64) -> Result<WhiteningTerms> {
    let d = tape.shape(c).first().copied().unwrap_or(0);
    whitening_kernel(tape, c, &Tensor::zeros([d.max(1), d.max(1)]), lambda)
}

/// `Σ_i (1 − C_ii)² + λ · Σ_{i≠j} (C_ij − G_ij)²`; `G`'s diagonal is ignored.
pub fn regularized_bt_loss(tape: &mut Tape, c: Var, g: &Tensor, lambda: f64) -> Result<WhiteningTerms> {
    whitening_kernel(tape, c, g, lambda)
}

/// Symmetric reference with i.i.d. standard-normal upper triangle, mirrored
/// below, zero diagonal.
pub fn gaussian_reference(dim: usize, rng: &mut impl Rng) -> Tensor {
    let mut g = Tensor::zeros([dim, dim]);
    for i in 0..dim {
        for j in i + 1..dim {
            let v: f64 = rng.sample(StandardNormal);
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::cross_correlation_var;
    use crate::numerics::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn corr(rows: &[&[f64]]) -> CorrelationMatrix {
        CorrelationMatrix::new(m(rows)).unwrap()
    }

    fn eval(c: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<WhiteningTerms>) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(c.clone());
        let terms = f(&mut tape, v).unwrap();
        tape.value(terms.total).item()
    }

    /// Squared Frobenius distance to the identity, computed directly.
    fn frob_to_identity(c: &Tensor) -> f64 {
        let d = c.rows();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                let t = if i == j { 1.0 } else { 0.0 };
                s += (c.get(i, j) - t).powi(2);
            }
        }
        s
    }

    #[test]
    fn perfect_fit_is_zero() {
        let c2 = corr(&[&[1.0, 0.4], &[0.4, 1.0]]);
        let target = build_target(&c2, 0.01);
        let v = eval(target.entries(), |t, c| {
            pseudo_whitening_loss(t, c, &target, WhiteningForm::Algorithm1)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn algorithm1_examples() {
        let c1 = m(&[&[1.0, 0.1], &[0.1, 1.0]]);
        let id = build_target(&CorrelationMatrix::identity(2), 0.0);
        let v = eval(&c1, |t, c| pseudo_whitening_loss(t, c, &id, WhiteningForm::Algorithm1));
        assert!((v - 0.02).abs() < 1e-15);

        let c2 = corr(&[&[1.0, 0.3], &[0.3, 1.0]]);
        let target = build_target(&c2, 0.01);
        let v = eval(&c1, |t, c| pseudo_whitening_loss(t, c, &target, WhiteningForm::Algorithm1));
        assert!((v - 2.0 * (0.1f64 - 0.003).powi(2)).abs() < 1e-15);
        assert!((v - 0.018818).abs() < 1e-12);
    }

    #[test]
    fn equation1_weights_unscaled_residual() {
        let c1 = m(&[&[0.9, 0.1], &[0.1, 1.0]]);
        let c2 = corr(&[&[1.0, 0.3], &[0.3, 1.0]]);
        let target = build_target(&c2, 0.01);
        let v = eval(&c1, |t, c| pseudo_whitening_loss(t, c, &target, WhiteningForm::Equation1));
        let expected = 0.1f64.powi(2) + 0.01 * 2.0 * (0.1f64 - 0.3).powi(2);
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0]).unwrap());
        let z = tape.constant(Tensor::row(vec![0.0, 0.0]).unwrap());
        let l = reconstruction_loss(&mut tape, x, z).unwrap();
        assert_eq!(tape.value(l).item(), 5.0);
        let same = reconstruction_loss(&mut tape, x, x).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        let delta = tape.constant(Tensor::row(vec![0.5, -1.5]).unwrap());
        let double = tape.scale(delta, 2.0).unwrap();
        let zero = tape.constant(Tensor::row(vec![0.0, 0.0]).unwrap());
        let l1 = reconstruction_loss(&mut tape, delta, zero).unwrap();
        let l2 = reconstruction_loss(&mut tape, double, zero).unwrap();
        assert_eq!(tape.value(l2).item(), 4.0 * tape.value(l1).item());
        let bad = tape.constant(Tensor::zeros([2, 1]));
        assert!(reconstruction_loss(&mut tape, x, bad).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let b = total_loss(1.0, 0.5, 0.5, 0.2, 0.0, 0.0);
        assert!((b.total - 1.2).abs() < 1e-15);
        assert_eq!(total_loss(3.0, 7.0, 1.0, 0.0, 0.0, 0.0).total, 3.0);
        assert_eq!(LossConfig::default().alpha, 0.2);
        assert_eq!(LossConfig::default().beta, 0.01);
    }

    #[test]
    fn efficient_loss_examples() {
        let cdd = corr(&[&[1.0, 0.5, -0.2], &[0.5, 1.0, 0.1], &[-0.2, 0.1, 1.0]]);
        let target = build_target(&cdd, 0.01);
        let v = eval(target.entries(), |t, c| {
            efficient_loss(t, c, &cdd, 0.01, WhiteningForm::Algorithm1)
        });
        assert_eq!(v, 0.0);
        let v = eval(&Tensor::eye(3), |t, c| {
            efficient_loss(t, c, &cdd, 0.0, WhiteningForm::Algorithm1)
        });
        assert_eq!(v, 0.0);

        let cp = m(&[&[1.0, 0.2, 0.0], &[0.2, 1.0, -0.3], &[0.0, -0.3, 1.0]]);
        for form in [WhiteningForm::Algorithm1, WhiteningForm::Equation1] {
            let a = eval(&cp, |t, c| efficient_loss(t, c, &cdd, 0.05, form));
            let b = eval(&cp, |t, c| pseudo_whitening_loss(t, c, &build_target(&cdd, 0.05), form));
            assert!((a - b).abs() < 1e-12);
        }

        let asym = m(&[&[1.0, 0.2], &[0.1, 1.0]]);
        let mut tape = Tape::new();
        let c = tape.constant(asym);
        let cdd2 = CorrelationMatrix::identity(2);
        assert!(efficient_loss(&mut tape, c, &cdd2, 0.01, WhiteningForm::Algorithm1).is_err());
    }

    #[test]
    fn barlow_twins_examples() {
        assert_eq!(eval(&Tensor::eye(3), |t, c| barlow_twins_loss(t, c, 0.005)), 0.0);
        let c = m(&[&[1.0, 0.1], &[0.1, 1.0]]);
        let v = eval(&c, |t, c| barlow_twins_loss(t, c, 0.005));
        assert!((v - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn regularized_bt_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = gaussian_reference(4, &mut rng);
        for i in 0..4 {
            assert_eq!(g.get(i, i), 0.0);
            for j in 0..4 {
                assert_eq!(g.get(i, j), g.get(j, i));
            }
        }
        let v = eval(&Tensor::eye(4), |t, c| regularized_bt_loss(t, c, &g, 0.005));
        let expected = 0.005 * g.data().iter().map(|x| x * x).sum::<f64>();
        assert!((v - expected).abs() < 1e-14);
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::eye(2));
        assert!(regularized_bt_loss(&mut tape, c, &Tensor::zeros([2, 3]), 1.0).is_err());
    }

    #[test]
    fn whitening_term_gradient_passes_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let za = Tensor::matrix(10, 4, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let zb = Tensor::matrix(10, 4, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let c2 = corr(&[
            &[1.0, 0.3, -0.1, 0.2],
            &[0.3, 1.0, 0.4, 0.0],
            &[-0.1, 0.4, 1.0, 0.5],
            &[0.2, 0.0, 0.5, 1.0],
        ]);
        let target = build_target(&c2, 0.3);
        let g = gaussian_reference(4, &mut rng);
        let report = check_gradients(
            &[za, zb],
            |t, v| {
                let c = cross_correlation_var(t, v[0], v[1])?;
                let a = pseudo_whitening_loss(t, c, &target, WhiteningForm::Algorithm1)?;
                let b = pseudo_whitening_loss(t, c, &target, WhiteningForm::Equation1)?;
                let r = regularized_bt_loss(t, c, &g, 0.1)?;
                let bt = barlow_twins_loss(t, c, 0.005)?;
                let s = t.add(a.total, b.total)?;
                let s = t.add(s, r.total)?;
                t.add(s, bt.total)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    fn random_corr() -> impl Strategy<Value = Tensor> {
        (2usize..7).prop_flat_map(|d| {
            proptest::collection::vec(-1.0f64..1.0, d * d)
                .prop_map(move |v| Tensor::matrix(d, d, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn reduction_chain(c in random_corr(), lambda in 0.0f64..1.0) {
            let d = c.rows();
            let id = build_target(&CorrelationMatrix::identity(d), 0.0);
            let frob = frob_to_identity(&c);
            let pw = eval(&c, |t, v| pseudo_whitening_loss(t, v, &id, WhiteningForm::Algorithm1));
            let eq1 = eval(&c, |t, v| pseudo_whitening_loss(t, v, &id, WhiteningForm::Equation1));
            let bt1 = eval(&c, |t, v| barlow_twins_loss(t, v, 1.0));
            prop_assert!((pw - frob).abs() < 1e-12);
            prop_assert!((bt1 - frob).abs() < 1e-12);
            // Equation-1 form with beta = 0 drops the off-diagonal entirely.
            let diag_only: f64 = (0..d).map(|i| (1.0 - c.get(i, i)).powi(2)).sum();
            prop_assert!((eq1 - diag_only).abs() < 1e-12);

            let bt = eval(&c, |t, v| barlow_twins_loss(t, v, lambda));
            let reg = eval(&c, |t, v| regularized_bt_loss(t, v, &Tensor::zeros([d, d]), lambda));
            prop_assert!((bt - reg).abs() < 1e-12);
            prop_assert!(bt >= 0.0 && pw >= 0.0 && eq1 >= 0.0);
        }
    }
}
