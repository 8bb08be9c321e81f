//! Normalized cross- and auto-correlation matrices and the
//! pseudo-whitening target built from them.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var, NORM_EPS};

/// Tolerance on `|C_ij| <= 1` accepted when wrapping computed matrices.
pub const BOUND_SLACK: f64 = 1e-9;

/// Square matrix of normalized correlations, entries in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    entries: Tensor,
}

impl CorrelationMatrix {
    pub fn new(entries: Tensor) -> Result<Self> {
        if !entries.is_matrix() || entries.rows() != entries.cols() {
            return Err(Error::InvalidShape {
                shape: entries.shape().to_vec(),
                reason: "correlation matrix must be square".into(),
            });
        }
        if let Some(v) = entries.data().iter().find(|v| v.abs() > 1.0 + BOUND_SLACK) {
            return Err(Error::Invalid(format!(
                "correlation entry {v} outside [-1, 1]"
            )));
        }
        Ok(CorrelationMatrix { entries })
    }

    pub fn identity(dim: usize) -> Self {
        CorrelationMatrix {
            entries: Tensor::eye(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries.get(i, j)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let d = self.dim();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in i + 1..d {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.max_asymmetry() <= tol
    }

    /// Row-major CSV with 17 significant digits per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.dim() {
            for (j, v) in self.entries.row_slice(i).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn check_batch(op: &'static str, tape: &Tape, z: Var) -> Result<()> {
    let shape = tape.shape(z);
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects [rows, dims]"),
        });
    }
    if shape[0] < 2 {
        return Err(Error::TooFewRows {
            op,
            needed: 2,
            got: shape[0],
        });
    }
    Ok(())
}

/// `C_ij = Σ_m a_mi b_mj / (‖a_i‖ ‖b_j‖ + ε)` over column-centred inputs.
///
/// Differentiable in both arguments. A zero-norm column yields a zero
/// row (or column) instead of NaN.
pub fn cross_correlation_var(tape: &mut Tape, za: Var, zb: Var) -> Result<Var> {
    check_batch("cross_correlation", tape, za)?;
    check_batch("cross_correlation", tape, zb)?;
    if tape.shape(za)[0] != tape.shape(zb)[0] {
        return Err(Error::ShapeMismatch {
            op: "cross_correlation",
            lhs: tape.shape(za).to_vec(),
            rhs: tape.shape(zb).to_vec(),
        });
    }
    let centre = |tape: &mut Tape, z: Var| -> Result<Var> {
        let m = tape.col_mean(z)?;
        tape.sub(z, m)
    };
    let ca = centre(tape, za)?;
    let cb = centre(tape, zb)?;
    let na = tape.col_norm(ca)?;
    let nb = tape.col_norm(cb)?;
    let cat = tape.transpose(ca)?;
    let numer = tape.matmul(cat, cb)?;
    let nat = tape.transpose(na)?;
    let outer = tape.matmul(nat, nb)?;
    let denom = tape.add_scalar(outer, NORM_EPS)?;
    tape.div(numer, denom)
}

/// Auto-correlation of a stacked batch: the cross-correlation of `z` with
/// itself.
pub fn auto_correlation_var(tape: &mut Tape, z: Var) -> Result<Var> {
    check_batch("auto_correlation", tape, z)?;
    cross_correlation_var(tape, z, z)
}

/// Cross-correlation of plain tensors (no gradient tracking).
pub fn cross_correlation(za: &Tensor, zb: &Tensor) -> Result<CorrelationMatrix> {
    let mut tape = Tape::new();
    let a = tape.constant(za.clone());
    let b = tape.constant(zb.clone());
    let c = cross_correlation_var(&mut tape, a, b)?;
    CorrelationMatrix::new(tape.value(c).clone())
}

pub fn auto_correlation(z: &Tensor) -> Result<CorrelationMatrix> {
    let mut tape = Tape::new();
    let a = tape.constant(z.clone());
    let c = auto_correlation_var(&mut tape, a)?;
    CorrelationMatrix::new(tape.value(c).clone())
}

/// Pseudo-whitening target `I + β·offdiag(C2)`.
///
/// The target is a constant: it never carries gradient back into the
/// matrix it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMatrix {
    entries: Tensor,
    /// Source correlations with the diagonal zeroed, before scaling.
    source_offdiag: Tensor,
    beta: f64,
}

impl TargetMatrix {
    pub fn dim(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn source_offdiag(&self) -> &Tensor {
        &self.source_offdiag
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Strict whitening target (identity).
    pub fn identity(dim: usize) -> Self {
        TargetMatrix {
            entries: Tensor::eye(dim),
            source_offdiag: Tensor::zeros([dim, dim]),
            beta: 0.0,
        }
    }
}

pub fn build_target(c2: &CorrelationMatrix, beta: f64) -> TargetMatrix {
    let d = c2.dim();
    let mut source = c2.entries().clone();
    for i in 0..d {
        source.set(i, i, 0.0);
    }
    let mut entries = source.map(|v| beta * v);
    for i in 0..d {
        entries.set(i, i, 1.0);
    }
    TargetMatrix {
        entries,
        source_offdiag: source,
        beta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::zscore_normalize;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Algorithm-style route: z-score each side, then `AᵀB / N`.
    fn zscore_route(za: &Tensor, zb: &Tensor) -> Tensor {
        let a = zscore_normalize(za).unwrap();
        let b = zscore_normalize(zb).unwrap();
        let n = za.rows() as f64;
        let (d1, d2) = (za.cols(), zb.cols());
        let mut out = Tensor::zeros([d1, d2]);
        for i in 0..d1 {
            for j in 0..d2 {
                let s: f64 = (0..za.rows()).map(|r| a.get(r, i) * b.get(r, j)).sum();
                out.set(i, j, s / n);
            }
        }
        out
    }

    #[test]
    fn hand_computed_cross_correlation() {
        let z = m(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        let c = cross_correlation(&z, &z).unwrap();
        let expected = m(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        assert!(c.entries().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn orthogonal_columns_give_zero() {
        let za = m(&[&[1.0], &[-1.0], &[1.0], &[-1.0]]);
        let zb = m(&[&[1.0], &[1.0], &[-1.0], &[-1.0]]);
        assert_eq!(cross_correlation(&za, &zb).unwrap().get(0, 0), 0.0);
        let z = m(&[&[1.0, 1.0], &[-1.0, 1.0], &[1.0, -1.0], &[-1.0, -1.0]]);
        let c = auto_correlation(&z).unwrap();
        assert!(c.entries().max_abs_diff(&Tensor::eye(2)) < 1e-12);
    }

    #[test]
    fn anticorrelated_columns() {
        let z = m(&[&[1.0, -1.0], &[2.0, -2.0], &[-0.5, 0.5]]);
        let c = auto_correlation(&z).unwrap();
        assert!((c.get(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_column_gives_zero_row() {
        let z = m(&[&[1.0, 3.0], &[2.0, 3.0], &[4.0, 3.0]]);
        let c = auto_correlation(&z).unwrap();
        assert_eq!(c.get(1, 0), 0.0);
        assert_eq!(c.get(1, 1), 0.0);
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let z = m(&[&[1.0, 2.0]]);
        assert!(matches!(auto_correlation(&z), Err(Error::TooFewRows { .. })));
        assert!(matches!(cross_correlation(&z, &z), Err(Error::TooFewRows { .. })));
    }

    #[test]
    fn target_examples() {
        let c2 = CorrelationMatrix::new(m(&[&[0.9, 0.3], &[0.3, 0.9]])).unwrap();
        let t = build_target(&c2, 0.01);
        assert!(t.entries().max_abs_diff(&m(&[&[1.0, 0.003], &[0.003, 1.0]])) < 1e-15);
        assert_eq!(build_target(&c2, 0.0).entries(), &Tensor::eye(2));
        let id = CorrelationMatrix::identity(3);
        assert_eq!(build_target(&id, 0.5).entries(), &Tensor::eye(3));
    }

    #[test]
    fn csv_dump_round_trips_digits() {
        let c = CorrelationMatrix::new(m(&[&[1.0, 0.1 + 0.2], &[-1.0 / 3.0, 1.0]])).unwrap();
        let csv = c.to_csv();
        let parsed: Vec<f64> = csv
            .lines()
            .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(parsed, c.entries().data());
    }

    fn batch(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn norm_ratio_equals_zscore_route(za in batch(9, 4), zb in batch(9, 4)) {
            let c = cross_correlation(&za, &zb).unwrap();
            prop_assert!(c.entries().max_abs_diff(&zscore_route(&za, &zb)) < 1e-10);
        }

        #[test]
        fn entries_are_bounded_and_scale_free(za in batch(6, 3), zb in batch(6, 3), a in 0.01f64..50.0, b in 0.01f64..50.0) {
            let c = cross_correlation(&za, &zb).unwrap();
            prop_assert!(c.entries().data().iter().all(|v| v.abs() <= 1.0 + 1e-9));
            let scaled = cross_correlation(&za.map(|v| a * v), &zb.map(|v| b * v)).unwrap();
            prop_assert!(c.entries().max_abs_diff(scaled.entries()) < 1e-10);
        }

        #[test]
        fn auto_matches_self_cross(z in batch(8, 5)) {
            let a = auto_correlation(&z).unwrap();
            let c = cross_correlation(&z, &z).unwrap();
            prop_assert!(a.entries().max_abs_diff(c.entries()) < 1e-12);
            prop_assert!(a.is_symmetric(1e-12));
            for i in 0..5 {
                prop_assert!((a.get(i, i) - 1.0).abs() < 1e-9);
            }
        }
    }
}
