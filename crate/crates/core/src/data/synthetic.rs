use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split};
use crate::augment::InputLayout;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed::stream;

const CENTER_ATTEMPTS: usize = 1000;

fn normal(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian class clusters in a signal subspace, padded with pure-noise
/// nuisance coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Minimum pairwise distance between class centers.
    pub separation: f64,
    /// Within-class standard deviation in the signal subspace.
    pub sigma: f64,
    /// Trailing coordinates that carry no class information.
    pub nuisance_dim: usize,
    pub nuisance_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            num_classes: 4,
            samples_per_class: 500,
            input_dim: 32,
            separation: 3.0,
            sigma: 1.0,
            nuisance_dim: 24,
            nuisance_sigma: 3.0,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic dataset: {m}")));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.samples_per_class < 5 {
            return bad("samples_per_class must be at least 5");
        }
        if self.nuisance_dim >= self.input_dim {
            return bad("nuisance_dim must leave at least one signal dimension");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation must be positive");
        }
        if !(self.sigma >= 0.0 && self.nuisance_sigma >= 0.0 && self.sigma.is_finite() && self.nuisance_sigma.is_finite()) {
            return bad("sigmas must be finite and non-negative");
        }
        Ok(())
    }

    pub fn signal_dim(&self) -> usize {
        self.input_dim - self.nuisance_dim
    }

    /// Per-class train count; the rest of each class goes to test.
    pub fn train_per_class(&self) -> usize {
        (self.samples_per_class * 4 + 2) / 5
    }
}

fn sample_centers(spec: &SyntheticDatasetSpec) -> Result<Vec<Vec<f64>>> {
    let mut rng = stream(spec.seed, "synthetic-centers", &[]);
    let dim = spec.signal_dim();
    // Spread scaled so that random draws usually clear the separation.
    let spread = spec.separation * (spec.num_classes as f64).sqrt();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for class in 0..spec.num_classes {
        let mut placed = false;
        for _ in 0..CENTER_ATTEMPTS {
            let c: Vec<f64> = (0..dim)
                .map(|_| spread * normal(&mut rng) / (dim as f64).sqrt())
                .collect();
            let clear = centers.iter().all(|o| {
                o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= spec.separation
            });
            if clear {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place class {class} at separation {} in {dim} signal dimensions",
                spec.separation
            )));
        }
    }
    Ok(centers)
}

/// Balanced 80/20 split of seeded Gaussian clusters.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<Split> {
    spec.validate()?;
    let centers = sample_centers(spec)?;
    let mut rng = stream(spec.seed, "synthetic-samples", &[]);
    let train_n = spec.train_per_class();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, center) in centers.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let mut x: Vec<f64> = center
                .iter()
                .map(|&m| m + spec.sigma * normal(&mut rng))
                .collect();
            x.extend((0..spec.nuisance_dim).map(|_| spec.nuisance_sigma * normal(&mut rng)));
            if i < train_n {
                train.push((x, class));
            } else {
                test.push((x, class));
            }
        }
    }
    let mut order = stream(spec.seed, "synthetic-order", &[]);
    train.shuffle(&mut order);
    test.shuffle(&mut order);
    let build = |rows: Vec<(Vec<f64>, usize)>| -> Result<LabeledDataset> {
        let n = rows.len();
        let labels = rows.iter().map(|r| r.1).collect();
        let data = rows.into_iter().flat_map(|r| r.0).collect();
        LabeledDataset::new(
            Tensor::matrix(n, spec.input_dim, data)?,
            labels,
            spec.num_classes,
            InputLayout::Vector,
        )
    };
    Ok(Split {
        train: build(train)?,
        test: build(test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let spec = SyntheticDatasetSpec::default();
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        assert_eq!(a.train.len(), 1600);
        assert_eq!(a.test.len(), 400);
        assert_eq!(a.train.class_counts(), [400; 4]);
        assert_eq!(a.test.class_counts(), [100; 4]);
        let other = generate_synthetic(&SyntheticDatasetSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train.inputs, other.train.inputs);
    }

    #[test]
    fn centers_respect_separation() {
        let spec = SyntheticDatasetSpec {
            num_classes: 6,
            separation: 5.0,
            ..SyntheticDatasetSpec::default()
        };
        let c = sample_centers(&spec).unwrap();
        for i in 0..6 {
            for j in i + 1..6 {
                let d: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d >= 5.0);
            }
        }
    }

    #[test]
    fn infeasible_separation_is_an_error() {
        // Forty centers three units apart do not fit on a line at this spread.
        let spec = SyntheticDatasetSpec {
            num_classes: 40,
            samples_per_class: 5,
            input_dim: 2,
            nuisance_dim: 1,
            ..SyntheticDatasetSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = SyntheticDatasetSpec::default();
        assert!(SyntheticDatasetSpec { nuisance_dim: 32, ..base.clone() }.validate().is_err());
        assert!(SyntheticDatasetSpec { separation: 0.0, ..base.clone() }.validate().is_err());
        assert!(SyntheticDatasetSpec { num_classes: 1, ..base }.validate().is_err());
    }
}
