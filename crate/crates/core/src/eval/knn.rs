use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::vote::TOP_K;

pub const DEFAULT_K: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct KnnPrediction {
    pub label: usize,
    /// Neighbor labels best-first: by count, then summed distance, then
    /// label.
    pub ranking: Vec<usize>,
}

/// Rows scaled to unit Euclidean norm; zero rows stay zero.
pub fn l2_normalize_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(c) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Tensor::matrix(t.rows(), c, data).expect("shape preserved")
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `k`-nearest-neighbour classification on L2-normalized embeddings.
///
/// Neighbours are the `k` smallest Euclidean distances (equal distances go
/// to the lower training index).
pub fn knn_predict(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    k: usize,
) -> Result<Vec<KnnPrediction>> {
    if train_labels.is_empty() {
        return Err(Error::Invalid("knn needs a non-empty training set".into()));
    }
    if k == 0 || k > train_labels.len() {
        return Err(Error::Invalid(format!(
            "k = {k} must lie in [1, {}]",
            train_labels.len()
        )));
    }
    if train.rows() != train_labels.len() || train.cols() != test.cols() {
        return Err(Error::ShapeMismatch {
            op: "knn",
            lhs: train.shape().to_vec(),
            rhs: test.shape().to_vec(),
        });
    }
    let train = l2_normalize_rows(train);
    let test = l2_normalize_rows(test);
    let mut out = Vec::with_capacity(test.rows());
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(train.rows());
    for i in 0..test.rows() {
        let q = test.row_slice(i);
        dists.clear();
        dists.extend((0..train.rows()).map(|j| (squared_distance(q, train.row_slice(j)).sqrt(), j)));
        dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let neighbours = &mut dists[..k];
        neighbours.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        // (count, summed distance) per label, in first-seen order.
        let mut tally: Vec<(usize, usize, f64)> = Vec::new();
        for &(d, j) in neighbours.iter() {
            let label = train_labels[j];
            match tally.iter_mut().find(|t| t.0 == label) {
                Some(t) => {
                    t.1 += 1;
                    t.2 += d;
                }
                None => tally.push((label, 1, d)),
            }
        }
        tally.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
        let ranking: Vec<usize> = tally.iter().take(TOP_K).map(|t| t.0).collect();
        out.push(KnnPrediction {
            label: ranking[0],
            ranking,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive reference: full sort of all distances, explicit votes.
    fn brute_force(train: &Tensor, labels: &[usize], test: &Tensor, k: usize, classes: usize) -> Vec<usize> {
        let normalize = |v: &[f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect::<Vec<_>>()
        };
        (0..test.rows())
            .map(|i| {
                let q = normalize(test.row_slice(i));
                let mut all: Vec<(f64, usize)> = (0..train.rows())
                    .map(|j| {
                        let t = normalize(train.row_slice(j));
                        let d = q.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                        (d, j)
                    })
                    .collect();
                all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let mut count = vec![0usize; classes];
                let mut dist = vec![0.0f64; classes];
                for &(d, j) in &all[..k] {
                    count[labels[j]] += 1;
                    dist[labels[j]] += d;
                }
                (0..classes)
                    .filter(|&c| count[c] > 0)
                    .min_by(|&a, &b| count[b].cmp(&count[a]).then(dist[a].partial_cmp(&dist[b]).unwrap()).then(a.cmp(&b)))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_on_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            let (n, m, d, classes) = (50, 30, 6, 4);
            let train = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let test = Tensor::matrix(m, d, (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let k = 1 + trial % 7;
            let got: Vec<usize> = knn_predict(&train, &labels, &test, k).unwrap().iter().map(|p| p.label).collect();
            assert_eq!(got, brute_force(&train, &labels, &test, k, classes));
        }
    }

    #[test]
    fn exact_match_with_k1() {
        let train = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5]]).unwrap();
        let test = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        let p = knn_predict(&train, &[3, 1, 2], &test, 1).unwrap();
        assert_eq!(p[0].label, 1);
    }

    #[test]
    fn ties_prefer_closer_then_smaller_label() {
        // Two neighbours of label 1 and two of label 0; label 0's are closer.
        let train = Tensor::from_rows(&[[1.0, 0.01], [1.0, -0.01], [1.0, 0.3], [1.0, -0.3]]).unwrap();
        let test = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let p = knn_predict(&train, &[0, 0, 1, 1], &test, 4).unwrap();
        assert_eq!(p[0].label, 0);
        assert_eq!(p[0].ranking, [0, 1]);
    }

    #[test]
    fn invalid_inputs() {
        let t = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(knn_predict(&t, &[0], &t, 2).is_err());
        assert!(knn_predict(&t, &[], &t, 1).is_err());
    }
}
