//! KNN classification under a learned metric and the scores reported by the
//! experiment harness.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::nca::MahalanobisMetric;
use crate::neighbors::k_nearest;
use crate::posterior::PredictiveDistribution;

/// Default threshold below which the true class earns no modified-MAP credit.
pub const DEFAULT_TAU: f64 = 0.01;

/// Geometry used by [`knn_classify`].
#[derive(Debug, Clone, Copy)]
pub enum MetricSpace<'a> {
    Euclidean,
    /// Rows map a point to its coordinates; distance is Euclidean there.
    Projection(&'a DMatrix<f64>),
    Mahalanobis(&'a MahalanobisMetric),
}

impl MetricSpace<'_> {
    pub fn sq_dist(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        match self {
            MetricSpace::Euclidean => (x - y).norm_squared(),
            MetricSpace::Projection(p) => (*p * (x - y)).norm_squared(),
            MetricSpace::Mahalanobis(m) => m.sq_dist(x, y),
        }
    }

    /// Maps every row of `points` into a space where plain Euclidean distance
    /// equals this metric, when such a map is available.
    pub fn embed(&self, points: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        match self {
            MetricSpace::Euclidean => Some(points.clone()),
            MetricSpace::Projection(p) => Some(points * p.transpose()),
            MetricSpace::Mahalanobis(_) => None,
        }
    }
}

/// Majority vote among the `k` nearest training points. Vote ties go to the
/// class with the smaller summed squared distance, then to the lower class
/// index. Neighbour ties go to the lower training index.
pub fn knn_classify(train: &Dataset, query: &DVector<f64>, k: usize, space: MetricSpace<'_>) -> Result<usize> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    check_dim(train.dim(), query.len())?;
    if k < 1 || k > train.len() {
        return Err(Error::InvalidArgument(format!(
            "knn k={k} must lie in [1, {}]",
            train.len()
        )));
    }
    let mut scored: Vec<(f64, usize)> = (0..train.len())
        .map(|j| (space.sq_dist(query, &train.point(j)), j))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let neighbours: Vec<(f64, usize)> = scored.into_iter().take(k).map(|(d, j)| (d, train.label(j))).collect();
    Ok(vote(&neighbours, train.class_count()))
}

/// Classifies every row of `queries` with Euclidean KNN against
/// `train_coords` (already embedded).
pub fn knn_classify_embedded(
    train_coords: &DMatrix<f64>,
    train_labels: &[usize],
    class_count: usize,
    queries: &DMatrix<f64>,
    k: usize,
    exclude_self: bool,
) -> Result<Vec<usize>> {
    check_dim(train_coords.nrows(), train_labels.len())?;
    check_dim(train_coords.ncols(), queries.ncols())?;
    let available = train_coords.nrows() - usize::from(exclude_self);
    if k < 1 || k > available {
        return Err(Error::InvalidArgument(format!(
            "knn k={k} must lie in [1, {available}]"
        )));
    }
    Ok(queries
        .row_iter()
        .enumerate()
        .map(|(qi, row)| {
            let q = row.transpose();
            let ids = k_nearest(train_coords, &q, k, exclude_self.then_some(qi));
            let neighbours: Vec<(f64, usize)> = ids
                .iter()
                .map(|&j| ((train_coords.row(j).transpose() - &q).norm_squared(), train_labels[j]))
                .collect();
            vote(&neighbours, class_count)
        })
        .collect())
}

fn vote(neighbours: &[(f64, usize)], class_count: usize) -> usize {
    let mut counts = vec![0usize; class_count];
    let mut sums = vec![0.0f64; class_count];
    for &(d, y) in neighbours {
        counts[y] += 1;
        sums[y] += d;
    }
    (0..class_count)
        .filter(|&c| counts[c] > 0)
        .min_by(|&a, &b| {
            counts[b]
                .cmp(&counts[a])
                .then(sums[a].total_cmp(&sums[b]))
                .then(a.cmp(&b))
        })
        .unwrap_or(0)
}

/// Fraction of matching entries.
pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    check_dim(truths.len(), predictions.len())?;
    if truths.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Modified mean average precision.
///
/// Each sample scores `1 / rank` of its true class in the predicted class
/// ranking (ties to the lower class index), but only when the true class
/// receives probability above `tau`; the result is the mean over samples.
pub fn modified_map(predictives: &[PredictiveDistribution], truths: &[usize], tau: f64) -> Result<f64> {
    check_dim(truths.len(), predictives.len())?;
    if truths.is_empty() {
        return Err(Error::InvalidArgument("modified MAP of an empty set".into()));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1), got {tau}")));
    }
    let mut total = 0.0;
    for (p, &y) in predictives.iter().zip(truths) {
        if y >= p.class_count() {
            return Err(Error::InvalidArgument(format!(
                "true class {y} outside a {}-class distribution",
                p.class_count()
            )));
        }
        if p.probs()[y] > tau {
            let rank = p.ranking().iter().position(|&c| c == y).unwrap_or(0) + 1;
            total += 1.0 / rank as f64;
        }
    }
    Ok(total / truths.len() as f64)
}

/// Outcome of a paired one-tailed t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    /// `P(T >= t)` under `H0`, for `H1: mean(a) > mean(b)`.
    pub p_value: f64,
    pub t_statistic: f64,
    /// All differences were zero; `p_value` is 0.5 by convention.
    pub degenerate: bool,
}

/// Paired one-tailed t-test of `mean(a) > mean(b)` with `n - 1` degrees of
/// freedom.
pub fn paired_one_tail_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    check_dim(a.len(), b.len())?;
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("paired test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired test scores"));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(PairedTest {
            p_value: 0.5,
            t_statistic: 0.0,
            degenerate: true,
        });
    }
    let se = (var / n as f64).sqrt();
    let t = if se > 0.0 {
        mean / se
    } else {
        mean.signum() * f64::INFINITY
    };
    let dist =
        StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    let p_value = if t == f64::INFINITY {
        0.0
    } else if t == f64::NEG_INFINITY {
        1.0
    } else {
        dist.sf(t)
    };
    Ok(PairedTest {
        p_value,
        t_statistic: t,
        degenerate: false,
    })
}

/// Scores of one method under one condition across repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed_scores: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator; 0 for one score).
    pub std: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p_value_vs_baseline: Option<f64>,
}

impl EvalReport {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let n = scores.len();
        let mean = if n == 0 {
            0.0
        } else {
            scores.iter().sum::<f64>() / n as f64
        };
        let std = if n < 2 {
            0.0
        } else {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            per_seed_scores: scores,
            mean,
            std,
            p_value_vs_baseline: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn line(xs: &[f64], labels: Vec<usize>, c: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        Dataset::from_rows(&rows, labels, c).unwrap()
    }

    #[test]
    fn one_nn_takes_nearest_label() {
        let ds = line(&[0.0, 1.0, 5.0], vec![0, 1, 2], 3);
        assert_eq!(knn_classify(&ds, &dvector![4.0], 1, MetricSpace::Euclidean).unwrap(), 2);
        assert_eq!(knn_classify(&ds, &dvector![0.4], 1, MetricSpace::Euclidean).unwrap(), 0);
    }

    #[test]
    fn unanimous_neighbours() {
        let ds = line(&[0.0, 0.1, 0.2, 9.0], vec![1, 1, 1, 0], 2);
        assert_eq!(
            knn_classify(&ds, &dvector![0.05], 3, MetricSpace::Euclidean).unwrap(),
            1
        );
    }

    #[test]
    fn two_two_tie_goes_to_closer_class() {
        // class 1 neighbours at 0.5 and 0.6, class 0 neighbours at 0.4 and 1.0
        let ds = line(&[0.4, -1.0, 0.5, -0.6], vec![0, 0, 1, 1], 2);
        // squared sums: class 0 -> 0.16 + 1.0 = 1.16, class 1 -> 0.25 + 0.36 = 0.61
        assert_eq!(knn_classify(&ds, &dvector![0.0], 4, MetricSpace::Euclidean).unwrap(), 1);
        // exact tie in counts and sums falls back to the lower class
        let sym = line(&[1.0, -1.0], vec![1, 0], 2);
        assert_eq!(
            knn_classify(&sym, &dvector![0.0], 2, MetricSpace::Euclidean).unwrap(),
            0
        );
    }

    #[test]
    fn knn_errors() {
        let ds = line(&[0.0, 1.0], vec![0, 1], 2);
        assert!(knn_classify(&ds, &dvector![0.0], 3, MetricSpace::Euclidean).is_err());
        assert!(knn_classify(&ds, &dvector![0.0, 1.0], 1, MetricSpace::Euclidean).is_err());
    }

    #[test]
    fn projection_space_matches_embedding() {
        let p = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let space = MetricSpace::Projection(&p);
        assert_eq!(space.sq_dist(&dvector![5.0, 1.0], &dvector![0.0, 0.0]), 4.0);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        let truth = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let mut pred = truth;
        pred[0] = 1;
        pred[3] = 0;
        pred[5] = 0;
        assert!((accuracy(&pred, &truth).unwrap() - 0.7).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    fn dist(p: &[f64]) -> PredictiveDistribution {
        PredictiveDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn modified_map_cases() {
        let ps = vec![dist(&[0.9, 0.1]), dist(&[0.2, 0.8])];
        assert_eq!(modified_map(&ps, &[0, 1], 0.01).unwrap(), 1.0);
        assert_eq!(modified_map(&ps, &[1, 0], 0.5).unwrap(), 0.0);
        let ps = vec![dist(&[0.7, 0.3]), dist(&[0.6, 0.4])];
        assert!((modified_map(&ps, &[0, 1], 0.01).unwrap() - 0.75).abs() < 1e-15);
        assert!(modified_map(&ps, &[0, 1], 1.0).is_err());
        assert!(modified_map(&ps, &[0, 5], 0.01).is_err());
    }

    #[test]
    fn t_test_cases() {
        let a = [0.7, 0.8, 0.75];
        let t = paired_one_tail_test(&a, &a).unwrap();
        assert!(t.degenerate && t.p_value == 0.5);
        let b: Vec<f64> = (0..10).map(|i| 60.0 + i as f64).collect();
        let a: Vec<f64> = b
            .iter()
            .enumerate()
            .map(|(i, v)| v + 10.0 + 1e-3 * (i % 3) as f64)
            .collect();
        assert!(paired_one_tail_test(&a, &b).unwrap().p_value < 1e-6);
        assert!(paired_one_tail_test(&[1.0], &[0.0]).is_err());
        let flat = [2.0, 2.0, 2.0];
        assert_eq!(paired_one_tail_test(&flat, &[1.0, 1.0, 1.0]).unwrap().p_value, 0.0);
    }

    #[test]
    fn report_statistics() {
        let r = EvalReport::from_scores(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.mean, 2.5);
        assert!((r.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(EvalReport::from_scores(vec![0.4]).std, 0.0);
    }
}
