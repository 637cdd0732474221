//! Point-estimate neighbourhood component analysis.
//!
//! The metric is parameterised by a linear map `L` with `A = L^T L`, so the
//! squared distance is `|L (x_i - x_j)|^2` and `A` is PSD by construction.
//! Neighbour probabilities are a softmax over the frozen K-neighbour set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::linalg::min_eigenvalue;
use crate::neighbors::NeighborGraph;
use crate::posterior::PredictiveDistribution;

/// Objective floor for points without any same-label neighbour.
pub const EPS_FLOOR: f64 = 1e-12;

/// Symmetric PSD matrix `A` defining `d^2(x, y) = (x - y)^T A (x - y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisMetric {
    #[serde(with = "crate::linalg::row_major")]
    a: DMatrix<f64>,
}

impl MahalanobisMetric {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidArgument("metric matrix must be square".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metric matrix"));
        }
        if (&a - a.transpose()).abs().max() >= 1e-10 {
            return Err(Error::InvalidArgument("metric matrix is not symmetric".into()));
        }
        if min_eigenvalue(&a)? < -1e-8 {
            return Err(Error::NotPositiveDefinite("metric matrix has a negative eigenvalue"));
        }
        Ok(Self { a })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            a: DMatrix::identity(dim, dim),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn sq_dist(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let diff = x - y;
        diff.dot(&(&self.a * &diff))
    }
}

/// Linear map `L`; its metric is `L^T L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTransform(#[serde(with = "crate::linalg::row_major")] pub DMatrix<f64>);

impl LinearTransform {
    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn metric(&self) -> MahalanobisMetric {
        let mut a = self.0.tr_mul(&self.0);
        crate::linalg::symmetrize(&mut a);
        MahalanobisMetric { a }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `p[i][t]`: probability that point `i` picks its `t`-th listed neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborProbs {
    pub p: Vec<Vec<f64>>,
}

/// Numerically stable `softmax(-d2)`.
pub fn softmin(d2: &[f64]) -> Vec<f64> {
    let min = d2.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d2.iter().map(|d| (-(d - min)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn neighbor_sq_dists(ds: &Dataset, graph: &NeighborGraph, metric: &MahalanobisMetric) -> Result<Vec<Vec<f64>>> {
    graph.check_against(ds)?;
    check_dim(ds.dim(), metric.dim())?;
    let mut out = Vec::with_capacity(ds.len());
    for (i, ids) in graph.iter().enumerate() {
        let xi = ds.point(i);
        let d2: Vec<f64> = ids.iter().map(|&j| metric.sq_dist(&xi, &ds.point(j))).collect();
        if d2.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("neighbour distances"));
        }
        out.push(d2);
    }
    Ok(out)
}

/// `p_ij = exp(-d^2_ij) / sum_t exp(-d^2_it)` over each neighbour set.
pub fn neighbor_probs(ds: &Dataset, graph: &NeighborGraph, metric: &MahalanobisMetric) -> Result<NeighborProbs> {
    let d2 = neighbor_sq_dists(ds, graph, metric)?;
    Ok(NeighborProbs {
        p: d2.iter().map(|row| softmin(row)).collect(),
    })
}

fn log_sum_exp_neg(d2: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = d2.collect();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    -min + v.iter().map(|d| (-(d - min)).exp()).sum::<f64>().ln()
}

/// `L(A) = sum_i log(sum_{j in N_i} [y_i = y_j] p_ij)`.
///
/// The inner log is evaluated as a difference of log-sum-exps so it stays
/// finite when individual probabilities underflow. Points without any
/// same-label neighbour contribute `ln(EPS_FLOOR)`.
pub fn nca_objective(ds: &Dataset, graph: &NeighborGraph, metric: &MahalanobisMetric) -> Result<f64> {
    let d2 = neighbor_sq_dists(ds, graph, metric)?;
    let mut total = 0.0;
    for (i, ids) in graph.iter().enumerate() {
        let yi = ds.label(i);
        let same = ids
            .iter()
            .zip(&d2[i])
            .filter(|(&j, _)| ds.label(j) == yi)
            .map(|(_, &d)| d);
        let same: Vec<f64> = same.collect();
        total += if same.is_empty() {
            EPS_FLOOR.ln()
        } else {
            log_sum_exp_neg(same.into_iter()) - log_sum_exp_neg(d2[i].iter().copied())
        };
    }
    Ok(total)
}

/// Total and intra-class scatter terms of the NCA gradient.
///
/// `C_E = sum_i sum_j p_ij x_ij x_ij^T` and
/// `C_I = sum_i sum_j [y_ij] p_ij x_ij x_ij^T / sum_j [y_ij] p_ij`, both over
/// points that have at least one same-label neighbour.
pub fn scatter_terms(
    ds: &Dataset,
    graph: &NeighborGraph,
    metric: &MahalanobisMetric,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d2 = neighbor_sq_dists(ds, graph, metric)?;
    let dim = ds.dim();
    let mut total = DMatrix::zeros(dim, dim);
    let mut intra = DMatrix::zeros(dim, dim);
    for (i, ids) in graph.iter().enumerate() {
        let yi = ds.label(i);
        let same: Vec<usize> = (0..ids.len()).filter(|&t| ds.label(ids[t]) == yi).collect();
        if same.is_empty() {
            continue;
        }
        let p = softmin(&d2[i]);
        let same_d2: Vec<f64> = same.iter().map(|&t| d2[i][t]).collect();
        let q = softmin(&same_d2);
        let xi = ds.point(i);
        let diffs: Vec<DVector<f64>> = ids.iter().map(|&j| &xi - ds.point(j)).collect();
        for (t, diff) in diffs.iter().enumerate() {
            total.ger(p[t], diff, diff, 1.0);
        }
        for (s, &t) in same.iter().enumerate() {
            intra.ger(q[s], &diffs[t], &diffs[t], 1.0);
        }
    }
    Ok((total, intra))
}

/// Gradient of the NCA objective with respect to the transform `L`:
/// `2 L (C_E - C_I)`.
pub fn nca_gradient(ds: &Dataset, graph: &NeighborGraph, transform: &LinearTransform) -> Result<DMatrix<f64>> {
    check_dim(ds.dim(), transform.0.ncols())?;
    let (ce, ci) = scatter_terms(ds, graph, &transform.metric())?;
    Ok(2.0 * &transform.0 * (ce - ci))
}

/// Gradient of the NCA objective with respect to the metric matrix `A`:
/// `C_E - C_I` (symmetric).
pub fn nca_metric_gradient(ds: &Dataset, graph: &NeighborGraph, metric: &MahalanobisMetric) -> Result<DMatrix<f64>> {
    let (ce, ci) = scatter_terms(ds, graph, metric)?;
    Ok(ce - ci)
}

/// Gradient-ascent settings for [`train_nca`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NcaConfig {
    pub max_iters: usize,
    /// Armijo sufficient-increase constant.
    pub armijo: f64,
    /// Line search gives up below this step length.
    pub min_step: f64,
    /// Stop when the squared gradient norm falls below this.
    pub grad_tol: f64,
}

impl Default for NcaConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            armijo: 1e-4,
            min_step: 1e-14,
            grad_tol: 1e-20,
        }
    }
}

/// One accepted ascent step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcaIterate {
    pub iter: usize,
    pub objective: f64,
    pub step: f64,
    pub transform: LinearTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcaFit {
    pub transform: LinearTransform,
    pub objective: f64,
    pub initial_objective: f64,
    /// Accepted steps in order; empty when the initial point was stationary.
    pub trace: Vec<NcaIterate>,
}

impl NcaFit {
    pub fn metric(&self) -> MahalanobisMetric {
        self.transform.metric()
    }
}

/// Gradient ascent on the NCA objective with Armijo backtracking (step
/// halving). Each iteration starts from twice the previous accepted step.
/// Returns the best iterate seen.
pub fn train_nca(ds: &Dataset, graph: &NeighborGraph, init: LinearTransform, config: &NcaConfig) -> Result<NcaFit> {
    check_dim(ds.dim(), init.0.ncols())?;
    let objective = |l: &LinearTransform| nca_objective(ds, graph, &l.metric());
    let mut current = init;
    let mut f = objective(&current)?;
    if !f.is_finite() {
        return Err(Error::NonFinite("initial NCA objective"));
    }
    let initial_objective = f;
    let mut trace = Vec::new();
    let mut step: Option<f64> = None;

    for iter in 1..=config.max_iters {
        let grad = nca_gradient(ds, graph, &current)?;
        let gnorm2 = grad.norm_squared();
        if gnorm2 <= config.grad_tol {
            break;
        }
        let mut t = match step {
            Some(s) => 2.0 * s,
            None => 1.0 / gnorm2.sqrt().max(1.0),
        };
        let accepted = loop {
            if t < config.min_step {
                break None;
            }
            let candidate = LinearTransform(&current.0 + t * &grad);
            match objective(&candidate) {
                Ok(fc) if fc.is_finite() && fc >= f + config.armijo * t * gnorm2 && fc > f => {
                    break Some((candidate, fc));
                }
                _ => t *= 0.5,
            }
        };
        let Some((next, fc)) = accepted else { break };
        current = next;
        f = fc;
        step = Some(t);
        trace.push(NcaIterate {
            iter,
            objective: f,
            step: t,
            transform: current.clone(),
        });
    }

    Ok(NcaFit {
        transform: current,
        objective: f,
        initial_objective,
        trace,
    })
}

/// Class posterior from squared distances to labelled neighbours:
/// `P(y = k) = sum_j [y_j = k] exp(-d_j^2) / sum_t exp(-d_t^2)`.
pub fn class_posterior(d2: &[f64], neighbor_labels: &[usize], class_count: usize) -> Result<PredictiveDistribution> {
    check_dim(d2.len(), neighbor_labels.len())?;
    if d2.is_empty() {
        return Err(Error::InvalidArgument(
            "class posterior needs at least one neighbour".into(),
        ));
    }
    if d2.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("class posterior distances"));
    }
    let p = softmin(d2);
    let mut probs = vec![0.0; class_count];
    for (&y, pj) in neighbor_labels.iter().zip(p) {
        if y >= class_count {
            return Err(Error::InvalidArgument(format!("label {y} outside [0, {class_count})")));
        }
        probs[y] += pj;
    }
    PredictiveDistribution::new(probs)
}

/// NCA class posterior of a query point given its neighbour ids in `train`.
pub fn nca_class_posterior(
    query: &DVector<f64>,
    train: &Dataset,
    neighbor_ids: &[usize],
    metric: &MahalanobisMetric,
) -> Result<PredictiveDistribution> {
    check_dim(train.dim(), query.len())?;
    let d2: Vec<f64> = neighbor_ids
        .iter()
        .map(|&j| metric.sq_dist(query, &train.point(j)))
        .collect();
    let labels: Vec<usize> = neighbor_ids.iter().map(|&j| train.label(j)).collect();
    class_posterior(&d2, &labels, train.class_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let rows = vec![
            vec![0.0, 0.0],
            vec![0.5, 0.1],
            vec![0.2, 0.7],
            vec![2.0, 2.0],
            vec![2.4, 1.8],
            vec![1.9, 2.6],
        ];
        Dataset::from_rows(&rows, vec![0, 0, 1, 1, 1, 0], 2).unwrap()
    }

    #[test]
    fn zero_metric_gives_uniform_probs() {
        let ds = toy();
        let g = NeighborGraph::build(&ds, 3, None).unwrap();
        let zero = MahalanobisMetric::new(DMatrix::zeros(2, 2)).unwrap();
        let probs = neighbor_probs(&ds, &g, &zero).unwrap();
        for row in &probs.p {
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let ds = toy();
        let g = NeighborGraph::build(&ds, 4, None).unwrap();
        let probs = neighbor_probs(&ds, &g, &MahalanobisMetric::identity(2)).unwrap();
        for row in &probs.p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn equidistant_pair() {
        let rows = vec![vec![0.0], vec![-1.0], vec![1.0]];
        let ds = Dataset::from_rows(&rows, vec![0, 0, 1], 2).unwrap();
        let g = NeighborGraph::build(&ds, 2, None).unwrap();
        let probs = neighbor_probs(&ds, &g, &MahalanobisMetric::identity(1)).unwrap();
        assert_eq!(probs.p[0], vec![0.5, 0.5]);
    }

    #[test]
    fn objective_zero_when_neighbours_agree() {
        let rows = vec![vec![0.0], vec![0.1], vec![0.2], vec![5.0], vec![5.1], vec![5.2]];
        let ds = Dataset::from_rows(&rows, vec![0, 0, 0, 1, 1, 1], 2).unwrap();
        let g = NeighborGraph::build(&ds, 2, None).unwrap();
        let l = nca_objective(&ds, &g, &MahalanobisMetric::identity(1)).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn objective_floors_isolated_points() {
        let rows = vec![vec![0.0], vec![0.1], vec![0.2]];
        let ds = Dataset::from_rows(&rows, vec![0, 1, 2], 3).unwrap();
        let g = NeighborGraph::build(&ds, 1, None).unwrap();
        let l = nca_objective(&ds, &g, &MahalanobisMetric::identity(1)).unwrap();
        assert!((l - 3.0 * EPS_FLOOR.ln()).abs() < 1e-9);
        let grad = nca_gradient(&ds, &g, &LinearTransform::identity(1)).unwrap();
        assert_eq!(grad[(0, 0)], 0.0);
    }

    #[test]
    fn objective_is_non_positive() {
        let ds = toy();
        let g = NeighborGraph::build(&ds, 3, None).unwrap();
        assert!(nca_objective(&ds, &g, &MahalanobisMetric::identity(2)).unwrap() <= 0.0);
    }

    #[test]
    fn zero_transform_has_zero_gradient() {
        let ds = toy();
        let g = NeighborGraph::build(&ds, 3, None).unwrap();
        let grad = nca_gradient(&ds, &g, &LinearTransform(DMatrix::zeros(2, 2))).unwrap();
        assert_eq!(grad.abs().max(), 0.0);
    }

    #[test]
    fn metric_gradient_is_symmetric() {
        let ds = toy();
        let g = NeighborGraph::build(&ds, 3, None).unwrap();
        let grad = nca_metric_gradient(&ds, &g, &MahalanobisMetric::identity(2)).unwrap();
        assert!((&grad - grad.transpose()).abs().max() < 1e-14);
    }

    #[test]
    fn metric_validation() {
        assert!(MahalanobisMetric::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(MahalanobisMetric::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
        assert!(MahalanobisMetric::new(DMatrix::identity(3, 3)).is_ok());
    }

    #[test]
    fn posterior_single_class_neighbours() {
        let p = class_posterior(&[0.3, 1.0, 2.0], &[0, 0, 0], 3).unwrap();
        assert_eq!(p.probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn posterior_uniform_under_zero_metric() {
        let p = class_posterior(&[0.0; 4], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
    }
}
