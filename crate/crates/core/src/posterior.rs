//! Inference with the variational posterior over `gamma`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::eigenbasis::{EigenBasis, PairFeature};
use crate::error::{check_dim, Error, Result};
use crate::nca::{class_posterior, MahalanobisMetric};
use crate::variational::GaussianBelief;

pub const DEFAULT_MCMC_SAMPLES: usize = 1000;
const SAMPLING_JITTER: f64 = 1e-12;

/// Gaussian belief over one squared distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceBelief {
    pub mean: f64,
    pub variance: f64,
}

/// Probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    probs: Vec<f64>,
}

impl PredictiveDistribution {
    /// Accepts non-negative entries summing to one within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty predictive distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(
                "predictive entries must be finite and >= 0".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("predictive mass sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    /// Classes ordered by probability, descending; ties to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.probs.len()).collect();
        order.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        order
    }

    pub fn argmax(&self) -> usize {
        self.ranking()[0]
    }

    /// Top-1 minus top-2 probability (the top-1 mass for a single class).
    pub fn margin(&self) -> f64 {
        let r = self.ranking();
        match r.get(1) {
            Some(&second) => self.probs[r[0]] - self.probs[second],
            None => self.probs[r[0]],
        }
    }
}

/// `mean = w^T m_T`, `variance = w^T V_T w`.
pub fn distance_belief(posterior: &GaussianBelief, w: &PairFeature) -> Result<DistanceBelief> {
    check_dim(posterior.dim(), w.len())?;
    let w = w.as_vector();
    let variance = w.dot(&(posterior.cov() * w)).max(0.0);
    Ok(DistanceBelief {
        mean: w.dot(posterior.mean()),
        variance,
    })
}

/// MAP metric `A = sum_l max(m_l, 0) v_l v_l^T` and the matching projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMetric {
    pub metric: MahalanobisMetric,
    /// `d x D`; `|P (x_i - x_j)|^2 = sum_l max(m_l, 0) w_ij[l]`.
    #[serde(with = "crate::linalg::row_major")]
    pub projection: DMatrix<f64>,
    /// Number of posterior mean entries clamped to zero.
    pub clamped: usize,
}

impl MapMetric {
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.projection * x
    }
}

/// Scales each basis axis by the square root of its (clamped) posterior mean.
pub fn map_metric(posterior: &GaussianBelief, basis: &EigenBasis) -> Result<MapMetric> {
    check_dim(basis.rank(), posterior.dim())?;
    let clamped = posterior.mean().iter().filter(|&&m| m < 0.0).count();
    let weights = posterior.mean().map(|m| m.max(0.0));
    let scale = DMatrix::from_diagonal(&weights.map(f64::sqrt));
    let projection = scale * basis.vectors().transpose();
    let mut a = basis.vectors() * DMatrix::from_diagonal(&weights) * basis.vectors().transpose();
    crate::linalg::symmetrize(&mut a);
    Ok(MapMetric {
        metric: MahalanobisMetric::new(a)?,
        projection,
        clamped,
    })
}

fn sampling_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = nalgebra::Cholesky::new(cov.clone()) {
        return Ok(chol.l());
    }
    let n = cov.nrows();
    let jittered = cov + DMatrix::identity(n, n) * SAMPLING_JITTER;
    nalgebra::Cholesky::new(jittered)
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite("posterior covariance"))
}

/// `count` i.i.d. draws `m_T + L z` with `L L^T = V_T` and `z ~ N(0, I)`.
pub fn sample_gamma(posterior: &GaussianBelief, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let factor = sampling_factor(posterior.cov())?;
    let d = posterior.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            posterior.mean() + &factor * z
        })
        .collect())
}

fn query_features(
    query: &DVector<f64>,
    train: &Dataset,
    neighbor_ids: &[usize],
    basis: &EigenBasis,
) -> Result<(Vec<PairFeature>, Vec<usize>)> {
    let q = basis.project(query)?;
    let mut features = Vec::with_capacity(neighbor_ids.len());
    for &j in neighbor_ids {
        let pj = basis.project(&train.point(j))?;
        features.push(EigenBasis::pair_feature_projected(&q, &pj));
    }
    let labels = neighbor_ids.iter().map(|&j| train.label(j)).collect();
    Ok((features, labels))
}

/// Class posterior with `gamma` fixed at the posterior mean.
pub fn plugin_predictive(
    query: &DVector<f64>,
    train: &Dataset,
    neighbor_ids: &[usize],
    basis: &EigenBasis,
    gamma: &DVector<f64>,
) -> Result<PredictiveDistribution> {
    check_dim(basis.rank(), gamma.len())?;
    let (features, labels) = query_features(query, train, neighbor_ids, basis)?;
    let d2: Vec<f64> = features.iter().map(|w| gamma.dot(w.as_vector())).collect();
    class_posterior(&d2, &labels, train.class_count())
}

/// Monte Carlo predictive: the class posterior averaged over `samples` draws
/// of `gamma` from the posterior.
pub fn predictive_mcmc(
    query: &DVector<f64>,
    train: &Dataset,
    neighbor_ids: &[usize],
    basis: &EigenBasis,
    posterior: &GaussianBelief,
    samples: usize,
    seed: u64,
) -> Result<PredictiveDistribution> {
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "predictive_mcmc needs at least one sample".into(),
        ));
    }
    check_dim(basis.rank(), posterior.dim())?;
    let (features, labels) = query_features(query, train, neighbor_ids, basis)?;
    let w = DMatrix::from_fn(features.len(), posterior.dim(), |t, l| features[t].as_vector()[l]);
    let mut acc = vec![0.0; train.class_count()];
    for gamma in sample_gamma(posterior, samples, seed)? {
        let d2: Vec<f64> = (&w * gamma).iter().copied().collect();
        let p = class_posterior(&d2, &labels, train.class_count())?;
        for (a, v) in acc.iter_mut().zip(p.probs()) {
            *a += v;
        }
    }
    let t = samples as f64;
    let mut probs: Vec<f64> = acc.into_iter().map(|a| a / t).collect();
    // renormalise away accumulated rounding
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    PredictiveDistribution::new(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn belief(mean: DVector<f64>, var: f64) -> GaussianBelief {
        let d = mean.len();
        GaussianBelief::new(mean, DMatrix::identity(d, d) * var).unwrap()
    }

    #[test]
    fn distance_belief_cases() {
        let post = belief(dvector![0.5, 2.0], 0.01);
        let zero = distance_belief(&post, &PairFeature(dvector![0.0, 0.0])).unwrap();
        assert_eq!((zero.mean, zero.variance), (0.0, 0.0));
        let db = distance_belief(&post, &PairFeature(dvector![1.0, 3.0])).unwrap();
        assert!((db.mean - 6.5).abs() < 1e-15);
        assert!((db.variance - 0.01 * 10.0).abs() < 1e-15);
        assert!(distance_belief(&post, &PairFeature(dvector![1.0])).is_err());
    }

    #[test]
    fn map_metric_unit_mean_is_projector() {
        let basis = EigenBasis::from_parts(DMatrix::identity(3, 2), vec![2.0, 1.0]).unwrap();
        let m = map_metric(&belief(dvector![1.0, 1.0], 0.1), &basis).unwrap();
        let expected = DMatrix::from_diagonal(&dvector![1.0, 1.0, 0.0]);
        assert!((m.metric.matrix() - expected).abs().max() < 1e-15);
        assert_eq!(m.clamped, 0);
    }

    #[test]
    fn map_metric_clamps_negative_axes() {
        let basis = EigenBasis::from_parts(DMatrix::identity(2, 2), vec![2.0, 1.0]).unwrap();
        let m = map_metric(&belief(dvector![2.0, -0.5], 0.1), &basis).unwrap();
        assert_eq!(m.clamped, 1);
        assert_eq!(m.metric.matrix()[(1, 1)], 0.0);
        assert_eq!(m.projection[(1, 1)], 0.0);
    }

    #[test]
    fn vanishing_covariance_samples_sit_on_mean() {
        let post = belief(dvector![0.2, -0.1, 0.4], 1e-16);
        for g in sample_gamma(&post, 50, 3).unwrap() {
            assert!((g - post.mean()).amax() < 1e-6);
        }
        assert_eq!(sample_gamma(&post, 5, 9).unwrap(), sample_gamma(&post, 5, 9).unwrap());
    }

    #[test]
    fn predictive_ranking_and_margin() {
        let p = PredictiveDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(p.ranking(), vec![1, 2, 0]);
        assert!((p.margin() - 0.2).abs() < 1e-15);
        assert!(PredictiveDistribution::new(vec![0.2, 0.2]).is_err());
        assert!(PredictiveDistribution::new(vec![-0.2, 1.2]).is_err());
    }
}
