//! Variational posterior over the metric weights `gamma`.
//!
//! Each same-label pair `(i, j)` with `j` in `N_i` contributes the term
//! `-lse(eta_ij)`, `eta_ij = (W_i^j)^T gamma`, to a lower bound of the NCA
//! log-likelihood. Bohning's bound replaces every `-lse` by a quadratic with
//! the fixed curvature `H = (I_K - 11^T / (K + 1)) / 2`, which makes the
//! Gaussian prior conjugate:
//!
//! ```text
//! V_T = [V_0^-1 + sum W H W^T]^-1          (independent of psi)
//! m_T = V_T (V_0^-1 m_0 + sum W b)         b = H psi - g(psi)
//! psi = W^T m_T
//! ```
//!
//! [`fit_bnca`] computes `H` and `V_T` once and iterates the last two lines
//! until `m_T` stops moving.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::eigenbasis::{EigenBasis, PairFeature};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{min_eigenvalue, spd_inverse, symmetrize};
use crate::neighbors::NeighborGraph;

pub const DEFAULT_PRIOR_MEAN: f64 = 0.1;
pub const DEFAULT_PRIOR_VARIANCE: f64 = 0.001;
pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_TOL: f64 = 1e-6;

thread_local! {
    static H_EVALS: Cell<usize> = const { Cell::new(0) };
    static COV_EVALS: Cell<usize> = const { Cell::new(0) };
}

/// Per-thread running totals of `(bohning_h, posterior_covariance)` calls.
pub fn evaluation_counts() -> (usize, usize) {
    (H_EVALS.with(Cell::get), COV_EVALS.with(Cell::get))
}

/// `log(1 + sum_t exp(eta_t))`, shifted by `max(0, max eta)`.
pub fn lse(eta: &DVector<f64>) -> f64 {
    let shift = eta.iter().copied().fold(0.0_f64, f64::max);
    let tail: f64 = eta.iter().map(|&e| (e - shift).exp()).sum();
    shift + ((-shift).exp() + tail).ln()
}

/// `g(psi) = exp(psi - lse(psi))`; entries sum to less than one.
pub fn softmax_g(psi: &DVector<f64>) -> DVector<f64> {
    let l = lse(psi);
    psi.map(|p| (p - l).exp())
}

/// Bohning curvature `H = (I_K - 1_K 1_K^T / (K + 1)) / 2`.
pub fn bohning_h(k: usize) -> Result<DMatrix<f64>> {
    if k < 1 {
        return Err(Error::InvalidArgument("Bohning curvature needs K >= 1".into()));
    }
    H_EVALS.with(|c| c.set(c.get() + 1));
    let off = 1.0 / (k as f64 + 1.0);
    Ok(DMatrix::from_fn(k, k, |r, c| {
        let delta = if r == c { 1.0 } else { 0.0 };
        0.5 * (delta - off)
    }))
}

/// `b = H psi - g(psi)`.
pub fn bohning_b(psi: &DVector<f64>, h: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_dim(h.ncols(), psi.len())?;
    Ok(h * psi - softmax_g(psi))
}

/// Bohning quadratic lower bound on `-lse(eta)`, tangent at `psi`:
/// `-eta^T H eta / 2 + b^T eta - c` with
/// `c = psi^T H psi / 2 - g(psi)^T psi + lse(psi)`.
pub fn bound_value(eta: &DVector<f64>, psi: &DVector<f64>, h: &DMatrix<f64>) -> Result<f64> {
    check_dim(h.ncols(), eta.len())?;
    check_dim(h.ncols(), psi.len())?;
    let g = softmax_g(psi);
    let h_psi = h * psi;
    let b = &h_psi - &g;
    let c = 0.5 * psi.dot(&h_psi) - g.dot(psi) + lse(psi);
    Ok(-0.5 * eta.dot(&(h * eta)) + b.dot(eta) - c)
}

/// Gaussian belief over `gamma`, used both as prior and posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BeliefBlob", into = "BeliefBlob")]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

/// Persisted form: `cov` is row-major `d x d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeliefBlob {
    pub d: usize,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl From<GaussianBelief> for BeliefBlob {
    fn from(b: GaussianBelief) -> Self {
        let d = b.mean.len();
        let cov = (0..d)
            .flat_map(|r| (0..d).map(move |c| (r, c)))
            .map(|rc| b.cov[rc])
            .collect();
        Self {
            d,
            mean: b.mean.iter().copied().collect(),
            cov,
        }
    }
}

impl TryFrom<BeliefBlob> for GaussianBelief {
    type Error = Error;

    fn try_from(blob: BeliefBlob) -> Result<Self> {
        check_dim(blob.d, blob.mean.len())?;
        check_dim(blob.d * blob.d, blob.cov.len())?;
        GaussianBelief::new(
            DVector::from_vec(blob.mean),
            DMatrix::from_row_slice(blob.d, blob.d, &blob.cov),
        )
    }
}

impl GaussianBelief {
    /// Validates symmetry (to 1e-10) and positive definiteness.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        check_dim(mean.len(), cov.ncols())?;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian belief"));
        }
        if (&cov - cov.transpose()).abs().max() >= 1e-10 {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        if min_eigenvalue(&cov)? <= 0.0 {
            return Err(Error::NotPositiveDefinite("covariance"));
        }
        Ok(Self { mean, cov })
    }

    /// Isotropic prior `N(epsilon * 1, sigma * I)`.
    pub fn isotropic(d: usize, epsilon: f64, sigma: f64) -> Result<Self> {
        if d == 0 || sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "isotropic prior needs d >= 1 and sigma > 0 (got d={d}, sigma={sigma})"
            )));
        }
        Self::new(DVector::from_element(d, epsilon), DMatrix::identity(d, d) * sigma)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Design matrix of one same-label pair: column `t` is `w_ij - w_{i,N_i[t]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDesign {
    pub owner_i: usize,
    pub owner_j: usize,
    /// Position of `j` inside `N_i`; that column is identically zero.
    pub slot: usize,
    pub w: DMatrix<f64>,
}

/// One design per ordered pair `(i, j in N_i)` with `y_i = y_j`.
pub fn build_pair_designs(ds: &Dataset, graph: &NeighborGraph, basis: &EigenBasis) -> Result<Vec<PairDesign>> {
    graph.check_against(ds)?;
    check_dim(basis.ambient_dim(), ds.dim())?;
    let coords = basis.project_rows(ds.points())?;
    let d = basis.rank();
    let mut designs = Vec::new();
    for (i, ids) in graph.iter().enumerate() {
        let ci = coords.row(i).transpose();
        let features: Vec<PairFeature> = ids
            .iter()
            .map(|&t| EigenBasis::pair_feature_projected(&ci, &coords.row(t).transpose()))
            .collect();
        for (slot, &j) in ids.iter().enumerate() {
            if ds.label(j) != ds.label(i) {
                continue;
            }
            let wij = features[slot].as_vector();
            let w = DMatrix::from_fn(d, ids.len(), |l, t| wij[l] - features[t].as_vector()[l]);
            designs.push(PairDesign {
                owner_i: i,
                owner_j: j,
                slot,
                w,
            });
        }
    }
    Ok(designs)
}

/// `V_T = [V_0^-1 + sum W H W^T]^-1`. With no designs the prior covariance is
/// returned untouched.
pub fn posterior_covariance(prior: &GaussianBelief, designs: &[PairDesign], h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    COV_EVALS.with(|c| c.set(c.get() + 1));
    if designs.is_empty() {
        return Ok(prior.cov.clone());
    }
    let d = prior.dim();
    let mut precision = spd_inverse(&prior.cov, "prior covariance")?;
    for design in designs {
        check_dim(d, design.w.nrows())?;
        check_dim(h.nrows(), design.w.ncols())?;
        precision += &design.w * h * design.w.transpose();
    }
    symmetrize(&mut precision);
    spd_inverse(&precision, "posterior precision")
}

/// `m_T = V_T (V_0^-1 m_0 + sum W b)`. With no designs the prior mean is
/// returned untouched.
pub fn posterior_mean(
    prior: &GaussianBelief,
    v_t: &DMatrix<f64>,
    designs: &[PairDesign],
    b_all: &[DVector<f64>],
) -> Result<DVector<f64>> {
    check_dim(designs.len(), b_all.len())?;
    if designs.is_empty() {
        return Ok(prior.mean.clone());
    }
    let d = prior.dim();
    check_dim(d, v_t.nrows())?;
    let prior_precision = spd_inverse(&prior.cov, "prior covariance")?;
    let mut rhs = prior_precision * &prior.mean;
    for (design, b) in designs.iter().zip(b_all) {
        check_dim(design.w.ncols(), b.len())?;
        rhs.gemv(1.0, &design.w, b, 1.0);
    }
    Ok(v_t * rhs)
}

/// `psi = W^T m`.
pub fn update_psi(design: &PairDesign, mean: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(design.w.nrows(), mean.len())?;
    Ok(design.w.tr_mul(mean))
}

/// Loop settings for [`fit_bnca`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BncaConfig {
    pub max_iters: usize,
    /// Convergence threshold on `|m_T^new - m_T^old|_inf`.
    pub tol: f64,
}

impl Default for BncaConfig {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BncaIterate {
    pub iter: usize,
    /// `|m_T^new - m_T^old|_inf`.
    pub delta: f64,
    /// Sum of the per-pair quadratic bounds at the new mean.
    pub bound: f64,
    pub mean: Vec<f64>,
}

/// How many times the fixed quantities were evaluated during one fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitCounters {
    pub curvature_evaluations: usize,
    pub covariance_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BncaFit {
    pub posterior: GaussianBelief,
    pub iterations: usize,
    pub converged: bool,
    pub pair_count: usize,
    pub trace: Vec<BncaIterate>,
    pub counters: FitCounters,
}

/// Runs the variational fixed point: `H`, all `W_i^j` and `V_T` once, then
/// `psi -> b -> m_T` until the mean moves less than `tol` (infinity norm) or
/// `max_iters` is reached. Non-convergence is reported through
/// `converged`, not as an error.
pub fn fit_bnca(
    ds: &Dataset,
    graph: &NeighborGraph,
    basis: &EigenBasis,
    prior: &GaussianBelief,
    config: &BncaConfig,
) -> Result<BncaFit> {
    check_dim(basis.rank(), prior.dim())?;
    let designs = build_pair_designs(ds, graph, basis)?;
    fit_with_designs(&designs, graph.k(), prior, config)
}

/// [`fit_bnca`] over precomputed designs.
pub fn fit_with_designs(
    designs: &[PairDesign],
    k: usize,
    prior: &GaussianBelief,
    config: &BncaConfig,
) -> Result<BncaFit> {
    let (h0, c0) = evaluation_counts();
    let h = bohning_h(k)?;
    let v_t = posterior_covariance(prior, designs, &h)?;

    let mut mean = prior.mean.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 1..=config.max_iters.max(1) {
        let psi: Vec<DVector<f64>> = designs.iter().map(|d| update_psi(d, &mean)).collect::<Result<_>>()?;
        let b: Vec<DVector<f64>> = psi.iter().map(|p| bohning_b(p, &h)).collect::<Result<_>>()?;
        let next = posterior_mean(prior, &v_t, designs, &b)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior mean"));
        }
        let delta = (&next - &mean).amax();
        let mut bound = 0.0;
        for (design, p) in designs.iter().zip(&psi) {
            bound += bound_value(&design.w.tr_mul(&next), p, &h)?;
        }
        mean = next;
        trace.push(BncaIterate {
            iter,
            delta,
            bound,
            mean: mean.iter().copied().collect(),
        });
        if delta < config.tol {
            converged = true;
            break;
        }
    }
    let (h1, c1) = evaluation_counts();
    Ok(BncaFit {
        posterior: GaussianBelief { mean, cov: v_t },
        iterations: trace.len(),
        converged,
        pair_count: designs.len(),
        trace,
        counters: FitCounters {
            curvature_evaluations: h1 - h0,
            covariance_evaluations: c1 - c0,
        },
    })
}
