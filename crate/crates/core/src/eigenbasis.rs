//! Eigen-approximation of the Mahalanobis matrix.
//!
//! The metric is restricted to `A = sum_l gamma_l v_l v_l^T` where `v_l` are
//! the leading eigenvectors of the (uncentred) scatter `sum_i x_i x_i^T`.
//! Squared distances then become linear in `gamma`:
//! `d^2(x_i, x_j) = gamma^T w_ij` with `w_ij[l] = (v_l^T (x_i - x_j))^2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::symmetric_eigen;

/// Leading `d` unit eigenvectors (columns of a `D x d` matrix) with their
/// eigenvalues in descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EigenBasisBlob", into = "EigenBasisBlob")]
pub struct EigenBasis {
    vectors: DMatrix<f64>,
    values: Vec<f64>,
    centered: bool,
}

/// Flat persisted form: `vectors` is row-major `dim x d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenBasisBlob {
    pub d: usize,
    pub dim: usize,
    pub centered: bool,
    pub vectors: Vec<f64>,
    pub values: Vec<f64>,
}

impl From<EigenBasis> for EigenBasisBlob {
    fn from(b: EigenBasis) -> Self {
        let (dim, d) = b.vectors.shape();
        let vectors = (0..dim)
            .flat_map(|r| (0..d).map(move |c| (r, c)))
            .map(|(r, c)| b.vectors[(r, c)])
            .collect();
        Self {
            d,
            dim,
            centered: b.centered,
            vectors,
            values: b.values,
        }
    }
}

impl TryFrom<EigenBasisBlob> for EigenBasis {
    type Error = Error;

    fn try_from(blob: EigenBasisBlob) -> Result<Self> {
        check_dim(blob.d * blob.dim, blob.vectors.len())?;
        check_dim(blob.d, blob.values.len())?;
        Ok(Self {
            vectors: DMatrix::from_row_slice(blob.dim, blob.d, &blob.vectors),
            values: blob.values,
            centered: blob.centered,
        })
    }
}

impl EigenBasis {
    /// Top-`d` eigenvectors of the uncentred scatter of the rows of `x`.
    pub fn top_eigenvectors(x: &DMatrix<f64>, d: usize) -> Result<Self> {
        Self::fit(x, d, false)
    }

    /// As [`EigenBasis::top_eigenvectors`], optionally subtracting the row
    /// mean first (the PCA reading).
    pub fn fit(x: &DMatrix<f64>, d: usize, centered: bool) -> Result<Self> {
        let (n, dim) = x.shape();
        if d < 1 || d > n.min(dim) {
            return Err(Error::InvalidArgument(format!(
                "eigen count d={d} must lie in [1, min(N={n}, D={dim})]"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("eigenbasis input"));
        }
        let scatter = if centered {
            let mean = x.row_mean();
            let mut c = x.clone();
            for mut row in c.row_iter_mut() {
                row -= &mean;
            }
            c.transpose() * c
        } else {
            x.transpose() * x
        };
        let eig = symmetric_eigen(&scatter)?;
        let mut vectors = eig.vectors.columns(0, d).into_owned();
        for mut col in vectors.column_iter_mut() {
            let pivot = col
                .iter()
                .copied()
                .fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            if pivot < 0.0 {
                col.neg_mut();
            }
        }
        Ok(Self {
            vectors,
            values: eig.values.iter().take(d).copied().collect(),
            centered,
        })
    }

    /// Builds a basis from explicit orthonormal columns; eigenvalues are
    /// recorded as given.
    pub fn from_parts(vectors: DMatrix<f64>, values: Vec<f64>) -> Result<Self> {
        check_dim(vectors.ncols(), values.len())?;
        let gram = vectors.transpose() * &vectors;
        let err = (gram - DMatrix::identity(values.len(), values.len())).abs().max();
        if err > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "basis columns are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(Self {
            vectors,
            values,
            centered: false,
        })
    }

    /// `D x d` matrix of unit eigenvectors.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of retained eigenvectors `d`.
    pub fn rank(&self) -> usize {
        self.vectors.ncols()
    }

    /// Ambient feature dimension `D`.
    pub fn ambient_dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Coordinates `V^T x` of a point in the basis.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.ambient_dim(), x.len())?;
        Ok(self.vectors.tr_mul(x))
    }

    /// Projects every row of `points`, returning an `N x d` matrix.
    pub fn project_rows(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.ambient_dim(), points.ncols())?;
        Ok(points * &self.vectors)
    }

    /// `w[l] = (v_l^T (x_i - x_j))^2`.
    pub fn pair_feature(&self, xi: &DVector<f64>, xj: &DVector<f64>) -> Result<PairFeature> {
        check_dim(self.ambient_dim(), xi.len())?;
        check_dim(self.ambient_dim(), xj.len())?;
        let diff = xi - xj;
        Ok(PairFeature(self.vectors.tr_mul(&diff).map(|p| p * p)))
    }

    /// Pair feature from already projected coordinates.
    pub fn pair_feature_projected(pi: &DVector<f64>, pj: &DVector<f64>) -> PairFeature {
        PairFeature((pi - pj).map(|p| p * p))
    }

    /// Explicit `A = sum_l gamma_l v_l v_l^T`.
    pub fn assemble_metric(&self, gamma: &GammaVector) -> Result<DMatrix<f64>> {
        check_dim(self.rank(), gamma.0.len())?;
        let scaled = &self.vectors * DMatrix::from_diagonal(&gamma.0);
        Ok(scaled * self.vectors.transpose())
    }
}

/// Squared projections of a point difference onto the basis. Every entry is
/// non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeature(pub DVector<f64>);

impl PairFeature {
    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Combination weights of the eigen-approximated metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaVector(#[serde(with = "crate::linalg::plain_vector")] pub DVector<f64>);

impl GammaVector {
    pub fn new(gamma: DVector<f64>) -> Result<Self> {
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gamma"));
        }
        Ok(Self(gamma))
    }
}

/// `gamma^T w`, the squared distance under the eigen-approximated metric.
pub fn gamma_distance(gamma: &GammaVector, w: &PairFeature) -> Result<f64> {
    check_dim(gamma.0.len(), w.0.len())?;
    Ok(gamma.0.dot(&w.0))
}
