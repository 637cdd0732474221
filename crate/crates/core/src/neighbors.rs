//! Frozen K-nearest-neighbour sets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::eigenbasis::EigenBasis;
use crate::error::{check_dim, Error, Result};

/// Default neighbourhood size.
pub const DEFAULT_K: usize = 8;

/// For every point `i`, its `k` nearest other points, nearest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborGraph {
    k: usize,
    ids: Vec<Vec<usize>>,
}

impl NeighborGraph {
    /// K nearest neighbours of every point under squared Euclidean distance,
    /// measured in the basis coordinates when a basis is given. Ties go to
    /// the lower index. The point itself is never its own neighbour.
    pub fn build(ds: &Dataset, k: usize, basis: Option<&EigenBasis>) -> Result<Self> {
        let n = ds.len();
        if k < 1 || k + 1 > n {
            return Err(Error::InvalidArgument(format!(
                "neighbour count K={k} must lie in [1, N-1] with N={n}"
            )));
        }
        let coords = match basis {
            Some(b) => b.project_rows(ds.points())?,
            None => ds.points().clone(),
        };
        let ids = (0..n)
            .map(|i| {
                let q = coords.row(i).transpose();
                k_nearest(&coords, &q, k, Some(i))
            })
            .collect();
        Ok(Self { k, ids })
    }

    /// Wraps explicit neighbour lists after validating them.
    pub fn from_lists(ids: Vec<Vec<usize>>) -> Result<Self> {
        let n = ids.len();
        let k = ids.first().map_or(0, Vec::len);
        for (i, list) in ids.iter().enumerate() {
            if list.len() != k || k == 0 {
                return Err(Error::InvalidArgument(format!("neighbour list {i} has wrong length")));
            }
            if list.iter().any(|&j| j == i || j >= n) {
                return Err(Error::InvalidArgument(format!("neighbour list {i} has a bad index")));
            }
        }
        Ok(Self { k, ids })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.ids[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.ids.iter().map(Vec::as_slice)
    }

    pub(crate) fn check_against(&self, ds: &Dataset) -> Result<()> {
        check_dim(ds.len(), self.ids.len())
    }
}

/// Indices of the `k` rows of `points` closest to `query` (squared
/// Euclidean), nearest first, ties to the lower index. `exclude` skips one
/// row.
pub fn k_nearest(points: &DMatrix<f64>, query: &DVector<f64>, k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = (0..points.nrows())
        .filter(|&j| Some(j) != exclude)
        .map(|j| {
            let d: f64 = points
                .row(j)
                .iter()
                .zip(query.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d, j)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Neighbour lists of query points against a training set, in raw feature
/// space.
pub fn query_neighbors(train: &Dataset, queries: &DMatrix<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    check_dim(train.dim(), queries.ncols())?;
    if k < 1 || k > train.len() {
        return Err(Error::InvalidArgument(format!(
            "query neighbour count {k} must lie in [1, {}]",
            train.len()
        )));
    }
    Ok(queries
        .row_iter()
        .map(|row| k_nearest(train.points(), &row.transpose(), k, None))
        .collect())
}
